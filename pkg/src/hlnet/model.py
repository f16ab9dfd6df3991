"""Full network assembly and the packed multi-scene forward pass.

Several scenes are concatenated into one set of object rows and one set of
pair rows (each scene contributing an N*N block). Attention between scenes
is blocked with validity masks, so a packed forward equals per-scene
forwards while paying the Python overhead once per batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .classifier import ObjectClassifier, predict_labels
from .exceptions import ConfigError
from .hypergraph import SceneGraph
from .layers import Module
from .relationship import RelationshipPredictor, build_mask
from .scenes import Detections, embedding_table
from .tensor import Tensor

PRESETS = {
    "hln": dict(n_transformer_layers=2, n_or_gat=1, use_hr_gat=True),
    "hln-or": dict(n_transformer_layers=2, n_or_gat=2, use_hr_gat=False),
    "hln-o": dict(n_transformer_layers=4, n_or_gat=0, use_hr_gat=False),
    "hln-b": dict(n_transformer_layers=0, n_or_gat=0, use_hr_gat=False),
}


@dataclass
class HlnConfig:
    dim: int = 768
    heads: int = 8
    ffn_mult: int = 2
    d_emb: int = 200
    n_transformer_layers: int = 2
    n_or_gat: int = 1
    use_hr_gat: bool = True
    use_freq_bias: bool = True
    mask_mode: str = "additive"
    include_endpoint_mediators: bool = False
    sample_size: int = 256
    max_pos_frac: float = 0.25

    def validate(self) -> "HlnConfig":
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.n_transformer_layers < 0 or self.n_or_gat < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.mask_mode not in ("additive", "multiplicative"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.sample_size < 1 or not 0 <= self.max_pos_frac <= 1:
            raise ConfigError("bad relationship sampling settings")
        return self

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "HlnConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[preset], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


class HlnModel(Module):
    def __init__(self, config: HlnConfig, n_categories: int, n_predicates: int, d_v: int, seed: int = 0):
        self.config = config.validate()
        self.n_categories = n_categories
        self.n_predicates = n_predicates
        self.d_v = d_v
        rng = np.random.default_rng([seed, 0x41])
        emb = embedding_table(n_categories + 1, config.d_emb, seed)
        d = config.dim
        self.classifier = ObjectClassifier(
            n_categories + 1, d_v, d, config.heads, config.n_transformer_layers,
            config.ffn_mult * d, emb, rng,
        )
        self.predictor = RelationshipPredictor(
            n_categories, n_predicates, d_v, d, d, d, config.heads, config.ffn_mult,
            config.n_or_gat, config.use_hr_gat, emb[1:], rng,
        )
        for path, p in self.named_parameters():
            p.name = path

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def set_frequency_bias(self, table: np.ndarray) -> None:
        fb = self.predictor.freq_bias
        if table.shape != fb.shape:
            raise ConfigError(f"frequency table shape {table.shape} != {fb.shape}")
        fb.data[...] = table


# ---------------------------------------------------------------------------
# packing


@dataclass
class PackedBatch:
    n_objects: list[int]
    obj_offset: np.ndarray
    visual: np.ndarray
    spatial: np.ndarray
    label_probs: np.ndarray
    boxes: np.ndarray
    gt_categories: np.ndarray | None
    obj_scene: np.ndarray
    # relationship stage (scenes with >= 2 objects)
    rel_scenes: list[int] = field(default_factory=list)
    rel_obj_global: np.ndarray = None
    rel_obj_offset: dict = None
    pair_offset: dict = None
    pair_subj: np.ndarray = None
    pair_obj: np.ndarray = None
    pair_nonself: np.ndarray = None
    or_mask: np.ndarray = None
    or_valid: np.ndarray = None
    rel_valid: np.ndarray = None

    @property
    def n_scenes(self) -> int:
        return len(self.n_objects)


def pack(detections: list[Detections], scenes: list[SceneGraph] | None = None) -> PackedBatch:
    sizes = [len(d) for d in detections]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    obj_scene = np.repeat(np.arange(len(sizes)), sizes)
    gt = None
    if scenes is not None:
        gt = np.concatenate([np.asarray(s.categories, dtype=np.intp) for s in scenes]) if scenes else np.zeros(0, np.intp)
    pb = PackedBatch(
        n_objects=sizes,
        obj_offset=offsets,
        visual=np.concatenate([d.visual for d in detections]),
        spatial=np.concatenate([d.spatial for d in detections]),
        label_probs=np.concatenate([d.label_probs for d in detections]),
        boxes=np.concatenate([d.boxes for d in detections]),
        gt_categories=gt,
        obj_scene=obj_scene,
    )
    rel = [s for s, n in enumerate(sizes) if n >= 2]
    pb.rel_scenes = rel
    rel_obj, subj, obj, nonself, pair_scene, rel_obj_scene = [], [], [], [], [], []
    pb.rel_obj_offset, pb.pair_offset = {}, {}
    r_off = p_off = 0
    blocks = []
    for s in rel:
        n = sizes[s]
        pb.rel_obj_offset[s], pb.pair_offset[s] = r_off, p_off
        rel_obj.append(offsets[s] + np.arange(n))
        a, b = np.divmod(np.arange(n * n), n)
        subj.append(r_off + a)
        obj.append(r_off + b)
        nonself.append(a != b)
        pair_scene.append(np.full(n * n, s))
        rel_obj_scene.append(np.full(n, s))
        blocks.append(build_mask(n))
        r_off += n
        p_off += n * n
    if rel:
        pb.rel_obj_global = np.concatenate(rel_obj)
        pb.pair_subj = np.concatenate(subj)
        pb.pair_obj = np.concatenate(obj)
        pb.pair_nonself = np.concatenate(nonself)
        ps, os_ = np.concatenate(pair_scene), np.concatenate(rel_obj_scene)
        pb.or_valid = os_[:, None] == ps[None, :]
        pb.rel_valid = pb.or_valid.T
        mask = np.zeros((r_off, p_off), dtype=bool)
        for s, blk in zip(rel, blocks):
            ro, po = pb.rel_obj_offset[s], pb.pair_offset[s]
            mask[ro:ro + blk.shape[0], po:po + blk.shape[1]] = blk
        pb.or_mask = mask
    return pb


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardOutput:
    obj_logits: Tensor
    labels: np.ndarray
    rel_logits: Tensor | None
    query_scene: np.ndarray
    query_flat: np.ndarray


def forward(
    model: HlnModel,
    batch: PackedBatch,
    queries: dict[int, np.ndarray] | None = None,
    mediator_support: dict[int, np.ndarray] | None = None,
    use_gt_labels: bool = False,
) -> ForwardOutput:
    """Run classifier and relationship predictor over a packed batch.

    ``queries`` maps scene index -> flat pair indices to score (default: all
    non-self pairs). ``mediator_support`` restricts, per scene, which objects
    may act as mediators in HR-GAT (default: all).
    """
    cfg = model.config
    clf = model.classifier
    same_scene = batch.obj_scene[:, None] == batch.obj_scene[None, :]
    obj_logits, x_sem = clf(batch.visual, batch.spatial, batch.label_probs, valid=same_scene)
    if use_gt_labels:
        labels = np.asarray(batch.gt_categories, dtype=np.intp)
    else:
        labels = predict_labels(obj_logits.data)

    q_scene, q_flat = _query_lists(batch, queries)
    if not len(q_scene):
        return ForwardOutput(obj_logits, labels, None, q_scene, q_flat)

    pred = model.predictor
    g = batch.rel_obj_global
    y = pred.init_object_feature(
        batch.visual[g], batch.spatial[g], T.take(x_sem, g), labels[g]
    )
    z = pred.pair_features(y, batch.pair_subj, batch.pair_obj, batch.pair_nonself)
    for block in pred.or_gats:
        y, z = block(y, z, batch.or_mask, mask_mode=cfg.mask_mode,
                     obj_valid=batch.or_valid, rel_valid=batch.rel_valid)

    q_rows = np.array([batch.pair_offset[s] + f for s, f in zip(q_scene, q_flat)], dtype=np.intp)
    z_q = _hyper_update(model, batch, z, q_scene, q_flat, q_rows, mediator_support)
    subj_lab = labels[g[batch.pair_subj[q_rows]]]
    obj_lab = labels[g[batch.pair_obj[q_rows]]]
    logits = pred.logits(z_q, subj_lab, obj_lab, cfg.use_freq_bias)
    return ForwardOutput(obj_logits, labels, logits, q_scene, q_flat)


def _query_lists(batch: PackedBatch, queries):
    scenes, flats = [], []
    for s in batch.rel_scenes:
        n = batch.n_objects[s]
        if queries is None:
            f = np.arange(n * n)
            f = f[f // n != f % n]
        else:
            f = np.asarray(queries.get(s, []), dtype=np.intp)
        scenes.append(np.full(len(f), s, dtype=np.intp))
        flats.append(f)
    if not scenes:
        return np.zeros(0, np.intp), np.zeros(0, np.intp)
    return np.concatenate(scenes), np.concatenate(flats).astype(np.intp)


def _hyper_update(model, batch, z, q_scene, q_flat, q_rows, support):
    cfg = model.config
    hr = model.predictor.hr_gat
    z_q = T.take(z, q_rows)
    if hr is None:
        return z_q
    k_max = max(batch.n_objects[s] for s in batch.rel_scenes)
    n_q = len(q_rows)
    ik = np.zeros((n_q, k_max), np.intp)
    ki, jk, kj = ik.copy(), ik.copy(), ik.copy()
    valid = np.zeros((n_q, k_max), bool)
    for s in np.unique(q_scene):
        sel = np.nonzero(q_scene == s)[0]
        n = batch.n_objects[s]
        po = batch.pair_offset[s]
        i, j = np.divmod(q_flat[sel], n)
        k = np.arange(n)[None, :]
        ok = np.ones((len(sel), n), bool)
        if not cfg.include_endpoint_mediators:
            ok &= (k != i[:, None]) & (k != j[:, None])
        if support is not None and s in support:
            allowed = np.zeros(n, bool)
            allowed[np.asarray(support[s], dtype=np.intp)] = True
            ok &= allowed[None, :]
        ik[sel, :n] = po + i[:, None] * n + k
        ki[sel, :n] = po + k * n + i[:, None]
        jk[sel, :n] = po + j[:, None] * n + k
        kj[sel, :n] = po + k * n + j[:, None]
        valid[sel, :n] = ok
    has_med = valid.any(axis=1)
    if not has_med.any():
        return z_q
    hi = np.nonzero(has_med)[0]
    hyper = hr.transitive_feature(
        T.take(z, ik[hi]), T.take(z, ki[hi]), T.take(z, jk[hi]), T.take(z, kj[hi])
    )
    updated = hr(T.take(z_q, hi), hyper, valid[hi])
    if has_med.all():
        return updated
    bi = np.nonzero(~has_med)[0]
    stacked = T.concat([updated, T.take(z_q, bi)], axis=0)
    order = np.argsort(np.concatenate([hi, bi]), kind="stable")
    return T.take(stacked, order)


# ---------------------------------------------------------------------------
# inference


@dataclass
class PredicateScores:
    """Sigmoid predicate scores for every ordered non-self pair of one scene."""

    n_objects: int
    pairs: np.ndarray  # [P, 2] (subject, object), ascending flat index
    scores: np.ndarray  # [P, c_p]
    labels: np.ndarray  # [N] predicted (or given) categories
    boxes: np.ndarray  # [N, 4]

    @property
    def flat(self) -> np.ndarray:
        return self.pairs[:, 0] * self.n_objects + self.pairs[:, 1]


def predict_scores(
    model: HlnModel,
    detections: list[Detections],
    scenes: list[SceneGraph] | None = None,
    use_gt_labels: bool = False,
    batch_size: int = 32,
) -> list[PredicateScores]:
    out = []
    with T.no_tape():
        for start in range(0, len(detections), batch_size):
            dets = detections[start:start + batch_size]
            scs = scenes[start:start + batch_size] if scenes is not None else None
            batch = pack(dets, scs)
            res = forward(model, batch, use_gt_labels=use_gt_labels)
            probs = None if res.rel_logits is None else T.stable_sigmoid(res.rel_logits.data)
            for s in range(batch.n_scenes):
                n = batch.n_objects[s]
                o0 = batch.obj_offset[s]
                sel = np.nonzero(res.query_scene == s)[0]
                flat = res.query_flat[sel]
                pairs = np.stack(np.divmod(flat, n), axis=1) if n else np.zeros((0, 2), np.intp)
                scores = probs[sel] if probs is not None else np.zeros((0, model.n_predicates))
                out.append(PredicateScores(
                    n, pairs.reshape(-1, 2), scores, res.labels[o0:o0 + n].copy(),
                    batch.boxes[o0:o0 + n].copy(),
                ))
    return out
