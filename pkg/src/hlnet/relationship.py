"""Relationship predictor: pair initialisation, OR-GAT, HR-GAT, frequency
bias, relationship sampling and the binary cross-entropy loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .hypergraph import SceneGraph
from .layers import (
    AttentionBlock,
    FeedForward,
    LayerNorm,
    LinearLayer,
    Module,
    attention,
    masked_attention,
    residual_ln,
)
from .tensor import Parameter, Tensor


def build_mask(n: int) -> np.ndarray:
    """[N, N*N] boolean mask: object i sees the non-self pairs it takes part in."""
    a, b = np.divmod(np.arange(n * n), n)
    rows = np.arange(n)[:, None]
    return ((a[None, :] == rows) | (b[None, :] == rows)) & (a != b)[None, :]


class ORGAT(Module):
    """Relationship -> object masked attention, then object -> relationship attention."""

    def __init__(self, d_obj: int, d_rel: int, heads: int, ffn_mult: int, rng, name="orgat"):
        self.ma = AttentionBlock(d_obj, heads, rng, key_dim=d_rel, name=f"{name}.ma")
        self.ln_ma = LayerNorm(d_obj)
        self.ffn_obj = FeedForward(d_obj, ffn_mult * d_obj, rng)
        self.ln_ffn_obj = LayerNorm(d_obj)
        self.at = AttentionBlock(d_rel, heads, rng, key_dim=d_obj, name=f"{name}.at")
        self.ln_at = LayerNorm(d_rel)
        self.ffn_rel = FeedForward(d_rel, ffn_mult * d_rel, rng)
        self.ln_ffn_rel = LayerNorm(d_rel)

    def __call__(self, y, z, mask, mask_mode="additive", obj_valid=None, rel_valid=None):
        """``mask`` is the object/pair mask; the ``*_valid`` arrays separate packed scenes."""
        y = residual_ln(
            y,
            lambda h: masked_attention(self.ma, h, z, mask, mask_mode=mask_mode, valid=obj_valid),
            self.ln_ma,
        )
        y = residual_ln(y, self.ffn_obj, self.ln_ffn_obj)
        z = residual_ln(z, lambda h: attention(self.at, h, y, y, valid=rel_valid), self.ln_at)
        z = residual_ln(z, self.ffn_rel, self.ln_ffn_rel)
        return y, z


def or_gat(block: ORGAT, y, z, mask, mask_mode="additive"):
    """Single-scene OR-GAT; scenes without any valid pair pass through unchanged."""
    if not np.asarray(mask).any():
        return T.as_tensor(y), T.as_tensor(z)
    return block(y, z, mask, mask_mode=mask_mode)


class HRGAT(Module):
    def __init__(self, d_rel: int, d_hyper: int, heads: int, ffn_mult: int, rng):
        self.fc_h = LinearLayer(4 * d_rel, d_hyper, rng, "fc_h")
        self.at = AttentionBlock(d_rel, heads, rng, key_dim=d_hyper, name="hr.at")
        self.ln_at = LayerNorm(d_rel)
        self.ffn = FeedForward(d_rel, ffn_mult * d_rel, rng)
        self.ln_ffn = LayerNorm(d_rel)

    def transitive_feature(self, z_ik, z_ki, z_jk, z_kj) -> Tensor:
        return T.relu(self.fc_h(T.concat([z_ik, z_ki, z_jk, z_kj], axis=-1)))

    def __call__(self, z_query, hyper, valid=None) -> Tensor:
        """z_query [Q, d_r] attends over hyper [Q, K, d_h]; ``valid`` [Q, K] marks real mediators."""
        q = T.reshape(z_query, (z_query.shape[0], 1, z_query.shape[1]))
        mask = None if valid is None else np.asarray(valid, bool)[:, None, :]
        q = residual_ln(q, lambda h: attention(self.at, h, hyper, hyper, valid=mask), self.ln_at)
        q = residual_ln(q, self.ffn, self.ln_ffn)
        return T.reshape(q, z_query.shape)


def transitive_feature(block: HRGAT, z_ik, z_ki, z_jk, z_kj, ijk: tuple | None = None) -> Tensor:
    if ijk is not None and len(set(ijk)) != 3:
        raise ContractError(f"hyper-relationship needs three distinct objects, got {ijk}")
    return block.transitive_feature(z_ik, z_ki, z_jk, z_kj)


def hr_gat(block: HRGAT, z_ij, hyper) -> Tensor:
    """Single relationship update from its transitive features [K, d_h]."""
    z_ij = T.as_tensor(z_ij)
    if hyper is None or T.as_tensor(hyper).shape[0] == 0:
        return z_ij
    hyper = T.as_tensor(hyper)
    out = block(T.reshape(z_ij, (1, z_ij.shape[-1])), T.reshape(hyper, (1,) + hyper.shape))
    return T.reshape(out, z_ij.shape)


class RelationshipPredictor(Module):
    def __init__(
        self,
        n_categories: int,
        n_predicates: int,
        d_v: int,
        d_obj: int,
        d_rel: int,
        d_hyper: int,
        heads: int,
        ffn_mult: int,
        n_or_gat: int,
        use_hr_gat: bool,
        emb_init: np.ndarray,
        rng: np.random.Generator,
    ):
        d_emb = emb_init.shape[1]
        self.fc_ro = LinearLayer(d_v + 9 + d_obj + d_emb, d_obj, rng, "fc_ro")
        self.emb_r = Parameter(emb_init.copy(), "emb_r")
        self.fc_v1 = LinearLayer(d_obj, d_rel, rng, "fc_v1")
        self.fc_v2 = LinearLayer(d_obj, d_rel, rng, "fc_v2")
        self.fc_v3 = LinearLayer(2 * d_rel, d_rel, rng, "fc_v3")
        self.or_gats = [ORGAT(d_obj, d_rel, heads, ffn_mult, rng, f"orgat{i}") for i in range(n_or_gat)]
        self.hr_gat = HRGAT(d_rel, d_hyper, heads, ffn_mult, rng) if use_hr_gat else None
        self.head = LinearLayer(d_rel, n_predicates, rng, "pred_head")
        self.freq_bias = Parameter(
            np.full((n_categories + 1, n_categories + 1, n_predicates), math.log(1.0 / n_predicates)),
            "freq_bias",
            trainable=False,
        )

    def init_object_feature(self, visual, spatial, semantic, labels) -> Tensor:
        """relu(FC_ro(v || p || x' || Emb_r(l))) with ``labels`` foreground ids (1-based)."""
        emb = T.take(self.emb_r, np.asarray(labels) - 1)
        return T.relu(self.fc_ro(T.concat([visual, spatial, semantic, emb], axis=-1)))

    def pair_features(self, y, subj, obj, nonself=None) -> Tensor:
        """relu(FC_v3(FC_v1(y_i) || FC_v2(y_j))) for pair rows (subj[r], obj[r])."""
        a = T.take(self.fc_v1(y), subj)
        b = T.take(self.fc_v2(y), obj)
        z = T.relu(self.fc_v3(T.concat([a, b], axis=-1)))
        if nonself is not None and not np.all(nonself):
            z = T.mul(z, np.asarray(nonself, dtype=np.float64)[:, None])
        return z

    def relationship_proposal_feature(self, y_i, y_j) -> Tensor:
        y = T.concat([T.reshape(y_i, (1, -1)), T.reshape(y_j, (1, -1))], axis=0)
        z = self.pair_features(y, np.array([0]), np.array([1]))
        return T.reshape(z, (z.shape[-1],))

    def logits(self, z, subj_labels, obj_labels, use_freq_bias=True) -> Tensor:
        out = self.head(z)
        if use_freq_bias:
            out = T.add(out, self.freq_bias.data[subj_labels, obj_labels])
        return out


# ---------------------------------------------------------------------------
# frequency bias


def frequency_counts(scenes: Iterable[SceneGraph], n_categories: int, n_predicates: int) -> np.ndarray:
    counts = np.zeros((n_categories + 1, n_categories + 1, n_predicates))
    for scene in scenes:
        for s, p, o in scene.triplets:
            counts[scene.categories[s], scene.categories[o], p] += 1
    return counts


def frequency_bias_table(counts: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Laplace-smoothed log predicate prior per (subject, object) category pair."""
    n_pred = counts.shape[-1]
    return np.log((counts + alpha) / (counts.sum(axis=-1, keepdims=True) + alpha * n_pred))


def frequency_bias(table: np.ndarray, subj_category: int, obj_category: int) -> np.ndarray:
    return table[subj_category, obj_category]


# ---------------------------------------------------------------------------
# sampling and loss


@dataclass
class RelationshipBatch:
    pairs: np.ndarray  # flat pair indices, ascending
    positive: np.ndarray
    targets: np.ndarray  # [S, c_p] multi-hot

    def __len__(self):
        return len(self.pairs)


def gt_multi_hot(scene: SceneGraph, n_predicates: int) -> np.ndarray:
    n = scene.n_objects
    out = np.zeros((n * n, n_predicates))
    for s, p, o in scene.triplets:
        out[s * n + o, p] = 1.0
    return out


def sample_relationships(
    scene: SceneGraph,
    rng: np.random.Generator,
    n_predicates: int,
    sample_size: int = 256,
    max_pos_frac: float = 0.25,
) -> RelationshipBatch:
    n = scene.n_objects
    multi_hot = gt_multi_hot(scene, n_predicates)
    flat = np.arange(n * n)
    nonself = flat[flat // n != flat % n]
    is_pos = multi_hot[nonself].any(axis=1)
    pos, neg = nonself[is_pos], nonself[~is_pos]
    n_pos = min(len(pos), math.ceil(max_pos_frac * sample_size))
    if len(nonself) <= sample_size and len(pos) <= n_pos:
        chosen = nonself
    else:
        picked_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
        n_neg = min(len(neg), sample_size - n_pos)
        picked_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
        chosen = np.sort(np.concatenate([picked_pos, picked_neg]))
    targets = multi_hot[chosen]
    return RelationshipBatch(chosen.astype(np.intp), targets.any(axis=1), targets)


def relationship_loss(logits, targets) -> Tensor:
    return T.bce_with_logits(logits, targets)
