"""Training loop: SGD with momentum, linear warm-up then step decay."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, NonFiniteError
from .hypergraph import SceneGraph
from .model import PRESETS, HlnConfig, HlnModel, forward, pack
from .relationship import frequency_bias_table, frequency_counts, relationship_loss, sample_relationships
from .classifier import object_loss
from .scenes import DatasetConfig, simulate_detector, visual_prototypes

MOMENTUM_PREFIX = "optim.momentum."
STEP_KEY = "train.step"


@dataclass
class RunConfig:
    """Flat run configuration; ``None`` layer settings defer to the preset."""

    preset: str = "hln"
    dim: int = 64
    heads: int = 8
    ffn_mult: int = 2
    d_emb: int = 200
    n_transformer_layers: int | None = None
    n_or_gat: int | None = None
    use_hr_gat: bool | None = None
    use_freq_bias: bool = True
    mask_mode: str = "additive"
    include_endpoint_mediators: bool = False
    sample_size: int = 256
    max_pos_frac: float = 0.25
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    warmup_steps: int = 900
    milestones: tuple = (3600, 5100)
    decay: float = 0.1
    total_steps: int = 6000
    batch_size: int = 12
    eval_every: int = 0
    seed: int = 0
    mode: str = "sgdet"
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("decay milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.total_steps:
            raise ConfigError("decay milestones must precede the final step")
        if self.batch_size < 1 or self.total_steps < 1 or self.warmup_steps < 0:
            raise ConfigError("batch_size and total_steps must be >= 1, warmup_steps >= 0")
        if self.mode not in ("sgdet", "precls"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self.model_config()
        return self

    def model_config(self) -> HlnConfig:
        overrides = {
            k: getattr(self, k)
            for k in ("n_transformer_layers", "n_or_gat", "use_hr_gat")
            if getattr(self, k) is not None
        }
        return HlnConfig.from_preset(
            self.preset,
            dim=self.dim,
            heads=self.heads,
            ffn_mult=self.ffn_mult,
            d_emb=self.d_emb,
            use_freq_bias=self.use_freq_bias,
            mask_mode=self.mask_mode,
            include_endpoint_mediators=self.include_endpoint_mediators,
            sample_size=self.sample_size,
            max_pos_frac=self.max_pos_frac,
            **overrides,
        ).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key/value object")
        return cls.from_dict(data)


def learning_rate(step: int, cfg: RunConfig) -> float:
    """Linear warm-up from 0, then multiply by ``decay`` at each milestone."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    lr = cfg.base_lr
    for m in cfg.milestones:
        if step >= m:
            lr = lr * cfg.decay
    return lr


class SGD:
    """Heavy-ball SGD: v = mu * v + g; p -= lr * v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict, lr: float) -> None:
        for p in self.params:
            g = grads[p]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {MOMENTUM_PREFIX + k: v for k, v in self.velocity.items()}

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            key = MOMENTUM_PREFIX + name
            if key in records:
                v[...] = records[key]


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in grads:
            grads[p] = grads[p] * factor
    return norm


def build_model(run: RunConfig, data: DatasetConfig, train_scenes: Sequence[SceneGraph]) -> HlnModel:
    model = HlnModel(run.model_config(), data.n_categories, data.n_predicates, data.d_v, seed=run.seed)
    counts = frequency_counts(train_scenes, data.n_categories, data.n_predicates)
    model.set_frequency_bias(frequency_bias_table(counts))
    return model


def batch_indices(step: int, n_train: int, batch_size: int, seed: int) -> np.ndarray:
    """Scene indices for ``step``: consecutive slices of per-epoch permutations."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n_train)
        perm = np.random.default_rng([seed, epoch, 0xB47]).permutation(n_train)
        take = min(batch_size - len(out), n_train - offset)
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out, dtype=np.intp)


@dataclass
class StepResult:
    step: int
    lr: float
    obj_loss: float
    rel_loss: float
    grad_norm: float

    def log_line(self) -> str:
        return (
            f"step={self.step} lr={self.lr!r} obj_loss={self.obj_loss!r} "
            f"rel_loss={self.rel_loss!r} grad_norm={self.grad_norm!r}"
        )


def compute_losses(model: HlnModel, scenes: Sequence[SceneGraph], data: DatasetConfig, run: RunConfig,
                   rng: np.random.Generator, prototypes: np.ndarray):
    """Forward one training batch; returns (obj_loss, rel_loss) tensors."""
    cfg = model.config
    precls = run.mode == "precls"
    dets = [simulate_detector(s, rng, data, prototypes, exact=precls) for s in scenes]
    batch = pack(dets, list(scenes))
    queries, support, targets = {}, {}, []
    for s in batch.rel_scenes:
        rb = sample_relationships(scenes[s], rng, data.n_predicates, cfg.sample_size, cfg.max_pos_frac)
        queries[s] = rb.pairs
        n = scenes[s].n_objects
        support[s] = np.unique(np.concatenate([rb.pairs // n, rb.pairs % n]))
        targets.append(rb.targets)
    out = forward(model, batch, queries, support, use_gt_labels=precls)
    obj = object_loss(out.obj_logits, batch.gt_categories)
    if out.rel_logits is None:
        return obj, None
    return obj, relationship_loss(out.rel_logits, np.concatenate(targets))


def train(
    model: HlnModel,
    train_scenes: Sequence[SceneGraph],
    data: DatasetConfig,
    run: RunConfig,
    start_step: int = 0,
    stop_step: int | None = None,
    optimizer: SGD | None = None,
    log: Callable[[str], None] | None = None,
    validate: Callable[[int], str] | None = None,
) -> SGD:
    """Run steps ``start_step`` .. ``stop_step`` (default ``run.total_steps``).

    Every step's batch and noise derive from (seed, step) alone, so a run
    resumed from a checkpoint repeats the uninterrupted run exactly.
    """
    run.validate()
    stop = run.total_steps if stop_step is None else stop_step
    opt = optimizer or SGD(model.parameters(), run.momentum, run.weight_decay)
    prototypes = visual_prototypes(data)
    for step in range(start_step, stop):
        result = train_step(model, opt, train_scenes, data, run, step, prototypes)
        if log is not None:
            log(result.log_line())
        if validate is not None and run.eval_every and (step + 1) % run.eval_every == 0:
            line = validate(step + 1)
            if log is not None and line:
                log(line)
    return opt


def train_step(model, opt, train_scenes, data, run, step, prototypes) -> StepResult:
    rng = np.random.default_rng([run.seed, step, 0x57E9])
    idx = batch_indices(step, len(train_scenes), run.batch_size, run.seed)
    scenes = [train_scenes[i] for i in idx]
    try:
        with T.GradientTape() as tape:
            obj, rel = compute_losses(model, scenes, data, run, rng, prototypes)
            loss = obj if rel is None else T.add(obj, rel)
        grads = T.backward(loss, tape, opt.params)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {step}: {exc}", tensor_name=exc.tensor_name, step=step) from exc
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"step {step}: non-finite gradient for {p.name}", tensor_name=p.name, step=step)
    norm = clip_gradients(grads, run.grad_clip)
    lr = learning_rate(step, run)
    opt.step(grads, lr)
    return StepResult(step, lr, obj.item(), 0.0 if rel is None else rel.item(), norm)
