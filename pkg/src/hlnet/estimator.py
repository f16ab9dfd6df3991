"""scikit-learn style wrapper around the training and inference pipeline."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import MetricsReport, TripletPrediction, evaluate, rank_triplets
from .exceptions import ContractError
from .hypergraph import SceneGraph
from .model import PredicateScores, predict_scores
from .relationship import frequency_counts
from .scenes import DatasetConfig, Detections, detector_rng, predicate_statistics, simulate_detector
from .training import RunConfig, build_model, train


def check_scene_graphs(scenes, n_categories: int | None = None, n_predicates: int | None = None,
                       min_scenes: int = 1) -> list[SceneGraph]:
    """Validate a sequence of scenes and return it as a list."""
    if isinstance(scenes, SceneGraph):
        raise TypeError("expected a sequence of SceneGraph, got a single SceneGraph")
    scenes = list(scenes)
    if len(scenes) < min_scenes:
        raise ValueError(f"need at least {min_scenes} scene(s), got {len(scenes)}")
    for k, s in enumerate(scenes):
        if not isinstance(s, SceneGraph):
            raise TypeError(f"item {k} is {type(s).__name__}, not SceneGraph")
        s.validate(n_predicates)
        if n_categories is not None and any(not 1 <= c <= n_categories for c in s.categories):
            raise ValueError(f"scene {s.image.scene_id!r}: category outside 1..{n_categories}")
    return scenes


class SceneGraphGenerator(BaseEstimator):
    """Train on labelled scenes, then predict ranked relationship triplets.

    Hyperparameters mirror :class:`~hlnet.training.RunConfig`; the simulated
    detector settings come from ``data_config``. Detections for a scene are
    a pure function of its id and ``data_config.seed``, so repeated calls to
    ``predict`` agree exactly.
    """

    def __init__(
        self,
        preset: str = "hln",
        dim: int = 64,
        heads: int = 8,
        n_transformer_layers: int | None = None,
        n_or_gat: int | None = None,
        use_hr_gat: bool | None = None,
        use_freq_bias: bool = True,
        mask_mode: str = "additive",
        base_lr: float = 0.05,
        warmup_steps: int = 900,
        milestones: tuple = (3600, 5100),
        total_steps: int = 6000,
        batch_size: int = 12,
        grad_clip: float = 5.0,
        mode: str = "sgdet",
        seed: int = 0,
        data_config: DatasetConfig | None = None,
    ):
        self.preset = preset
        self.dim = dim
        self.heads = heads
        self.n_transformer_layers = n_transformer_layers
        self.n_or_gat = n_or_gat
        self.use_hr_gat = use_hr_gat
        self.use_freq_bias = use_freq_bias
        self.mask_mode = mask_mode
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.milestones = milestones
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.mode = mode
        self.seed = seed
        self.data_config = data_config

    def run_config(self) -> RunConfig:
        data = self._data()
        return RunConfig(
            preset=self.preset, dim=self.dim, heads=self.heads, d_emb=data.d_emb,
            n_transformer_layers=self.n_transformer_layers, n_or_gat=self.n_or_gat,
            use_hr_gat=self.use_hr_gat, use_freq_bias=self.use_freq_bias, mask_mode=self.mask_mode,
            base_lr=self.base_lr, warmup_steps=self.warmup_steps, milestones=tuple(self.milestones),
            total_steps=self.total_steps, batch_size=self.batch_size, grad_clip=self.grad_clip,
            mode=self.mode, seed=self.seed,
        ).validate()

    def _data(self) -> DatasetConfig:
        return self.data_config if self.data_config is not None else DatasetConfig()

    def fit(self, scenes: Sequence[SceneGraph], y=None, log=None):
        data = self._data().validate()
        scenes = check_scene_graphs(scenes, data.n_categories, data.n_predicates)
        run = self.run_config()
        self.model_ = build_model(run, data, scenes)
        self.train_counts_ = np.array(list(predicate_statistics(scenes, data).values()))
        self.frequency_counts_ = frequency_counts(scenes, data.n_categories, data.n_predicates)
        train(self.model_, scenes, data, run, log=log)
        self.n_iter_ = run.total_steps
        return self

    def detect(self, scenes: Sequence[SceneGraph]) -> list[Detections]:
        data = self._data()
        exact = self.mode == "precls"
        return [simulate_detector(s, detector_rng(data, s), data, exact=exact) for s in scenes]

    def predict_scores(self, scenes: Sequence[SceneGraph]) -> list[PredicateScores]:
        check_is_fitted(self, "model_")
        scenes = check_scene_graphs(scenes, min_scenes=0)
        precls = self.mode == "precls"
        return predict_scores(self.model_, self.detect(scenes), scenes if precls else None, use_gt_labels=precls)

    def predict(self, scenes: Sequence[SceneGraph], top_k: int | None = 100,
                constraint: bool = True) -> list[list[TripletPrediction]]:
        """Ranked triplets per scene, best first."""
        if top_k is not None and top_k < 1:
            raise ContractError("top_k must be >= 1")
        return [rank_triplets(s, constraint, top_k) for s in self.predict_scores(scenes)]

    def evaluate(self, scenes: Sequence[SceneGraph]) -> MetricsReport:
        data = self._data()
        return evaluate(self.predict_scores(scenes), list(scenes), data.predicates, self.mode, self.train_counts_)

    def score(self, scenes: Sequence[SceneGraph], y=None) -> float:
        """Mean of mR@50, mR@100, R@50 and R@100 with the graph constraint."""
        return self.evaluate(scenes).with_constraint["mean"]
