"""Recall-based scene graph metrics: R@K, mR@K and per-predicate recall,
with and without the graph constraint."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .hypergraph import Box, SceneGraph, iou
from .model import PredicateScores

KS = (20, 50, 100)
MEAN_KEYS = ("mR@50", "mR@100", "R@50", "R@100")


class TripletPrediction(NamedTuple):
    subject: int
    object: int
    predicate: int
    score: float
    subject_category: int
    object_category: int
    subject_box: tuple
    object_box: tuple


class GtTriplet(NamedTuple):
    subject: int
    object: int
    predicate: int
    subject_category: int
    object_category: int
    subject_box: tuple
    object_box: tuple


def gt_triplets(scene: SceneGraph) -> list[GtTriplet]:
    return [
        GtTriplet(s, o, p, scene.categories[s], scene.categories[o],
                  scene.boxes[s].as_tuple(), scene.boxes[o].as_tuple())
        for s, p, o in scene.triplets
    ]


def rank_triplets(scores: PredicateScores, constraint: bool, limit: int | None = None) -> list[TripletPrediction]:
    """Rank (pair, predicate) cells by score, descending.

    With the graph constraint only each pair's best predicate survives. Ties
    go to the lower flat pair index, then the lower predicate id.
    """
    n_pairs, n_pred = scores.scores.shape
    if n_pairs == 0:
        return []
    flat = scores.flat
    if constraint:
        pred = np.argmax(scores.scores, axis=1)
        cell_score = scores.scores[np.arange(n_pairs), pred]
        cell_pair = np.arange(n_pairs)
    else:
        cell_pair = np.repeat(np.arange(n_pairs), n_pred)
        pred = np.tile(np.arange(n_pred), n_pairs)
        cell_score = scores.scores.reshape(-1)
    order = np.lexsort((pred, flat[cell_pair], -cell_score))
    if limit is not None:
        order = order[:limit]
    out = []
    for c in order:
        s, o = (int(v) for v in scores.pairs[cell_pair[c]])
        out.append(TripletPrediction(
            s, o, int(pred[c]), float(cell_score[c]),
            int(scores.labels[s]), int(scores.labels[o]),
            tuple(float(v) for v in scores.boxes[s]), tuple(float(v) for v in scores.boxes[o]),
        ))
    return out


def match_triplet(pred: TripletPrediction, gt: GtTriplet, mode: str = "sgdet", iou_thresh: float = 0.5) -> bool:
    if pred.predicate != gt.predicate:
        return False
    if pred.subject_category != gt.subject_category or pred.object_category != gt.object_category:
        return False
    if mode == "precls":
        return pred.subject == gt.subject and pred.object == gt.object
    if mode != "sgdet":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return (
        iou(Box(*pred.subject_box), Box(*gt.subject_box)) >= iou_thresh
        and iou(Box(*pred.object_box), Box(*gt.object_box)) >= iou_thresh
    )


def match_ranks(ranked: Sequence[TripletPrediction], gts: Sequence[GtTriplet], mode: str = "sgdet",
                iou_thresh: float = 0.5) -> np.ndarray:
    """Rank at which each gt triplet is first matched (greedy, one-to-one), or -1.

    Predictions are consumed in rank order; each claims the first still
    unmatched gt it matches, so the matching within the top K is a prefix of
    the matching over the full list.
    """
    ranks = np.full(len(gts), -1, dtype=np.intp)
    for r, p in enumerate(ranked):
        for g, gt in enumerate(gts):
            if ranks[g] < 0 and match_triplet(p, gt, mode, iou_thresh):
                ranks[g] = r
                break
    return ranks


def recall_at_k(ranked: Sequence[TripletPrediction], gts: Sequence[GtTriplet], k: int,
                mode: str = "sgdet") -> float:
    """Per-image recall of the top ``k`` predictions (nan when there is no gt)."""
    if not gts:
        return float("nan")
    ranks = match_ranks(list(ranked)[:k], gts, mode)
    return float(np.sum(ranks >= 0)) / len(gts)


@dataclass
class ImageMatches:
    """Greedy match ranks of one image's gt triplets, plus their predicates."""

    predicates: np.ndarray
    ranks: np.ndarray

    def hits(self, k: int) -> np.ndarray:
        return (self.ranks >= 0) & (self.ranks < k)


def image_matches(scores: PredicateScores, scene: SceneGraph, constraint: bool, mode: str = "sgdet",
                  max_k: int = max(KS)) -> ImageMatches:
    gts = gt_triplets(scene)
    ranked = rank_triplets(scores, constraint, limit=max_k)
    return ImageMatches(np.array([g.predicate for g in gts], dtype=np.intp),
                        match_ranks(ranked, gts, mode))


def mean_recall_over_images(matches: Sequence[ImageMatches], k: int) -> float:
    vals = [m.hits(k).mean() for m in matches if len(m.ranks)]
    return float(np.mean(vals)) if vals else 0.0


def per_predicate_recall(matches: Sequence[ImageMatches], k: int, n_predicates: int) -> np.ndarray:
    """Per-category recall averaged over images containing that category; nan if absent."""
    out = np.full(n_predicates, np.nan)
    for p in range(n_predicates):
        vals = []
        for m in matches:
            sel = m.predicates == p
            if sel.any():
                vals.append(m.hits(k)[sel].mean())
        if vals:
            out[p] = float(np.mean(vals))
    return out


def mean_recall_at_k(matches: Sequence[ImageMatches], k: int, n_predicates: int) -> float:
    per = per_predicate_recall(matches, k, n_predicates)
    present = per[~np.isnan(per)]
    return float(present.mean()) if len(present) else 0.0


@dataclass
class MetricsReport:
    with_constraint: dict
    without_constraint: dict
    per_predicate: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "with_constraint": self.with_constraint,
            "without_constraint": self.without_constraint,
            "per_predicate": self.per_predicate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "metric", "value"])
        for section in ("with_constraint", "without_constraint"):
            for key, value in getattr(self, section).items():
                w.writerow([section, key, repr(value)])
        for row in self.per_predicate:
            value = "absent" if row["recall@100"] is None else repr(row["recall@100"])
            w.writerow(["per_predicate", row["predicate"], value])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(data["with_constraint"], data["without_constraint"], data.get("per_predicate", []))


def _section(matches, n_predicates) -> dict:
    out = {}
    for k in KS:
        out[f"R@{k}"] = mean_recall_over_images(matches, k)
    for k in KS:
        out[f"mR@{k}"] = mean_recall_at_k(matches, k, n_predicates)
    out["mean"] = float(np.mean([out[key] for key in MEAN_KEYS]))
    return out


def per_predicate_report(matches, predicate_names: Sequence[str], train_counts: Sequence[int] | None = None,
                         k: int = 100) -> list[dict]:
    """Per-predicate R@k ordered by training frequency (descending), absent ones marked None."""
    per = per_predicate_recall(matches, k, len(predicate_names))
    counts = np.zeros(len(predicate_names)) if train_counts is None else np.asarray(train_counts)
    order = sorted(range(len(predicate_names)), key=lambda p: (-counts[p], p))
    return [
        {
            "predicate": predicate_names[p],
            "train_count": int(counts[p]),
            f"recall@{k}": None if np.isnan(per[p]) else float(per[p]),
        }
        for p in order
    ]


def evaluate(
    predictions: Sequence[PredicateScores],
    scenes: Sequence[SceneGraph],
    predicate_names: Sequence[str],
    mode: str = "sgdet",
    train_counts: Sequence[int] | None = None,
) -> MetricsReport:
    if len(predictions) != len(scenes):
        raise ValueError("one prediction per scene required")
    n_pred = len(predicate_names)
    with_c = [image_matches(p, s, True, mode) for p, s in zip(predictions, scenes)]
    without_c = [image_matches(p, s, False, mode) for p, s in zip(predictions, scenes)]
    return MetricsReport(
        _section(with_c, n_pred),
        _section(without_c, n_pred),
        per_predicate_report(without_c, predicate_names, train_counts),
    )
