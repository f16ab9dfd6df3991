"""Scene hypergraph value types and index/geometry helpers.

Relationship tensors use an N*N row layout: pair (i, j) lives at row
``i * N + j``. Self pairs occupy rows but are never proposals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ContractError, InvalidGeometryError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "Box":
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidGeometryError(f"non-finite box {coords}")
        if min(coords) < 0:
            raise InvalidGeometryError(f"negative coordinate in {coords}")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise InvalidGeometryError(f"degenerate box {coords}")
        return self

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ImageMeta:
    width: float
    height: float
    scene_id: str = ""

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise InvalidGeometryError(f"image size must be positive, got {self.width}x{self.height}")


@dataclass
class ObjectProposal:
    box: Box
    spatial: np.ndarray
    visual: np.ndarray
    label_probs: np.ndarray


@dataclass(frozen=True)
class DetectedObject:
    proposal: int
    category: int
    semantic: np.ndarray = field(compare=False, repr=False)

    def one_hot(self, n_categories: int) -> np.ndarray:
        """One-hot over ``n_categories`` foreground classes (ids 1..n)."""
        if not 1 <= self.category <= n_categories:
            raise ContractError(f"category {self.category} is not foreground")
        v = np.zeros(n_categories)
        v[self.category - 1] = 1.0
        return v


class RelationshipProposal(NamedTuple):
    subject: int
    object: int
    flat: int


class HyperRelationship(NamedTuple):
    i: int
    j: int
    k: int

    def edges(self) -> tuple[tuple[int, int], ...]:
        """The six directed pairs of the hyper-relationship, (i,j) first."""
        i, j, k = self
        return ((i, j), (j, i), (i, k), (k, i), (j, k), (k, j))


@dataclass
class SceneGraph:
    image: ImageMeta
    boxes: list[Box]
    categories: list[int]
    triplets: list[tuple[int, int, int]]

    def __post_init__(self):
        if len(self.boxes) != len(self.categories):
            raise ContractError("boxes and categories differ in length")

    @property
    def n_objects(self) -> int:
        return len(self.boxes)

    def validate(self, n_predicates: int | None = None) -> "SceneGraph":
        n = self.n_objects
        for b in self.boxes:
            b.validate()
        seen = set()
        for s, p, o in self.triplets:
            if not (0 <= s < n and 0 <= o < n):
                raise ContractError(f"triplet ({s},{p},{o}) indexes outside {n} objects")
            if s == o:
                raise ContractError(f"self-relationship ({s},{p},{o})")
            if p < 0 or (n_predicates is not None and p >= n_predicates):
                raise ContractError(f"predicate id {p} out of range")
            if (s, p, o) in seen:
                raise ContractError(f"duplicate triplet ({s},{p},{o})")
            seen.add((s, p, o))
        return self


def spatial_feature(box: Box, meta: ImageMeta) -> np.ndarray:
    """9-d relative box coordinates, centre and sizes."""
    box.validate()
    w, h = meta.width, meta.height
    x1, y1, x2, y2 = box.as_tuple()
    return np.array(
        [
            x1 / w,
            y1 / h,
            x2 / w,
            y2 / h,
            (x1 + x2) / (2 * w),
            (y1 + y2) / (2 * h),
            (x2 - x1) / w,
            (y2 - y1) / h,
            (x2 - x1) * (y2 - y1) / (w * h),
        ]
    )


def pair_index(i: int, j: int, n: int) -> int:
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pair ({i}, {j}) out of range for {n} objects")
    return i * n + j


def pair_decode(flat: int, n: int) -> tuple[int, int]:
    if not 0 <= flat < n * n:
        raise IndexError(f"flat pair index {flat} out of range for {n} objects")
    return divmod(flat, n)


def enumerate_relationship_proposals(n: int) -> list[RelationshipProposal]:
    return [
        RelationshipProposal(i, j, i * n + j) for i in range(n) for j in range(n) if i != j
    ]


def mediators(i: int, j: int, n: int, include_endpoints: bool = False) -> list[int]:
    """Candidate mediating objects for pair (i, j), ascending.

    ``include_endpoints`` keeps k = i and k = j, giving all N rows.
    """
    if i == j:
        raise ContractError("mediators need i != j")
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pair ({i}, {j}) out of range for {n} objects")
    if include_endpoints:
        return list(range(n))
    return [k for k in range(n) if k != i and k != j]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays [n, 4] and [m, 4]."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)
