"""Deterministic synthetic scene benchmark and simulated object detector.

Scenes are built from a ground strip plus a row of slots, each holding a
small structure (a host resting on its parts, a hovering host, a stack, ...).
Geometric predicates are pure functions of the boxes; ``resting_on`` is
only derivable through a mediating part, so the host's own box never
gives it away.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .exceptions import ConfigError, DatasetParseError
from .hypergraph import Box, ImageMeta, ObjectProposal, SceneGraph, spatial_feature

CATEGORIES = ("floor", "road", "shelf", "cart", "table", "wheel", "leg", "box", "ball", "lamp")
PREDICATES = ("on", "above", "left_of", "right_of", "inside", "part_of", "supports", "resting_on")
HOST_PARTS = {"cart": "wheel", "table": "leg"}

ON_TOL = 1.0
ABOVE_GAP = 30.0
NEAR_GAP = 30.0

STRUCTURES = ("rest", "hover", "rest_box", "stack", "shelf", "free")
STRUCTURE_WEIGHTS = (0.3, 0.2, 0.15, 0.15, 0.1, 0.1)
# (min, max) objects per structure
STRUCTURE_SIZES = {
    "rest": (2, 3),
    "hover": (2, 3),
    "rest_box": (3, 3),
    "stack": (1, 2),
    "shelf": (2, 2),
    "free": (1, 1),
}
MIN_SLOT_WIDTH = 60.0


@dataclass
class DatasetConfig:
    seed: int = 0
    n_scenes: int = 1000
    n_min: int = 4
    n_max: int = 10
    width: float = 320.0
    height: float = 240.0
    categories: tuple = CATEGORIES
    predicates: tuple = PREDICATES
    sigma_v: float = 0.5
    tau: float = 0.25
    label_noise: float = 1.0
    jitter: float = 0.01
    d_v: int = 64
    d_emb: int = 200
    split: tuple = (0.70, 0.05, 0.25)

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.predicates = tuple(self.predicates)
        self.split = tuple(self.split)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    def category_id(self, name: str) -> int:
        """Foreground ids start at 1; 0 is background."""
        return self.categories.index(name) + 1

    def predicate_id(self, name: str) -> int:
        return self.predicates.index(name)

    def validate(self) -> "DatasetConfig":
        if self.n_min < 2 or self.n_max < self.n_min:
            raise ConfigError(f"need 2 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if not self.categories or not self.predicates:
            raise ConfigError("vocabularies must be non-empty")
        has_rest = "resting_on" in self.predicates
        if has_rest != ("part_of" in self.predicates and "on" in self.predicates):
            raise ConfigError("resting_on requires exactly part_of and on to be present")
        missing = set(CATEGORIES) - set(self.categories)
        if missing:
            raise ConfigError(f"generator needs categories {sorted(missing)}")
        if self.width <= 0 or self.height < 160:
            raise ConfigError("canvas too small for the scene layout")
        if self.n_max - 1 > 3 * self.max_slots:
            raise ConfigError(
                f"canvas {self.width:g}px wide holds {self.max_slots} slots; "
                f"n_max={self.n_max} needs more"
            )
        if not 0 <= self.jitter <= 0.02:
            raise ConfigError("box jitter must be within 2% of the canvas")
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ConfigError("split must be three fractions summing to 1")
        return self

    @property
    def max_slots(self) -> int:
        return int((self.width - 4) // MIN_SLOT_WIDTH)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset config keys {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# labelling rules


def _h_overlap(a: Box, b: Box) -> float:
    return min(a.x2, b.x2) - max(a.x1, b.x1)


def _v_overlap(a: Box, b: Box) -> float:
    return min(a.y2, b.y2) - max(a.y1, b.y1)


def is_on(a: Box, c: Box) -> bool:
    return abs(a.y2 - c.y1) <= ON_TOL and a.y1 < c.y1 and _h_overlap(a, c) >= 0.5 * a.width


def is_above(a: Box, c: Box) -> bool:
    return c.y1 - a.y2 > ABOVE_GAP and _h_overlap(a, c) >= 0.5 * a.width


def is_left_of(a: Box, c: Box) -> bool:
    gap = c.x1 - a.x2
    return 0 <= gap <= NEAR_GAP and _v_overlap(a, c) >= 0.5 * min(a.height, c.height)


def is_inside(a: Box, c: Box) -> bool:
    return (
        a.x1 > c.x1 and a.y1 > c.y1 and a.x2 < c.x2 and a.y2 < c.y2 and a.area < 0.5 * c.area
    )


def label_triplets(
    boxes: list[Box], part_links: Iterable[tuple[int, int]], predicates: tuple = PREDICATES
) -> list[tuple[int, int, int]]:
    """All gt triplets for a layout. ``part_links`` holds (part, host) pairs."""
    pid = {name: i for i, name in enumerate(predicates)}
    n = len(boxes)
    found: set[tuple[int, int, int]] = set()

    def put(s, name, o):
        if name in pid:
            found.add((s, pid[name], o))

    on_pairs = set()
    for a in range(n):
        for c in range(n):
            if a == c:
                continue
            ba, bc = boxes[a], boxes[c]
            if is_on(ba, bc):
                on_pairs.add((a, c))
                put(a, "on", c)
                put(c, "supports", a)
            if is_above(ba, bc):
                put(a, "above", c)
            if is_left_of(ba, bc):
                put(a, "left_of", c)
                put(c, "right_of", a)
            if is_inside(ba, bc):
                put(a, "inside", c)
    links = sorted(set(part_links))
    for part, host in links:
        put(part, "part_of", host)
    for part, host in links:
        for b, c in on_pairs:
            if b == part and c != host:
                put(host, "resting_on", c)
    return sorted(found)


# ---------------------------------------------------------------------------
# generation


class _Layout:
    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self.boxes: list[Box] = []
        self.cats: list[int] = []
        self.links: list[tuple[int, int]] = []

    def add(self, name: str, x1, y1, x2, y2) -> int:
        b = Box(*(round(float(v), 2) for v in (x1, y1, x2, y2)))
        self.boxes.append(b.validate())
        self.cats.append(self.cfg.category_id(name))
        return len(self.boxes) - 1


def _choose_structures(rng: np.random.Generator, remaining: int, slots: int) -> list[tuple[str, int]]:
    chosen = []
    weights = np.asarray(STRUCTURE_WEIGHTS)
    while remaining > 0:
        left_after = slots - len(chosen) - 1
        options, probs = [], []
        for name, w in zip(STRUCTURES, weights):
            lo, hi = STRUCTURE_SIZES[name]
            sizes = [s for s in range(lo, hi + 1) if s <= remaining and remaining - s <= 3 * left_after]
            if sizes:
                options.append((name, sizes))
                probs.append(w)
        probs = np.asarray(probs) / np.sum(probs)
        name, sizes = options[rng.choice(len(options), p=probs)]
        size = int(rng.choice(sizes))
        chosen.append((name, size))
        remaining -= size
    return chosen


def _host_with_parts(L: _Layout, rng, x0, x1, base_y, n_parts, lift=0.0):
    """Host whose parts' bottoms sit at ``base_y - lift``; returns the host index."""
    host_name = str(rng.choice(sorted(HOST_PARTS)))
    part_name = HOST_PARTS[host_name]
    slot_w = x1 - x0
    hw = rng.uniform(0.55, 0.85) * slot_w
    hx1 = x0 + rng.uniform(0, slot_w - hw)
    overlap = rng.uniform(2, 4)
    if lift > 0:
        total_gap = rng.uniform(max(10.0, lift + 5.0), 24.0)
        part_h = total_gap - lift + overlap
    else:
        total_gap = rng.uniform(10.0, 22.0)
        part_h = total_gap + overlap
    host_y2 = base_y - total_gap
    host_h = rng.uniform(18, 35)
    host = L.add(host_name, hx1, host_y2 - host_h, hx1 + hw, host_y2)
    part_bottom = base_y - lift
    pw = rng.uniform(6, 12)
    if n_parts == 1:
        anchors = [hx1 + rng.uniform(2, hw - 2 - pw)]
    else:
        anchors = [hx1 + 2, hx1 + hw - 2 - pw]
    for px in anchors:
        part = L.add(part_name, px, part_bottom - part_h, px + pw, part_bottom)
        L.links.append((part, host))
    return host


def _fill_slot(L: _Layout, rng, kind, size, x0, x1, ground_y):
    slot_w = x1 - x0
    if kind == "rest":
        _host_with_parts(L, rng, x0, x1, ground_y, size - 1)
    elif kind == "hover":
        _host_with_parts(L, rng, x0, x1, ground_y, size - 1, lift=rng.uniform(7, 14))
    elif kind == "rest_box":
        bw = rng.uniform(0.7, 0.95) * slot_w
        bx = x0 + rng.uniform(0, slot_w - bw)
        bh = rng.uniform(25, 45)
        L.add("box", bx, ground_y - bh, bx + bw, ground_y)
        _host_with_parts(L, rng, bx, bx + bw, ground_y - bh, 1)
    elif kind == "stack":
        bw = rng.uniform(0.4, 0.8) * slot_w
        bx = x0 + rng.uniform(0, slot_w - bw)
        bh = rng.uniform(25, 50)
        box = L.add("box", bx, ground_y - bh, bx + bw, ground_y)
        if size == 2:
            r = min(rng.uniform(8, 14), bw / 3, bh / 3)
            if rng.random() < 0.5:
                cx = bx + rng.uniform(r, bw - r)
                L.add("ball", cx - r / 2, ground_y - bh - r, cx + r / 2, ground_y - bh)
            else:
                b = L.boxes[box]
                cx = rng.uniform(b.x1 + r, b.x2 - r)
                cy = rng.uniform(b.y1 + r, b.y2 - r)
                L.add("ball", cx - r / 2, cy - r / 2, cx + r / 2, cy + r / 2)
    elif kind == "shelf":
        sw = rng.uniform(0.6, 0.95) * slot_w
        sx = x0 + rng.uniform(0, slot_w - sw)
        sy = rng.uniform(70, 120)
        L.add("shelf", sx, sy, sx + sw, sy + 8)
        item = str(rng.choice(["ball", "box"]))
        iw = rng.uniform(10, min(30, 0.8 * sw))
        ih = rng.uniform(10, 25)
        ix = sx + rng.uniform(0, sw - iw)
        L.add(item, ix, sy - ih, ix + iw, sy)
    elif kind == "free":
        w = rng.uniform(12, 25)
        lx = x0 + rng.uniform(0, slot_w - w)
        ly = rng.uniform(10, 50)
        L.add("lamp", lx, ly, lx + w, ly + rng.uniform(12, 25))
    else:  # pragma: no cover - closed vocabulary
        raise ValueError(kind)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_scene(rng: np.random.Generator, config: DatasetConfig, scene_id: str = "") -> SceneGraph:
    config.validate()
    W, H = config.width, config.height
    n_total = int(rng.integers(config.n_min, config.n_max + 1))
    slots = config.max_slots
    structures = _choose_structures(rng, n_total - 1, slots)
    L = _Layout(config)
    ground_y = rng.uniform(H - 50, H - 35)
    L.add(str(rng.choice(["floor", "road"])), 2, ground_y, W - 2, H - 2)
    k = len(structures)
    slot_w = (W - 4) / k
    for s, (kind, size) in enumerate(structures):
        x0 = 2 + s * slot_w + 2
        _fill_slot(L, rng, kind, size, x0, x0 + slot_w - 4, ground_y)
    # shuffle object order so index carries no structural information
    order = rng.permutation(len(L.boxes))
    inv = np.argsort(order)
    boxes = [L.boxes[i] for i in order]
    cats = [L.cats[i] for i in order]
    links = [(int(inv[p]), int(inv[h])) for p, h in L.links]
    triplets = label_triplets(boxes, links, config.predicates)
    return SceneGraph(ImageMeta(W, H, scene_id), boxes, cats, triplets).validate(config.n_predicates)


def generate_dataset(config: DatasetConfig) -> list[SceneGraph]:
    config.validate()
    return [
        generate_scene(scene_rng(config.seed, i), config, f"scene-{config.seed}-{i:06d}")
        for i in range(config.n_scenes)
    ]


def split_dataset(scenes: list, config: DatasetConfig) -> tuple[list, list, list]:
    """Split by scene index into train/val/test fractions."""
    n = len(scenes)
    n_train = int(round(config.split[0] * n))
    n_val = int(round(config.split[1] * n))
    return scenes[:n_train], scenes[n_train:n_train + n_val], scenes[n_train + n_val:]


# ---------------------------------------------------------------------------
# detector and embedding assets


def embedding_table(n_rows: int, dim: int, seed: int) -> np.ndarray:
    """Seeded unit-norm rows standing in for pretrained word vectors."""
    rng = np.random.default_rng([seed, 0xE3B])
    table = rng.standard_normal((n_rows, dim))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def visual_prototypes(config: DatasetConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x715])
    return rng.standard_normal((config.n_categories + 1, config.d_v))


def detector_rng(config: DatasetConfig, scene: SceneGraph) -> np.random.Generator:
    return np.random.default_rng([config.seed, zlib.crc32(scene.image.scene_id.encode()), 0xDE7])


@dataclass
class Detections:
    """Simulated detector output for one scene, index-aligned with its objects."""

    boxes: np.ndarray
    spatial: np.ndarray
    visual: np.ndarray
    label_probs: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def proposals(self) -> list[ObjectProposal]:
        return [
            ObjectProposal(Box(*map(float, b)), s, v, c)
            for b, s, v, c in zip(self.boxes, self.spatial, self.visual, self.label_probs)
        ]


def simulate_detector(
    scene: SceneGraph,
    rng: np.random.Generator,
    config: DatasetConfig,
    prototypes: np.ndarray | None = None,
    exact: bool = False,
) -> Detections:
    """One proposal per ground-truth object.

    ``exact`` returns the true boxes and one-hot label probabilities (used
    for the ground-truth-objects evaluation mode).
    """
    if prototypes is None:
        prototypes = visual_prototypes(config)
    n = scene.n_objects
    c = config.n_categories + 1
    cats = np.asarray(scene.categories, dtype=int)
    gt = np.array([b.as_tuple() for b in scene.boxes], dtype=float).reshape(n, 4)
    W, H = scene.image.width, scene.image.height
    if exact:
        boxes = gt.copy()
        probs = np.eye(c)[cats]
        visual = prototypes[cats].copy()
    else:
        # capped at 5% of each box's own size so IoU with the truth stays >= 0.67
        size = np.stack([gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]], axis=1)
        scale = np.minimum(np.array([W, H]) * config.jitter, 0.05 * size)
        boxes = gt + rng.uniform(-1, 1, size=(n, 4)) * np.tile(scale, 2)
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, W)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, H)
        boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + 1e-3)
        boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1] + 1e-3)
        logits = np.eye(c)[cats] / config.tau + config.label_noise * rng.standard_normal((n, c))
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        visual = prototypes[cats] + config.sigma_v * rng.standard_normal((n, config.d_v))
    meta = scene.image
    spatial = np.stack([spatial_feature(Box(*map(float, b)), meta) for b in boxes]) if n else np.zeros((0, 9))
    return Detections(boxes, spatial, visual, probs)


# ---------------------------------------------------------------------------
# line-delimited dataset files


def scene_to_record(scene: SceneGraph) -> dict:
    return {
        "image": {"id": scene.image.scene_id, "width": scene.image.width, "height": scene.image.height},
        "objects": [{"box": list(b.as_tuple()), "category": c} for b, c in zip(scene.boxes, scene.categories)],
        "triplets": [list(t) for t in scene.triplets],
    }


def scene_from_record(rec: dict) -> SceneGraph:
    img = rec["image"]
    meta = ImageMeta(float(img["width"]), float(img["height"]), str(img["id"]))
    boxes = [Box(*map(float, o["box"])) for o in rec["objects"]]
    cats = [int(o["category"]) for o in rec["objects"]]
    trips = [tuple(int(v) for v in t) for t in rec["triplets"]]
    if any(len(t) != 3 for t in trips):
        raise ValueError("triplets must have three entries")
    return SceneGraph(meta, boxes, cats, trips).validate()


def dumps_scene(scene: SceneGraph) -> str:
    return json.dumps(scene_to_record(scene), separators=(",", ":"))


def loads_scene(line: str, lineno: int | None = None) -> SceneGraph:
    try:
        return scene_from_record(json.loads(line))
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetParseError(f"malformed scene record: {exc}", line=lineno) from exc


def write_dataset(path, scenes: Iterable[SceneGraph]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")


def read_dataset(path) -> list[SceneGraph]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            scenes.append(loads_scene(line, lineno))
    return scenes


def predicate_statistics(scenes: Iterable[SceneGraph], config: DatasetConfig) -> dict[str, int]:
    counts = dict.fromkeys(config.predicates, 0)
    for scene in scenes:
        for _, p, _ in scene.triplets:
            counts[config.predicates[p]] += 1
    return counts


def write_split_files(out_dir, config: DatasetConfig) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(config)
    paths = {}
    for name, part in zip(("train", "val", "test"), split_dataset(scenes, config)):
        paths[name] = out_dir / f"dataset.{name}"
        write_dataset(paths[name], part)
    cfg_path = out_dir / "dataset.json"
    cfg_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["config"] = cfg_path
    return paths
