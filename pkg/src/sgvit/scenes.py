"""Synthetic relational scenes: sampling, rasterization, relation rules,
augmentation and predicate rebalancing.

Scenes are stored symbolically (one JSON record per line) and rasterized on
load, so datasets are tiny and bit-reproducible.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DatasetError
from .matching import GroundTruth

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
BACKGROUND = 0.1
HALF_EXTENT = {"small": (0.07, 0.085), "large": (0.15, 0.18)}   # ratio > 1.5 only across sizes

PREDICATES = (
    "left of", "right of", "above", "below",
    "inside", "contains", "same color as", "larger than",
)
FLIP_SENSITIVE = frozenset({"left of", "right of", "above", "below", "inside", "contains"})
FLIP_SWAP = {"left of": "right of", "right of": "left of"}

VARIANTS = {
    "full": PREDICATES,
    "spatial": ("left of", "right of", "above", "below", "inside", "contains"),
    "attribute": ("same color as", "larger than"),
    "directional": ("left of", "right of"),
}

MIN_CENTER_DIST = 0.05
SPATIAL_MARGIN = 0.05
INSIDE_MARGIN = 0.01
LARGER_RATIO = 1.5
NEST_PROB = 0.5
OBJECT_RANGE = (2, 5)


def category_names() -> list[str]:
    return [f"{c} {s}" for c in COLORS for s in SHAPES]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cx: float
    cy: float
    hx: float
    hy: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx - self.hx, self.cy - self.hy, self.cx + self.hx, self.cy + self.hy)

    @property
    def area(self) -> float:
        return 4.0 * self.hx * self.hy

    @property
    def category(self) -> str:
        return f"{self.color} {self.shape}"

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size,
                "cx": self.cx, "cy": self.cy, "hx": self.hx, "hy": self.hy}


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int = 0


@dataclass
class AnnotatedExample:
    spec: SceneSpec
    gt: GroundTruth
    side: int = 64
    _image: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = rasterize(self.spec, self.side)
        return self._image


# -- sampling -------------------------------------------------------------------

def _zipf(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def _overlap_area(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0.0) * max(h, 0.0)


def _acceptable(cand: SceneObject, placed: Sequence[SceneObject]) -> bool:
    for other in placed:
        if np.hypot(cand.cx - other.cx, cand.cy - other.cy) < MIN_CENTER_DIST:
            return False
        inter = _overlap_area(cand.box, other.box)
        if inter > 0 and cand.color == other.color:
            return False     # same-coloured overlap would hide the boundary
        ratio = max(cand.area, other.area) / min(cand.area, other.area)
        if ratio < LARGER_RATIO and inter > 0.25 * min(cand.area, other.area):
            return False     # similar sizes overlapping heavily: one gets hidden
    return True


def sample_scene(seed: int, skew: float = 0.0, n_range: tuple[int, int] = OBJECT_RANGE) -> SceneSpec:
    """Deterministic scene from ``seed``; attributes follow Zipf(skew) weights."""
    if skew < 0:
        raise ContractError("skew must be non-negative")
    rng = np.random.default_rng(seed)
    shape_w, color_w, size_w = _zipf(len(SHAPES), skew), _zipf(len(COLORS), skew), _zipf(len(SIZES), skew)
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        sizes = [SIZES[i] for i in rng.choice(len(SIZES), size=n, p=size_w)]
        sizes.sort(key=SIZES.index, reverse=True)      # large first, so small ones can nest
        placed: list[SceneObject] = []
        for size in sizes:
            for _attempt in range(50):
                h = round(float(rng.uniform(*HALF_EXTENT[size])), 4)
                hosts = [o for o in placed if o.size == "large" and o.hx > h + INSIDE_MARGIN + 0.01]
                if size == "small" and hosts and rng.random() < NEST_PROB:
                    host = hosts[int(rng.integers(len(hosts)))]
                    slack = host.hx - h - INSIDE_MARGIN - 0.005
                    cx = host.cx + float(rng.uniform(-slack, slack))
                    cy = host.cy + float(rng.uniform(-slack, slack))
                else:
                    cx = float(rng.uniform(h, 1.0 - h))
                    cy = float(rng.uniform(h, 1.0 - h))
                cx = min(max(round(cx, 4), h), 1.0 - h)
                cy = min(max(round(cy, 4), h), 1.0 - h)
                cand = SceneObject(
                    shape=SHAPES[rng.choice(len(SHAPES), p=shape_w)],
                    color=COLORS[rng.choice(len(COLORS), p=color_w)],
                    size=size, cx=cx, cy=cy, hx=h, hy=h,
                )
                if _acceptable(cand, placed):
                    placed.append(cand)
                    break
        if len(placed) >= n_range[0]:
            break
    # big first so smaller objects are painted on top and stay visible
    placed.sort(key=lambda o: -o.area)
    return SceneSpec(objects=tuple(placed), seed=seed)


# -- rasterization ----------------------------------------------------------------

def object_mask(obj: SceneObject, side: int) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side
    x, y = np.meshgrid(c, c)                      # x varies along columns
    dx, dy = x - obj.cx, y - obj.cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= obj.hx * obj.hx
    if obj.shape == "square":
        return (np.abs(dx) <= obj.hx) & (np.abs(dy) <= obj.hy)
    if obj.shape == "triangle":
        # apex at the top centre, base along the bottom edge
        t = (y - (obj.cy - obj.hy)) / (2.0 * obj.hy)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= obj.hx * t)
    raise DatasetError(f"unknown shape {obj.shape!r}")


def rasterize(spec: SceneSpec, side: int = 64) -> np.ndarray:
    """Painter's algorithm on pixel centres; later objects cover earlier ones."""
    img = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
    for obj in spec.objects:
        img[object_mask(obj, side)] = COLOR_RGB[obj.color]
    return img


# -- relation rules ---------------------------------------------------------------

def _v_overlap(a: SceneObject, b: SceneObject) -> float:
    return min(a.cy + a.hy, b.cy + b.hy) - max(a.cy - a.hy, b.cy - b.hy)


def _h_overlap(a: SceneObject, b: SceneObject) -> float:
    return min(a.cx + a.hx, b.cx + b.hx) - max(a.cx - a.hx, b.cx - b.hx)


def _inside(a: SceneObject, b: SceneObject) -> bool:
    ax1, ay1, ax2, ay2 = a.box
    bx1, by1, bx2, by2 = b.box
    m = INSIDE_MARGIN
    return ax1 >= bx1 + m and ay1 >= by1 + m and ax2 <= bx2 - m and ay2 <= by2 - m


RULES = {
    "left of": lambda a, b: a.cx + SPATIAL_MARGIN < b.cx and _v_overlap(a, b) >= 0,
    "right of": lambda a, b: b.cx + SPATIAL_MARGIN < a.cx and _v_overlap(a, b) >= 0,
    "above": lambda a, b: a.cy + SPATIAL_MARGIN < b.cy and _h_overlap(a, b) >= 0,
    "below": lambda a, b: b.cy + SPATIAL_MARGIN < a.cy and _h_overlap(a, b) >= 0,
    "inside": _inside,
    "contains": lambda a, b: _inside(b, a),
    "same color as": lambda a, b: a.color == b.color,
    "larger than": lambda a, b: a.area > LARGER_RATIO * b.area,
}


def holds(pred: str, a: SceneObject, b: SceneObject) -> bool:
    try:
        return bool(RULES[pred](a, b))
    except KeyError:
        raise DatasetError(f"unknown predicate {pred!r}") from None


def derive_relations(spec: SceneSpec, predicates: Iterable[str] = PREDICATES) -> GroundTruth:
    """Every (subject, predicate, object) that the rules make true, in (i, j, predicate) order."""
    preds = [p for p in PREDICATES if p in set(predicates)]
    objs = spec.objects
    triplets = [(i, p, j) for i, a in enumerate(objs) for j, b in enumerate(objs)
                if i != j for p in preds if RULES[p](a, b)]
    return GroundTruth(boxes=np.array([o.box for o in objs]).reshape(-1, 4),
                       categories=[o.category for o in objs], triplets=triplets)


def make_example(spec: SceneSpec, predicates: Iterable[str] = PREDICATES, side: int = 64) -> AnnotatedExample:
    return AnnotatedExample(spec=spec, gt=derive_relations(spec, predicates), side=side)


def validate_example(ex: AnnotatedExample) -> None:
    """Re-check every stored triplet against the rules on the stored geometry."""
    objs = ex.spec.objects
    for s, p, o in ex.gt.triplets:
        if not holds(p, objs[s], objs[o]):
            raise DatasetError(f"scene {ex.spec.seed}: triplet ({s}, {p!r}, {o}) does not hold")


# -- augmentation -----------------------------------------------------------------

def _transform(spec: SceneSpec, scale: float, flip: bool) -> SceneSpec:
    objs = []
    for o in spec.objects:
        cx, cy, hx, hy = o.cx * scale, o.cy * scale, o.hx * scale, o.hy * scale
        if flip:
            cx = 1.0 - cx
        objs.append(replace(o, cx=cx, cy=cy, hx=hx, hy=hy))
    return SceneSpec(objects=tuple(objs), seed=spec.seed)


def augment(ex: AnnotatedExample, rng: np.random.Generator, resize: bool = True,
            flip: bool = True) -> AnnotatedExample:
    """Random resize in [0.5, 1] (top-left anchored, background padding) and a
    gated horizontal flip.

    Flipping is skipped whenever a flip-sensitive predicate is labelled.
    Triplets that no longer satisfy their rule after resizing (margins shrink
    with the scene) are dropped; none are added.
    """
    scale = float(rng.uniform(0.5, 1.0)) if resize else 1.0
    sensitive = any(p in FLIP_SENSITIVE for _, p, _ in ex.gt.triplets)
    do_flip = flip and not sensitive and rng.random() < 0.5
    if scale == 1.0 and not do_flip:
        return ex
    spec = _transform(ex.spec, scale, do_flip)
    triplets = [(s, FLIP_SWAP.get(p, p) if do_flip else p, o) for s, p, o in ex.gt.triplets]
    triplets = [(s, p, o) for s, p, o in triplets if holds(p, spec.objects[s], spec.objects[o])]
    gt = GroundTruth(boxes=np.array([o.box for o in spec.objects]).reshape(-1, 4),
                     categories=list(ex.gt.categories), triplets=triplets)
    return AnnotatedExample(spec=spec, gt=gt, side=ex.side)


# -- rebalancing ------------------------------------------------------------------

def predicate_frequencies(examples: Sequence[AnnotatedExample]) -> dict[str, float]:
    counts = Counter(p for ex in examples for _, p, _ in ex.gt.triplets)
    total = sum(counts.values())
    if total == 0:
        raise ContractError("cannot compute predicate frequencies of an empty corpus")
    return {p: c / total for p, c in sorted(counts.items())}


def rebalance_example(ex: AnnotatedExample, freqs: dict[str, float], rng: np.random.Generator,
                      cap: float = 0.95) -> AnnotatedExample:
    keep = [t for t in ex.gt.triplets if rng.random() >= min(freqs.get(t[1], 0.0), cap)]
    gt = GroundTruth(boxes=ex.gt.boxes, categories=list(ex.gt.categories), triplets=keep)
    return AnnotatedExample(spec=ex.spec, gt=gt, side=ex.side, _image=ex._image)


def rebalance(examples: Sequence[AnnotatedExample], rng: np.random.Generator,
              cap: float = 0.95, freqs: dict[str, float] | None = None) -> list[AnnotatedExample]:
    """Drop each triplet with probability min(freq(predicate), cap); boxes are untouched."""
    if len(examples) == 0:
        raise ContractError("rebalance needs a non-empty corpus")
    freqs = predicate_frequencies(examples) if freqs is None else freqs
    return [rebalance_example(ex, freqs, rng, cap) for ex in examples]


# -- dataset files ----------------------------------------------------------------

def example_to_record(ex: AnnotatedExample) -> dict:
    return {
        "seed": ex.spec.seed,
        "objects": [o.to_dict() for o in ex.spec.objects],
        "triplets": [[s, p, o] for s, p, o in ex.gt.triplets],
    }


def record_to_example(rec: dict, side: int = 64) -> AnnotatedExample:
    try:
        objs = tuple(SceneObject(**o) for o in rec["objects"])
        spec = SceneSpec(objects=objs, seed=int(rec["seed"]))
        gt = GroundTruth(boxes=np.array([o.box for o in objs]).reshape(-1, 4),
                         categories=[o.category for o in objs],
                         triplets=[tuple(t) for t in rec["triplets"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed record: {exc}") from None
    for o in objs:
        if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES:
            raise DatasetError(f"unknown attribute in {o}")
    return AnnotatedExample(spec=spec, gt=gt, side=side)


def write_dataset(path, examples: Iterable[AnnotatedExample]) -> None:
    lines = [json.dumps(example_to_record(ex), sort_keys=True, separators=(",", ":")) for ex in examples]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_dataset(path, side: int = 64, validate: bool = True) -> list[AnnotatedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ex = record_to_example(json.loads(line), side)
                if validate:
                    validate_example(ex)
            except (json.JSONDecodeError, DatasetError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            out.append(ex)
    return out


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 5000
    seed: int = 0
    skew: float = 0.0
    variant: str = "full"
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def split_sizes(self) -> dict[str, int]:
        n_val = int(round(self.scenes * self.val_fraction))
        n_test = int(round(self.scenes * self.test_fraction))
        return {"train": self.scenes - n_val - n_test, "val": n_val, "test": n_test}


SPLIT_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}


def generate_split(cfg: DataConfig, split: str) -> list[AnnotatedExample]:
    """Scenes of one split; seeds come from a range disjoint from the other splits."""
    if cfg.variant not in VARIANTS:
        raise ContractError(f"unknown dataset variant {cfg.variant!r}")
    n = cfg.split_sizes()[split]
    base = cfg.seed * 100_000_000 + SPLIT_OFFSETS[split]
    preds = VARIANTS[cfg.variant]
    return [make_example(sample_scene(base + i, cfg.skew), preds) for i in range(n)]


def write_dataset_dir(cfg: DataConfig, out_dir) -> dict[str, float]:
    """Write train/val/test JSONL files plus ``meta.json``; returns train predicate frequencies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {name: generate_split(cfg, name) for name in ("train", "val", "test")}
    for name, exs in splits.items():
        write_dataset(out / f"{name}.jsonl", exs)
    every = [ex for exs in splits.values() for ex in exs]
    freqs = predicate_frequencies(every) if any(ex.gt.triplets for ex in every) else {}
    meta = {"config": asdict(cfg), "predicates": list(VARIANTS[cfg.variant]),
            "frequencies": freqs, "counts": {k: len(v) for k, v in splits.items()}}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return freqs
