"""Ground-truth records, optimal assignment and the DETR-style matching cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import cxcywh_to_xyxy, giou_matrix, xyxy_to_cxcywh
from .errors import ContractError, DatasetError
from .numerics import sigmoid_np


@dataclass
class GroundTruth:
    """Objects (corner boxes + category strings) and (subject, predicate, object) triplets."""

    boxes: np.ndarray                                   # (G, 4) x1, y1, x2, y2 in [0, 1]
    categories: list[str]
    triplets: list[tuple[int, str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.categories) != len(self.boxes):
            raise DatasetError("one category per box required")
        if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
            raise DatasetError("boxes must satisfy x1 < x2 and y1 < y2")
        if np.any(self.boxes < 0) or np.any(self.boxes > 1):
            raise DatasetError("boxes must lie in [0, 1]")
        n = len(self.boxes)
        for s, pred, o in self.triplets:
            if not (0 <= s < n and 0 <= o < n) or s == o:
                raise DatasetError(f"bad triplet ({s}, {pred!r}, {o}) for {n} objects")
        self.triplets = [(int(s), str(p), int(o)) for s, p, o in self.triplets]

    def __len__(self) -> int:
        return len(self.boxes)


# -- optimal assignment ---------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian for n <= m. Returns (row->col, u, v)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used[1:]) + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            j1 = free[np.argmin(minv[free])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows, u[1:], v[1:]


def _value(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    rows, _, _ = _solve(cost)
    return float(sum(cost[r, c] for r, c in enumerate(rows)))


def _lexicographic(cost: np.ndarray, optimum: float, tol: float) -> np.ndarray:
    """Smallest column sequence (row order) among assignments within ``tol`` of the optimum."""
    n, m = cost.shape
    rows = np.full(n, -1, dtype=np.int64)
    free_cols = list(range(m))
    acc = 0.0
    for r in range(n):
        for c in free_cols:
            rest = [x for x in free_cols if x != c]
            sub = _value(cost[np.ix_(range(r + 1, n), rest)]) if r + 1 < n else 0.0
            if acc + cost[r, c] + sub <= optimum + tol:
                rows[r] = c
                acc += cost[r, c]
                free_cols.remove(c)
                break
    return rows


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n, m) (row, col) pairs, sorted by row.

    Among equal-cost optima the lexicographically smallest one is returned
    (column sequence by row; for tall matrices, row sequence by column).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    rows, u, v = _solve(c)
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    if np.count_nonzero(reduced <= tol) > c.shape[0]:
        # more than one tight edge in some row: an equal-cost optimum may exist
        optimum = float(sum(c[r, col] for r, col in enumerate(rows)))
        rows = _lexicographic(c, optimum, tol * c.shape[0])
    pairs = [(int(r), int(col)) for r, col in enumerate(rows)]
    if transposed:
        pairs = sorted((col, r) for r, col in pairs)
    return pairs


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in sorted(pairs)))


# -- matching cost --------------------------------------------------------------

def category_indices(categories, class_names) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(class_names)}
    try:
        return np.array([lookup[c] for c in categories], dtype=np.int64)
    except KeyError as exc:
        raise DatasetError(f"category {exc.args[0]!r} not in the training query set") from None


def matching_cost(instance_logits: np.ndarray, instance_boxes: np.ndarray, gt: GroundTruth,
                  class_names) -> np.ndarray:
    """(G, M) cost: [1 - p(class)] + L1 on (cx, cy, w, h) + [1 - gIoU], unit weights."""
    logits = np.asarray(instance_logits, dtype=np.float64)
    boxes = np.asarray(instance_boxes, dtype=np.float64)
    cats = category_indices(gt.categories, class_names)
    cls = 1.0 - sigmoid_np(logits[:, cats]).T
    gt_c = xyxy_to_cxcywh(gt.boxes)
    l1 = np.abs(gt_c[:, None, :] - boxes[None, :, :]).sum(-1)
    g = giou_matrix(gt.boxes, cxcywh_to_xyxy(boxes))
    return cls + l1 + (1.0 - g)
