"""Box conversions, IoU and generalized IoU (plain arrays and autodiff)."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .numerics import Tensor, maximum, minimum

# (cx, cy, w, h) @ _TO_CORNERS -> (x1, y1, x2, y2)
_TO_CORNERS = np.array([
    [1.0, 0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [-0.5, 0.0, 0.5, 0.0],
    [0.0, -0.5, 0.0, 0.5],
])


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return b @ _TO_CORNERS


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def area(b: np.ndarray) -> np.ndarray:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def _check_boxes(b: np.ndarray, what: str) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ContractError(f"degenerate {what} box (need x1 < x2 and y1 < y2)")


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check_boxes(a, "first")
    _check_boxes(b, "second")
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    hull_wh = np.maximum(a[:, None, 2:], b[None, :, 2:]) - np.minimum(a[:, None, :2], b[None, :, :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull


def giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes, in [-1, 1]."""
    return float(giou_matrix(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))[0, 0])


def corners_tensor(boxes: Tensor) -> Tensor:
    """Differentiable (cx, cy, w, h) -> (x1, y1, x2, y2) on the last axis."""
    return boxes @ Tensor(_TO_CORNERS, _check=False)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise gIoU between (Q, 4) predicted corner boxes and constant targets."""
    t = Tensor(target, _check=False)
    px1, py1, px2, py2 = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    tx1, ty1, tx2, ty2 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    iw = maximum(minimum(px2, tx2) - maximum(px1, tx1), 0.0)
    ih = maximum(minimum(py2, ty2) - maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    hull = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    return inter / union - (hull - union) / hull
