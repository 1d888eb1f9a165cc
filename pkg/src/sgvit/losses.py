"""The four-component training loss: classification, L1, gIoU and score loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import corners_tensor, giou_tensor, xyxy_to_cxcywh
from .errors import DatasetError, TrainingError
from .matching import GroundTruth, category_indices, hungarian, matching_cost
from .model import ModelOutput
from .numerics import Tensor, concat, mean, sigmoid_cross_entropy, sigmoid_np, tabs, tsum

log = logging.getLogger(__name__)

COMPONENTS = ("cls", "l1", "giou", "score")


@dataclass
class LossReport:
    cls: Tensor
    l1: Tensor
    giou: Tensor
    score: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {name: float(getattr(self, name).data) for name in COMPONENTS + ("total",)}


@dataclass
class Targets:
    """Per-batch matching results expressed as dense arrays."""

    object_targets: np.ndarray        # (B, M, C_obj) one-hot for matched instances
    predicate_targets: np.ndarray     # (B, k, C_pred) multi-hot
    matched: np.ndarray               # (Q, 2) rows: (image, instance slot)
    matched_boxes: np.ndarray         # (Q, 4) corner form
    matchings: list[dict[int, int]]   # per image: GT index -> instance slot


def _zero() -> Tensor:
    return Tensor(np.zeros(()), _check=False)


def match_image(logits: np.ndarray, boxes: np.ndarray, gt: GroundTruth, object_names) -> dict[int, int]:
    """GT object -> selected instance slot. GT beyond M is dropped with a warning."""
    if len(gt) == 0:
        return {}
    if len(gt) > logits.shape[0]:
        log.warning("%d GT objects but only %d selected instances; %d dropped this step",
                    len(gt), logits.shape[0], len(gt) - logits.shape[0])
    cost = matching_cost(logits, boxes, gt, object_names)
    return {g: i for g, i in hungarian(cost)}


def build_targets(out: ModelOutput, gts: Sequence[GroundTruth], object_names, predicate_names) -> Targets:
    b, m, k = len(gts), out.m, out.k
    obj_t = np.zeros((b, m, len(object_names)))
    pred_t = np.zeros((b, k, len(predicate_names)))
    pred_index = {p: i for i, p in enumerate(predicate_names)}
    matched, matched_boxes, matchings = [], [], []
    for bi, gt in enumerate(gts):
        mt = match_image(out.object_logits.data[bi], out.boxes.data[bi], gt, object_names)
        matchings.append(mt)
        cats = category_indices(gt.categories, object_names)
        for g, slot in sorted(mt.items()):
            obj_t[bi, slot, cats[g]] = 1.0
            matched.append((bi, slot))
            matched_boxes.append(gt.boxes[g])
        pair_slot = {(int(i), int(j)): q for q, (i, j) in enumerate(out.pairs[bi])}
        for s, pred, o in gt.triplets:
            if pred not in pred_index:
                raise DatasetError(f"predicate {pred!r} not in the training query set")
            if s not in mt or o not in mt:
                continue
            q = pair_slot.get((int(out.instances[bi, mt[s]]), int(out.instances[bi, mt[o]])))
            if q is not None:                 # unselected pairs contribute nothing
                pred_t[bi, q, pred_index[pred]] = 1.0
    return Targets(obj_t, pred_t, np.array(matched, dtype=np.int64).reshape(-1, 2),
                   np.array(matched_boxes, dtype=np.float64).reshape(-1, 4), matchings)


def class_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sigmoid CE summed over classes, averaged over entities."""
    n_entities = int(np.prod(logits.shape[:-1]))
    if n_entities == 0:
        return _zero()
    return tsum(sigmoid_cross_entropy(logits, targets)) * (1.0 / n_entities)


def detection_loss(out: ModelOutput, targets: Targets) -> tuple[Tensor, Tensor, Tensor]:
    cls = class_loss(out.object_logits, targets.object_targets)
    if len(targets.matched) == 0:
        return cls, _zero(), _zero()
    pred = out.boxes[targets.matched[:, 0], targets.matched[:, 1]]           # (Q, 4) cxcywh
    q = len(targets.matched)
    l1 = tsum(tabs(pred - Tensor(xyxy_to_cxcywh(targets.matched_boxes), _check=False))) * (1.0 / q)
    g = mean(1.0 - giou_tensor(corners_tensor(pred), targets.matched_boxes))
    return cls, l1, g


def relationship_class_loss(out: ModelOutput, targets: Targets) -> Tensor:
    return class_loss(out.predicate_logits, targets.predicate_targets)


def score_targets(out: ModelOutput) -> np.ndarray:
    """Detached max class probability of every selected embedding, (B, M + k)."""
    obj = sigmoid_np(out.object_logits.data).max(axis=-1)
    if out.k == 0:
        return obj
    pred = sigmoid_np(out.predicate_logits.data).max(axis=-1)
    return np.concatenate([obj, pred], axis=1)


def score_loss(out: ModelOutput) -> Tensor:
    p = concat([out.instance_scores, out.pair_scores], axis=1) if out.k else out.instance_scores
    return mean(sigmoid_cross_entropy(p, score_targets(out)))


def total_loss(cls: Tensor, l1: Tensor, giou: Tensor, score: Tensor) -> LossReport:
    for name, t in zip(COMPONENTS, (cls, l1, giou, score)):
        if not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite {name} loss: {float(t.data)}")
    return LossReport(cls=cls, l1=l1, giou=giou, score=score, total=cls + l1 + giou + score)


def compute_losses(out: ModelOutput, gts: Sequence[GroundTruth], object_names,
                   predicate_names) -> tuple[LossReport, Targets]:
    targets = build_targets(out, gts, object_names, predicate_names)
    det_cls, l1, g = detection_loss(out, targets)
    rel_cls = relationship_class_loss(out, targets)
    return total_loss(det_cls + rel_cls, l1, g, score_loss(out)), targets
