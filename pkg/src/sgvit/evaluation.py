"""Relationship metrics: Recall@K, mean Recall@K (with and without the graph
constraint), triplet-class mAP with rare/non-rare splits, and class-agnostic
box recall for the detection-only case.

Ranking ties are broken by (-score, subject token, object token, class id).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy, iou_matrix
from .errors import ContractError
from .matching import GroundTruth
from .numerics import no_grad, sigmoid_np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (5, 10, 20)
    iou: float = 0.5
    per_pair_cap: int = 4
    rare_threshold: int = 10
    category_mode: str = "best"        # "best": arg-best categories; "all": every combination
    box_top: int = 10

    def __post_init__(self):
        if not self.ks or any(k <= 0 for k in self.ks) or list(self.ks) != sorted(set(self.ks)):
            raise ContractError(f"K values must be positive and strictly ascending, got {self.ks}")
        if not 0.0 < self.iou < 1.0:
            raise ContractError("IoU threshold must lie in (0, 1)")
        if self.category_mode not in ("best", "all"):
            raise ContractError(f"unknown category mode {self.category_mode!r}")
        if self.per_pair_cap < 1:
            raise ContractError("per-pair cap must be at least 1")


@dataclass
class ImageOutputs:
    """One image's selected-instance and selected-pair outputs as plain arrays."""

    instances: np.ndarray          # (M,) token indices
    pairs: np.ndarray              # (k, 2) token indices
    instance_scores: np.ndarray    # (M,) p_ii logits
    pair_scores: np.ndarray        # (k,) p_ij logits
    object_logits: np.ndarray      # (M, C_obj)
    predicate_logits: np.ndarray   # (k, C_pred)
    boxes: np.ndarray              # (M, 4) cx, cy, w, h


@dataclass(frozen=True)
class TripletPrediction:
    subject: int                   # token index
    object: int
    subject_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    subject_category: str
    object_category: str
    predicate: str
    subject_objectness: float
    subject_score: float
    object_objectness: float
    object_score: float
    pair_score: float
    predicate_score: float
    score: float
    class_id: int = 0

    def sort_key(self):
        return (-self.score, self.subject, self.object, self.class_id)

    def to_record(self) -> dict:
        return asdict(self)


# -- scoring ----------------------------------------------------------------------

def exhaustive_score(img: ImageOutputs, object_names: Sequence[str], predicate_names: Sequence[str],
                     category_mode: str = "best") -> list[TripletPrediction]:
    """Every (pair, predicate) candidate with its six-factor product score, sorted.

    score = sig(p_ii) P(a|r_ii) sig(p_jj) P(b|r_jj) sig(p_ij) P(q|r_ij)
    """
    slot = {int(t): s for s, t in enumerate(img.instances)}
    obj_prob = sigmoid_np(img.object_logits)
    objness = sigmoid_np(img.instance_scores)
    pair_prob = sigmoid_np(img.pair_scores)
    pred_prob = sigmoid_np(img.predicate_logits)
    corners = cxcywh_to_xyxy(img.boxes)
    n_obj, n_pred = len(object_names), len(predicate_names)
    out = []
    for q, (ti, tj) in enumerate(img.pairs):
        si, sj = slot[int(ti)], slot[int(tj)]
        if category_mode == "best":
            cats = [(int(np.argmax(obj_prob[si])), int(np.argmax(obj_prob[sj])))]
        else:
            cats = [(a, b) for a in range(n_obj) for b in range(n_obj)]
        base = objness[si] * objness[sj] * pair_prob[q]
        for a, b in cats:
            ab = base * obj_prob[si, a] * obj_prob[sj, b]
            for c in range(n_pred):
                out.append(TripletPrediction(
                    subject=int(ti), object=int(tj),
                    subject_box=tuple(float(x) for x in corners[si]),
                    object_box=tuple(float(x) for x in corners[sj]),
                    subject_category=object_names[a], object_category=object_names[b],
                    predicate=predicate_names[c],
                    subject_objectness=float(objness[si]), subject_score=float(obj_prob[si, a]),
                    object_objectness=float(objness[sj]), object_score=float(obj_prob[sj, b]),
                    pair_score=float(pair_prob[q]), predicate_score=float(pred_prob[q, c]),
                    score=float(ab * pred_prob[q, c]),
                    class_id=(a * n_obj + b) * n_pred + c,
                ))
    out.sort(key=TripletPrediction.sort_key)
    return out


def apply_graph_constraint(preds: Sequence[TripletPrediction], constrained: bool = True,
                           cap: int = 4) -> list[TripletPrediction]:
    """One triplet per ordered instance pair (or at most ``cap`` when unconstrained).

    ``preds`` must already be sorted; order is preserved.
    """
    limit = 1 if constrained else cap
    seen: dict[tuple[int, int], int] = defaultdict(int)
    kept = []
    for p in preds:
        key = (p.subject, p.object)
        if seen[key] < limit:
            seen[key] += 1
            kept.append(p)
    return kept


# -- recall -----------------------------------------------------------------------

def match_triplets(preds: Sequence[TripletPrediction], gt: GroundTruth, iou: float = 0.5) -> np.ndarray:
    """Greedy one-to-one matching in prediction order; returns a hit flag per GT triplet.

    Among eligible unmatched GT triplets a prediction takes the one with the
    largest subject+object IoU, lower index on ties.
    """
    hit = np.zeros(len(gt.triplets), dtype=bool)
    if not preds or not gt.triplets:
        return hit
    s_iou = iou_matrix(np.array([p.subject_box for p in preds]), gt.boxes)
    o_iou = iou_matrix(np.array([p.object_box for p in preds]), gt.boxes)
    for n, p in enumerate(preds):
        best, best_val = -1, -1.0
        for g, (s, pred, o) in enumerate(gt.triplets):
            if hit[g] or pred != p.predicate:
                continue
            if gt.categories[s] != p.subject_category or gt.categories[o] != p.object_category:
                continue
            if s_iou[n, s] >= iou and o_iou[n, o] >= iou and s_iou[n, s] + o_iou[n, o] > best_val:
                best, best_val = g, s_iou[n, s] + o_iou[n, o]
        if best >= 0:
            hit[best] = True
    return hit


def top_k(preds: Sequence[TripletPrediction], k: int) -> list[TripletPrediction]:
    """The K-budget of a sorted list: every prediction on its first K distinct pairs.

    For a graph-constrained list (one prediction per pair) this is ``preds[:k]``.
    Unconstrained lists keep their extra predicates on those same pairs, so the
    constrained budget is always a subset of the unconstrained one.
    """
    pairs: set[tuple[int, int]] = set()
    out = []
    for p in preds:
        key = (p.subject, p.object)
        if key not in pairs:
            if len(pairs) == k:
                continue
            pairs.add(key)
        out.append(p)
    return out


def recall_at_k(preds: Sequence[TripletPrediction], gt: GroundTruth, k: int,
                iou: float = 0.5) -> tuple[float, bool]:
    """(recall, empty_gt). An image without GT triplets scores 1.0 with the flag set."""
    if not gt.triplets:
        return 1.0, True
    return float(match_triplets(top_k(preds, k), gt, iou).mean()), False


def per_class_recall(preds_per_image: Sequence[Sequence[TripletPrediction]], gts: Sequence[GroundTruth],
                     k: int, iou: float = 0.5) -> dict[str, float]:
    """Per predicate: recall within each image under the shared top-K budget, then
    averaged over the images that contain that predicate."""
    if len(preds_per_image) != len(gts):
        raise ContractError("one prediction list per ground-truth image required")
    per_class: dict[str, list[float]] = defaultdict(list)
    for preds, gt in zip(preds_per_image, gts):
        if not gt.triplets:
            continue
        hit = match_triplets(top_k(preds, k), gt, iou)
        by_pred: dict[str, list[bool]] = defaultdict(list)
        for flag, (_, pred, _) in zip(hit, gt.triplets):
            by_pred[pred].append(bool(flag))
        for pred, flags in by_pred.items():
            per_class[pred].append(sum(flags) / len(flags))
    return {p: math.fsum(v) / len(v) for p, v in sorted(per_class.items())}


def mean_recall_at_k(preds_per_image, gts, k: int, iou: float = 0.5) -> float:
    pc = per_class_recall(preds_per_image, gts, k, iou)
    return math.fsum(pc.values()) / len(pc) if pc else float("nan")


def corpus_recall_at_k(preds_per_image, gts, k: int, iou: float = 0.5) -> float:
    """Mean per-image recall over images that have GT triplets."""
    vals = [r for r, empty in (recall_at_k(p, g, k, iou) for p, g in zip(preds_per_image, gts)) if not empty]
    return math.fsum(vals) / len(vals) if vals else float("nan")


# -- triplet-class average precision -----------------------------------------------

def average_precision(hits: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP for a ranked hit list."""
    if n_gt == 0:
        raise ContractError("AP undefined without ground truth")
    hits = np.asarray(hits, dtype=np.float64)
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def triplet_class(p) -> tuple[str, str, str]:
    return (p.subject_category, p.predicate, p.object_category)


def hico_map(preds_per_image, gts: Sequence[GroundTruth], catalog=None, rare_threshold: int = 10,
             iou: float = 0.5) -> tuple[float, float, float]:
    """(mAP, mAP rare, mAP non-rare) over triplet classes (subject, predicate, object).

    The catalog defaults to every class present in the GT. Classes without GT
    are excluded and logged; an empty split yields NaN.
    """
    gt_index: dict[tuple, list[tuple[int, int]]] = defaultdict(list)
    for img, gt in enumerate(gts):
        for g, (s, pred, o) in enumerate(gt.triplets):
            gt_index[(gt.categories[s], pred, gt.categories[o])].append((img, g))
    catalog = sorted(gt_index) if catalog is None else list(catalog)
    ranked: dict[tuple, list[tuple[float, int, int, TripletPrediction]]] = defaultdict(list)
    for img, preds in enumerate(preds_per_image):
        for n, p in enumerate(preds):
            ranked[triplet_class(p)].append((-p.score, img, n, p))
    aps, rare, nonrare = [], [], []
    for cls in catalog:
        n_gt = len(gt_index.get(cls, []))
        if n_gt == 0:
            log.info("triplet class %s has no ground truth; excluded", cls)
            continue
        used = set()
        hits = []
        for _, img, _, p in sorted(ranked.get(cls, []), key=lambda t: t[:3]):
            gt = gts[img]
            cand = [g for i, g in gt_index[cls] if i == img and (img, g) not in used]
            best, best_val = None, -1.0
            if cand:
                s_iou = iou_matrix(np.array([p.subject_box]), gt.boxes)[0]
                o_iou = iou_matrix(np.array([p.object_box]), gt.boxes)[0]
                for g in cand:
                    s, _, o = gt.triplets[g]
                    if s_iou[s] >= iou and o_iou[o] >= iou and s_iou[s] + o_iou[o] > best_val:
                        best, best_val = g, s_iou[s] + o_iou[o]
            if best is not None:
                used.add((img, best))
            hits.append(best is not None)
        ap = average_precision(hits, n_gt)
        aps.append(ap)
        (rare if n_gt < rare_threshold else nonrare).append(ap)

    def _m(v):
        return math.fsum(v) / len(v) if v else float("nan")

    return _m(aps), _m(rare), _m(nonrare)


# -- detection --------------------------------------------------------------------

def box_recall(outputs: Sequence[ImageOutputs], gts: Sequence[GroundTruth], top: int = 10,
               iou: float = 0.5) -> float:
    """Class-agnostic recall of GT boxes by the ``top`` instances ranked by
    objectness x best class probability, greedy one-to-one in rank order."""
    found = total = 0
    for img, gt in zip(outputs, gts):
        if len(gt) == 0:
            continue
        conf = sigmoid_np(img.instance_scores) * sigmoid_np(img.object_logits).max(axis=-1)
        order = np.lexsort((np.arange(len(conf)), -conf))[:top]
        ious = iou_matrix(cxcywh_to_xyxy(img.boxes[order]), gt.boxes)
        taken = np.zeros(len(gt), dtype=bool)
        for row in ious:
            row = np.where(taken, -1.0, row)
            g = int(np.argmax(row))
            if row[g] >= iou:
                taken[g] = True
        found += int(taken.sum())
        total += len(gt)
    return found / total if total else float("nan")


# -- running a model -------------------------------------------------------------

def run_model(model, images: np.ndarray, object_names, predicate_names, m: int, k: int,
              batch_size: int = 16) -> list[ImageOutputs]:
    """Inference without the autodiff tape; returns per-image outputs."""
    out_list: list[ImageOutputs] = []
    with no_grad():
        oq = model.embed_queries(list(object_names))
        pq = model.embed_queries(list(predicate_names))
        for start in range(0, len(images), batch_size):
            out = model.forward(images[start:start + batch_size], oq, pq, m, k)
            out_list.extend(split_outputs(out))
    return out_list


def split_outputs(out) -> list[ImageOutputs]:
    f64 = lambda t: np.asarray(t.data, dtype=np.float64)  # noqa: E731
    inst_s, pair_s = f64(out.instance_scores), f64(out.pair_scores)
    ol, pl, bx = f64(out.object_logits), f64(out.predicate_logits), f64(out.boxes)
    return [ImageOutputs(out.instances[b].copy(), out.pairs[b].copy(), inst_s[b], pair_s[b],
                         ol[b], pl[b], bx[b]) for b in range(len(out.instances))]


# -- reports ---------------------------------------------------------------------

@dataclass
class EvalReport:
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, metric: str, name: str, value: float) -> None:
        self.metrics.setdefault(metric, {})[name] = float(value)

    def get(self, metric: str, name: str) -> float:
        return self.metrics[metric][name]

    def rows(self) -> list[tuple[str, str, float]]:
        return [(m, n, v) for m in sorted(self.metrics) for n, v in sorted(self.metrics[m].items())]

    def to_json(self) -> str:
        clean = {m: {n: (None if math.isnan(v) else v) for n, v in d.items()}
                 for m, d in sorted(self.metrics.items())}
        return json.dumps(clean, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "name", "value"])
        for m, n, v in self.rows():
            w.writerow([m, n, repr(v)])
        return buf.getvalue()

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        Path(csv_path).write_text(self.to_csv(), encoding="utf-8")


def predictions_for(outputs, object_names, predicate_names, cfg: EvalConfig):
    """(constrained, unconstrained) prediction lists per image."""
    con, unc = [], []
    for img in outputs:
        full = exhaustive_score(img, object_names, predicate_names, cfg.category_mode)
        con.append(apply_graph_constraint(full, True))
        unc.append(apply_graph_constraint(full, False, cfg.per_pair_cap))
    return con, unc


def evaluate_outputs(outputs: Sequence[ImageOutputs], gts: Sequence[GroundTruth], object_names,
                     predicate_names, cfg: EvalConfig = EvalConfig()) -> tuple[EvalReport, list, list]:
    con, unc = predictions_for(outputs, object_names, predicate_names, cfg)
    rep = EvalReport()
    for mode, preds in (("constrained", con), ("unconstrained", unc)):
        for k in cfg.ks:
            rep.add("R@K", f"{mode}@{k}", corpus_recall_at_k(preds, gts, k, cfg.iou))
            pc = per_class_recall(preds, gts, k, cfg.iou)
            rep.add("mR@K", f"{mode}@{k}", math.fsum(pc.values()) / len(pc) if pc else float("nan"))
            for pred, v in pc.items():
                rep.add("class_recall", f"{mode}@{k}/{pred}", v)
    m_all, m_rare, m_non = hico_map(unc, gts, rare_threshold=cfg.rare_threshold, iou=cfg.iou)
    rep.add("mAP", "all", m_all)
    rep.add("mAP", "rare", m_rare)
    rep.add("mAP", "non_rare", m_non)
    rep.add("box_recall", f"top{cfg.box_top}@{cfg.iou}", box_recall(outputs, gts, cfg.box_top, cfg.iou))
    rep.add("count", "images", len(gts))
    rep.add("count", "empty_gt_images", sum(1 for g in gts if not g.triplets))
    rep.add("count", "triplets", sum(len(g.triplets) for g in gts))
    return rep, con, unc


def write_predictions(path, preds_per_image, seeds: Sequence[int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seed, preds in zip(seeds, preds_per_image):
            for p in preds:
                rec = {"image": int(seed), **p.to_record()}
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
