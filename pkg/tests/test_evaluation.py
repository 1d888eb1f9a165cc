import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from sgvit.errors import ContractError
from sgvit.evaluation import (
    EvalConfig,
    EvalReport,
    ImageOutputs,
    TripletPrediction,
    apply_graph_constraint,
    average_precision,
    box_recall,
    corpus_recall_at_k,
    evaluate_outputs,
    exhaustive_score,
    hico_map,
    mean_recall_at_k,
    per_class_recall,
    recall_at_k,
)
from sgvit.matching import GroundTruth

FIXTURES = Path(__file__).parent / "fixtures"
MICRO = sorted(FIXTURES.glob("micro_*.json"))


def _pred(subject=0, object=1, subject_box=(0, 0, 0.5, 0.5), object_box=(0.5, 0.5, 1, 1),
          subject_category="red circle", object_category="blue square", predicate="left of",
          score=0.5, class_id=0):
    return TripletPrediction(
        subject=subject, object=object, subject_box=tuple(subject_box), object_box=tuple(object_box),
        subject_category=subject_category, object_category=object_category, predicate=predicate,
        subject_objectness=1.0, subject_score=1.0, object_objectness=1.0, object_score=1.0,
        pair_score=1.0, predicate_score=score, score=score, class_id=class_id,
    )


def _load(path):
    spec = json.loads(path.read_text())
    gts, preds = [], []
    for img in spec["images"]:
        g = img["gt"]
        gts.append(GroundTruth(g["boxes"], g["categories"], [tuple(t) for t in g["triplets"]]))
        ps = [_pred(class_id=n, **p) for n, p in enumerate(img["predictions"])]
        preds.append(sorted(ps, key=TripletPrediction.sort_key))
    return spec, gts, preds


# brute-force per-class recall, written independently of the library matcher
def _oracle_per_class(preds_per_image, gts, k, iou=0.5):
    def box_iou(a, b):
        w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = w * h
        return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)

    per = defaultdict(list)
    for preds, gt in zip(preds_per_image, gts):
        taken = set()
        budget = []
        for p in preds:
            if (p.subject, p.object) not in budget and len(budget) >= k:
                continue
            if (p.subject, p.object) not in budget:
                budget.append((p.subject, p.object))
            options = []
            for g, (s, pred, o) in enumerate(gt.triplets):
                if g in taken or pred != p.predicate:
                    continue
                if (gt.categories[s], gt.categories[o]) != (p.subject_category, p.object_category):
                    continue
                si, oi = box_iou(p.subject_box, gt.boxes[s]), box_iou(p.object_box, gt.boxes[o])
                if si >= iou and oi >= iou:
                    options.append((-(si + oi), g))
            if options:
                taken.add(min(options)[1])
        classes = {pred for _, pred, _ in gt.triplets}
        for c in classes:
            idx = [g for g, t in enumerate(gt.triplets) if t[1] == c]
            per[c].append(sum(g in taken for g in idx) / len(idx))
    return {c: sum(v) / len(v) for c, v in per.items()}


@pytest.mark.parametrize("path", MICRO, ids=[p.stem for p in MICRO])
def test_micro_corpus_hand_values(path):
    spec, gts, preds = _load(path)
    k = spec["k"]
    for mode, exp in spec["expected"].items():
        ps = [apply_graph_constraint(p, mode == "constrained", 4) for p in preds]
        assert corpus_recall_at_k(ps, gts, k) == pytest.approx(exp["recall"], abs=1e-12)
        pc = per_class_recall(ps, gts, k)
        assert pc == pytest.approx(exp["per_class"], abs=1e-12)
        assert mean_recall_at_k(ps, gts, k) == pytest.approx(exp["mean_recall"], abs=1e-12)
        assert pc == pytest.approx(_oracle_per_class(ps, gts, k), abs=1e-12)


def test_three_micro_corpora_present():
    assert len(MICRO) == 3
    for p in MICRO:
        assert json.loads(p.read_text())["trace"]


def test_recall_examples():
    gt = GroundTruth([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], ["red circle", "blue square"], [(0, "left of", 1)])
    assert recall_at_k([_pred()], gt, 5) == (1.0, False)
    assert recall_at_k([], gt, 5) == (0.0, False)
    empty = GroundTruth([[0, 0, 0.5, 0.5]], ["red circle"])
    assert recall_at_k([_pred()], empty, 5) == (1.0, True)
    # IoU just below threshold misses
    assert recall_at_k([_pred(subject_box=(0.26, 0, 0.76, 0.5))], gt, 5)[0] == 0.0


def test_each_gt_consumes_one_prediction():
    gt = GroundTruth([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], ["red circle", "blue square"],
                     [(0, "left of", 1), (0, "left of", 1)])
    assert recall_at_k([_pred(), _pred(subject=3)], gt, 5)[0] == 1.0
    assert recall_at_k([_pred()], gt, 5)[0] == 0.5


def test_mean_recall_single_class_equals_recall():
    gt = GroundTruth([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], ["red circle", "blue square"],
                     [(0, "left of", 1), (1, "left of", 0)])
    preds = [[_pred()]]
    assert mean_recall_at_k(preds, [gt], 5) == corpus_recall_at_k(preds, [gt], 5) == 0.5


def test_mean_recall_is_unweighted():
    gt = GroundTruth([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], ["red circle", "blue square"],
                     [(0, "left of", 1)] + [(1, "above", 0)] * 9)
    assert mean_recall_at_k([[_pred()]], [gt], 5) == 0.5


def test_graph_constraint_examples():
    a, b = _pred(score=0.9, predicate="left of"), _pred(score=0.7, predicate="above", class_id=1)
    assert apply_graph_constraint([a, b]) == [a]
    c = _pred(subject=4, object=5, score=0.5)
    assert apply_graph_constraint([a, c]) == [a, c]
    many = [_pred(score=1 - i / 10, class_id=i) for i in range(6)]
    assert len(apply_graph_constraint(many, constrained=False, cap=4)) == 4


def _random_outputs(rng, m=5, k=8, n_obj=3, n_pred=4):
    inst = rng.choice(64, size=m, replace=False)
    cand = [(i, j) for i in inst for j in inst if i != j]
    pairs = np.array([cand[i] for i in rng.choice(len(cand), size=k, replace=False)])
    centres = rng.uniform(0.2, 0.8, size=(m, 2))
    return ImageOutputs(inst, pairs, rng.normal(size=m), rng.normal(size=k),
                        rng.normal(size=(m, n_obj)) * 2, rng.normal(size=(k, n_pred)) * 2,
                        np.concatenate([centres, rng.uniform(0.1, 0.3, size=(m, 2))], axis=1))


OBJ = ["red circle", "blue square", "green triangle"]
PRD = ["left of", "right of", "above", "below"]


def test_exhaustive_score_is_six_factor_product():
    rng = np.random.default_rng(0)
    img = _random_outputs(rng)
    preds = exhaustive_score(img, OBJ, PRD)
    assert len(preds) == 8 * 4
    sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
    slot = {int(t): s for s, t in enumerate(img.instances)}
    for p in preds:
        si, sj = slot[p.subject], slot[p.object]
        q = [n for n, (i, j) in enumerate(img.pairs) if (i, j) == (p.subject, p.object)][0]
        a, b, c = OBJ.index(p.subject_category), OBJ.index(p.object_category), PRD.index(p.predicate)
        assert a == int(np.argmax(img.object_logits[si]))
        want = (sig(img.instance_scores[si]) * sig(img.object_logits[si, a]) * sig(img.instance_scores[sj])
                * sig(img.object_logits[sj, b]) * sig(img.pair_scores[q]) * sig(img.predicate_logits[q, c]))
        assert p.score == pytest.approx(want, rel=1e-12)
        assert 0 <= p.score <= 1
    assert all(x.score >= y.score for x, y in zip(preds, preds[1:]))


def test_exhaustive_score_hand_case():
    inf = 50.0
    img = ImageOutputs(np.array([0, 1]), np.array([[0, 1], [1, 0]]), np.full(2, inf), np.full(2, inf),
                       np.array([[inf, -inf], [-inf, inf]]),
                       np.array([[np.log(0.9 / 0.1), np.log(0.2 / 0.8)], [np.log(0.3 / 0.7), np.log(0.6 / 0.4)]]),
                       np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]))
    preds = exhaustive_score(img, OBJ[:2], PRD[:2])
    assert [(p.subject, p.predicate) for p in preds] == [(0, "left of"), (1, "right of"), (1, "left of"),
                                                          (0, "right of")]
    np.testing.assert_allclose([p.score for p in preds], [0.9, 0.6, 0.3, 0.2], rtol=1e-9)
    img.predicate_logits[0, 0] = -inf
    assert min(p.score for p in exhaustive_score(img, OBJ[:2], PRD[:2])) < 1e-20


def test_all_category_mode_expands_combinations():
    img = _random_outputs(np.random.default_rng(1), k=2)
    assert len(exhaustive_score(img, OBJ, PRD, "all")) == 2 * 9 * 4


def test_constrained_subset_and_monotone_in_k():
    rng = np.random.default_rng(2)
    outs = [_random_outputs(rng) for _ in range(20)]
    gts = []
    for img in outs:
        boxes = np.column_stack([img.boxes[:, :2] - img.boxes[:, 2:] / 2, img.boxes[:, :2] + img.boxes[:, 2:] / 2])
        cats = [OBJ[int(np.argmax(r))] for r in img.object_logits]
        trips = [(int(s), PRD[int(rng.integers(4))], int(o)) for s, o in [(0, 1), (1, 2), (3, 4), (2, 0)]]
        gts.append(GroundTruth(boxes, cats, trips))
    rep, con, unc = evaluate_outputs(outs, gts, OBJ, PRD, EvalConfig(ks=(1, 2, 5, 10, 20)))
    for c, u in zip(con, unc):
        assert set(c) <= set(u)
    for metric in ("R@K", "mR@K"):
        for mode in ("constrained", "unconstrained"):
            vals = [rep.get(metric, f"{mode}@{k}") for k in (1, 2, 5, 10, 20)]
            assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
    # K counts pairs, so the constrained budget is inside the unconstrained one at every K
    for metric in ("R@K", "mR@K"):
        for k in (1, 2, 5, 10, 20):
            assert rep.get(metric, f"constrained@{k}") <= rep.get(metric, f"unconstrained@{k}") + 1e-12


def test_average_precision_examples():
    assert average_precision([True, False, True], 2) == pytest.approx(0.8333333333, abs=1e-9)
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([], 3) == 0.0
    with pytest.raises(ContractError):
        average_precision([True], 0)


def test_hico_map_rare_split():
    box_a, box_b = [0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]
    gts = [GroundTruth([box_a, box_b], ["red circle", "blue square"], [(0, "left of", 1)])] * 12
    gts.append(GroundTruth([box_a, box_b], ["red circle", "blue square"], [(0, "above", 1)]))
    preds = [[_pred(score=0.9)] for _ in range(12)] + [[_pred(predicate="above", score=0.3)]]
    m_all, rare, non = hico_map(preds, gts, rare_threshold=10)
    assert (m_all, rare, non) == (1.0, 1.0, 1.0)
    preds[-1] = []
    m_all, rare, non = hico_map(preds, gts, rare_threshold=10)
    assert (m_all, rare, non) == (0.5, 0.0, 1.0)
    assert math.isnan(hico_map(preds[:12], gts[:12], rare_threshold=10)[1])


def test_box_recall():
    img = ImageOutputs(np.arange(3), np.zeros((0, 2), dtype=int), np.array([5.0, 4.0, -5.0]), np.zeros(0),
                       np.array([[5.0], [5.0], [5.0]]), np.zeros((0, 1)),
                       np.array([[0.25, 0.25, 0.5, 0.5], [0.25, 0.25, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5]]))
    gt = GroundTruth([[0, 0, 0.5, 0.5], [0.5, 0.5, 1, 1]], ["a", "b"])
    assert box_recall([img], [gt], top=2) == 0.5        # the duplicate cannot match twice
    assert box_recall([img], [gt], top=3) == 1.0


def test_eval_config_validation():
    with pytest.raises(ContractError):
        EvalConfig(ks=(10, 5))
    with pytest.raises(ContractError):
        EvalConfig(iou=1.0)


def test_report_serialisation(tmp_path):
    rep = EvalReport()
    rep.add("R@K", "constrained@5", 0.25)
    rep.add("mAP", "rare", float("nan"))
    assert json.loads(rep.to_json()) == {"R@K": {"constrained@5": 0.25}, "mAP": {"rare": None}}
    assert rep.to_csv().splitlines() == ["metric,name,value", "R@K,constrained@5,0.25", "mAP,rare,nan"]
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == rep.to_csv()
