import itertools
import math

import numpy as np
import pytest

from sgvit.boxes import cxcywh_to_xyxy, giou, giou_matrix, iou_matrix, xyxy_to_cxcywh
from sgvit.errors import ContractError, DatasetError, TrainingError
from sgvit.losses import (
    build_targets,
    class_loss,
    compute_losses,
    detection_loss,
    relationship_class_loss,
    score_loss,
    score_targets,
    total_loss,
)
from sgvit.matching import GroundTruth, assignment_cost, hungarian, matching_cost
from sgvit.model import ModelOutput
from sgvit.numerics import Tensor, gradients, parameter, precision

LN2 = math.log(2.0)


# -- hungarian --------------------------------------------------------------------

def _brute(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(p)) for p in itertools.permutations(range(m), n))
    return _brute(cost.T)


def test_hungarian_examples():
    assert hungarian([[4, 1], [2, 3]]) == [(0, 1), (1, 0)]
    assert assignment_cost([[4, 1], [2, 3]], hungarian([[4, 1], [2, 3]])) == 3
    eye = 1 - np.eye(5)
    assert hungarian(eye) == [(i, i) for i in range(5)]
    assert hungarian(np.zeros((0, 3))) == []


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(250):
        n, m = rng.integers(1, 8, size=2)
        cost = rng.uniform(0, 10, size=(n, m))
        if trial % 3 == 0:
            cost = np.round(cost)                       # ties
        pairs = hungarian(cost)
        assert len(pairs) == min(n, m)
        assert len({r for r, _ in pairs}) == len({c for _, c in pairs}) == len(pairs)
        assert assignment_cost(cost, pairs) == pytest.approx(_brute(cost), abs=1e-9)


def test_hungarian_agrees_with_scipy():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, m = rng.integers(1, 20, size=2)
        cost = rng.normal(size=(n, m))
        r, c = scipy_opt.linear_sum_assignment(cost)
        assert assignment_cost(cost, hungarian(cost)) == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_hungarian_tie_break_is_lexicographic():
    assert hungarian(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian(np.zeros((2, 4))) == [(0, 0), (1, 1)]
    assert hungarian(np.ones((3, 2))) == [(0, 0), (1, 1)]
    # two optima of cost 2: (0->0, 1->1) and (0->1, 1->0)
    assert hungarian([[1, 1], [1, 1]]) == [(0, 0), (1, 1)]
    assert hungarian(np.zeros((4, 4))) == hungarian(np.zeros((4, 4)))


def test_hungarian_rejects_non_finite():
    with pytest.raises(ContractError):
        hungarian([[1.0, np.inf]])


# -- gIoU ---------------------------------------------------------------------------

def _random_boxes(rng, n):
    lo = rng.uniform(0, 0.9, size=(n, 2))
    wh = rng.uniform(0.01, 0.5, size=(n, 2))
    return np.concatenate([lo, lo + wh], axis=1)


def test_giou_examples():
    assert giou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert abs(giou([0, 0, 1, 1], [2, 0, 3, 1]) - (-1 / 3)) < 1e-9
    assert giou([0, 0, 0.01, 0.01], [99, 99, 100, 100]) < -0.999
    with pytest.raises(ContractError):
        giou([0, 0, 0, 1], [0, 0, 1, 1])


def test_giou_properties_on_random_pairs():
    rng = np.random.default_rng(0)
    a, b = _random_boxes(rng, 10_000), _random_boxes(rng, 10_000)
    ab = np.array([giou_matrix(x, y)[0, 0] for x, y in zip(a[:500], b[:500])])
    ba = np.array([giou_matrix(y, x)[0, 0] for x, y in zip(a[:500], b[:500])])
    np.testing.assert_array_equal(ab, ba)
    g = _pairwise(a, b)
    assert np.all(g >= -1) and np.all(g <= 1)
    assert np.all(g <= _pairwise_iou(a, b) + 1e-12)
    np.testing.assert_allclose(_pairwise(a, a), 1.0)


def _pairwise(a, b):
    return np.array([giou_matrix(a[i:i + 1000], b[i:i + 1000]).diagonal() for i in range(0, len(a), 1000)]).ravel()


def _pairwise_iou(a, b):
    return np.array([iou_matrix(a[i:i + 1000], b[i:i + 1000]).diagonal() for i in range(0, len(a), 1000)]).ravel()


def test_giou_equals_iou_when_union_fills_hull():
    # nested boxes: hull is the outer box, equal to the union
    assert giou([0, 0, 1, 1], [0.2, 0.2, 0.5, 0.5]) == pytest.approx(0.09)
    # side-by-side, touching
    assert giou([0, 0, 1, 1], [1, 0, 2, 1]) == pytest.approx(0.0)


def test_box_format_round_trip():
    b = np.array([[0.5, 0.5, 0.2, 0.4]])
    np.testing.assert_allclose(cxcywh_to_xyxy(b), [[0.4, 0.3, 0.6, 0.7]])
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b)


# -- matching cost -------------------------------------------------------------------

NAMES = ["red circle", "blue square"]


def test_matching_cost_hand_case():
    gt = GroundTruth([[0.0, 0.0, 0.5, 0.5]], ["red circle"])
    logits = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])        # sigmoid 0.5 and 0.75
    boxes = np.array([[0.25, 0.25, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
    cost = matching_cost(logits, boxes, gt, NAMES)
    # instance 0: exact box -> 0.5 + 0 + 0
    # instance 1: l1 = 0.25 + 0.25 + 0 + 0 = 0.5; box [0.25,0.25,0.75,0.75]
    #   inter 0.0625, union 0.4375, hull 0.5625 -> giou = 1/7 - 0.125/0.5625
    g1 = 0.0625 / 0.4375 - (0.5625 - 0.4375) / 0.5625
    np.testing.assert_allclose(cost, [[0.5, 0.25 + 0.5 + 1 - g1]], atol=1e-12)
    assert hungarian(cost) == [(0, 0)]


def test_matching_cost_unknown_category():
    gt = GroundTruth([[0, 0, 0.5, 0.5]], ["green blob"])
    with pytest.raises(DatasetError):
        matching_cost(np.zeros((1, 2)), np.full((1, 4), 0.3), gt, NAMES)


def test_ground_truth_validation():
    with pytest.raises(DatasetError):
        GroundTruth([[0.5, 0, 0.2, 1]], ["red circle"])
    with pytest.raises(DatasetError):
        GroundTruth([[0, 0, 1, 1]], ["red circle"], [(0, "left of", 0)])
    with pytest.raises(DatasetError):
        GroundTruth([[0, 0, 1, 1]], ["red circle", "red circle"])


# -- losses ---------------------------------------------------------------------------

def _output(obj_logits, boxes, pair_logits, inst_scores=None, pair_scores=None, pairs=None, instances=None):
    obj_logits = np.asarray(obj_logits, dtype=np.float64)
    b, m, _ = obj_logits.shape
    pair_logits = np.asarray(pair_logits, dtype=np.float64).reshape(b, -1, len(PRED))
    k = pair_logits.shape[1]
    if instances is None:
        instances = np.tile(np.arange(m), (b, 1))
    if pairs is None:
        pairs = np.zeros((b, k, 2), dtype=np.int64)
    return ModelOutput(
        scores=Tensor(np.zeros((b, 1, 1))), selections=[], instances=np.asarray(instances),
        pairs=np.asarray(pairs).reshape(b, k, 2),
        instance_scores=parameter(np.zeros((b, m)) if inst_scores is None else inst_scores),
        pair_scores=parameter(np.zeros((b, k)) if pair_scores is None else pair_scores),
        object_logits=parameter(obj_logits), predicate_logits=parameter(pair_logits),
        boxes=parameter(np.asarray(boxes, dtype=np.float64)),
    )


PRED = ["left of", "right of"]


def test_class_loss_values():
    assert float(class_loss(Tensor([[0.0]]), np.array([[1.0]])).data) == pytest.approx(LN2)
    # saturated negatives
    assert float(class_loss(Tensor(np.full((3, 4), -10.0)), np.zeros((3, 4))).data) < 4e-3 * 1.0
    assert float(class_loss(Tensor(np.zeros((0, 2))), np.zeros((0, 2))).data) == 0.0


def test_detection_loss_one_matched_one_unmatched():
    with precision(np.float64):
        gt = GroundTruth([[0.0, 0.0, 0.5, 0.5]], ["red circle"])
        out = _output([[[2.0, -1.0], [0.5, -3.0]]], [[[0.25, 0.25, 0.5, 0.5], [0.8, 0.8, 0.1, 0.1]]],
                      np.zeros((1, 0, 2)))
        targets = build_targets(out, [gt], NAMES, PRED)
        assert targets.matchings == [{0: 0}]
        cls, l1, g = detection_loss(out, targets)

    def ce(x, t):
        return -(t * math.log(1 / (1 + math.exp(-x))) + (1 - t) * math.log(1 - 1 / (1 + math.exp(-x))))

    expected = (ce(2.0, 1) + ce(-1.0, 0) + ce(0.5, 0) + ce(-3.0, 0)) / 2
    assert float(cls.data) == pytest.approx(expected, abs=1e-12)
    assert float(l1.data) == pytest.approx(0.0, abs=1e-12)
    assert float(g.data) == pytest.approx(0.0, abs=1e-12)


def test_detection_loss_invariant_to_gt_order():
    rng = np.random.default_rng(0)
    boxes_gt = _random_boxes(rng, 3) * 0.6
    cats = ["red circle", "blue square", "red circle"]
    out = _output(rng.normal(size=(1, 5, 2)), rng.uniform(0.2, 0.6, size=(1, 5, 4)), np.zeros((1, 0, 2)))
    base = [float(t.data) for t in detection_loss(out, build_targets(out, [GroundTruth(boxes_gt, cats)], NAMES, PRED))]
    for perm in itertools.permutations(range(3)):
        gt = GroundTruth(boxes_gt[list(perm)], [cats[i] for i in perm])
        got = [float(t.data) for t in detection_loss(out, build_targets(out, [gt], NAMES, PRED))]
        np.testing.assert_allclose(got, base, atol=1e-6)


def _two_object_case(pair_logits):
    gt = GroundTruth([[0.0, 0.0, 0.2, 0.2], [0.6, 0.0, 0.8, 0.2]], ["red circle", "blue square"],
                     [(0, "left of", 1), (1, "right of", 0)])
    out = _output([[[5.0, -5.0], [-5.0, 5.0]]],
                  [[[0.1, 0.1, 0.2, 0.2], [0.7, 0.1, 0.2, 0.2]]],
                  pair_logits, pairs=[[[7, 3], [3, 7], [7, 7]]], instances=[[3, 7]])
    return gt, out


def test_relationship_targets_and_hand_ce():
    with precision(np.float64):
        gt, out = _two_object_case([[[0.0, -2.0], [1.0, 0.0], [-3.0, -3.0]]])
        t = build_targets(out, [gt], NAMES, PRED)
        loss = float(relationship_class_loss(out, t).data)
    # slot 0 holds token pair (7, 3) = GT (1, 0) "right of"; slot 1 is (0, 1) "left of"
    np.testing.assert_array_equal(t.predicate_targets[0], [[0, 1], [1, 0], [0, 0]])

    def ce(x, y):
        return math.log1p(math.exp(-x)) if y else math.log1p(math.exp(x))

    expected = (ce(0, 0) + ce(-2, 1) + ce(1, 1) + ce(0, 0) + ce(-3, 0) + ce(-3, 0)) / 3
    assert loss == pytest.approx(expected, abs=1e-9)


def test_unselected_triplets_contribute_nothing():
    gt, out = _two_object_case(np.full((1, 3, 2), -10.0))
    out.pairs = np.array([[[3, 3], [7, 7], [3, 3]]])               # neither GT pair selected
    t = build_targets(out, [gt], NAMES, PRED)
    assert t.predicate_targets.sum() == 0
    assert float(relationship_class_loss(out, t).data) < 1e-3 * 2


def test_unknown_predicate_is_dataset_error():
    gt, out = _two_object_case(np.zeros((1, 3, 2)))
    gt.triplets = [(0, "beneath", 1)]
    with pytest.raises(DatasetError):
        build_targets(out, [gt], NAMES, PRED)


def test_score_targets_and_ln2_example():
    out = _output([[[np.log(0.2 / 0.8), np.log(0.7 / 0.3)]]], [[[0.5, 0.5, 0.2, 0.2]]], np.zeros((1, 0, 2)))
    assert score_targets(out)[0, 0] == pytest.approx(0.7)
    assert float(score_loss(out).data) == pytest.approx(LN2, abs=1e-6)
    # calibrated score is the optimum for its target
    vals = []
    for p in (np.log(0.7 / 0.3) - 0.1, np.log(0.7 / 0.3), np.log(0.7 / 0.3) + 0.1):
        o = _output([[[np.log(0.2 / 0.8), np.log(0.7 / 0.3)]]], [[[0.5, 0.5, 0.2, 0.2]]],
                    np.zeros((1, 0, 2)), inst_scores=[[p]])
        vals.append(float(score_loss(o).data))
    assert vals[1] < vals[0] and vals[1] < vals[2]


def test_score_loss_has_no_gradient_into_class_logits():
    out = _output(np.random.default_rng(0).normal(size=(1, 3, 2)), np.full((1, 3, 4), 0.3),
                  np.random.default_rng(1).normal(size=(1, 2, 2)))
    g_obj, g_pred, g_inst = gradients(score_loss(out), [out.object_logits, out.predicate_logits,
                                                        out.instance_scores])
    assert np.all(g_obj == 0) and np.all(g_pred == 0)
    assert np.any(g_inst != 0)


def test_total_loss_sum_and_errors():
    z = [Tensor(0.0) for _ in range(4)]
    assert float(total_loss(*z).total.data) == 0.0
    rep = total_loss(*(Tensor(float(v)) for v in (1, 2, 3, 4)))
    assert float(rep.total.data) == 10.0
    assert rep.values()["giou"] == 3.0
    bad = Tensor(1.0)
    bad.data = np.array(np.nan, np.float32)
    with pytest.raises(TrainingError, match="l1"):
        total_loss(Tensor(0.0), bad, Tensor(0.0), Tensor(0.0))


def test_total_gradient_is_sum_of_component_gradients():
    with precision(np.float64):
        gt, out = _two_object_case(np.random.default_rng(3).normal(size=(1, 3, 2)))
        rep, _ = compute_losses(out, [gt], NAMES, PRED)
        params = [out.object_logits, out.predicate_logits, out.boxes, out.pair_scores]
        total = gradients(rep.total, params)
        parts = []
        for name in ("cls", "l1", "giou", "score"):          # backward releases the tape
            rep, _ = compute_losses(out, [gt], NAMES, PRED)
            parts.append(gradients(getattr(rep, name), params))
        for i, g in enumerate(total):
            np.testing.assert_allclose(g, sum(p[i] for p in parts), atol=1e-12)
