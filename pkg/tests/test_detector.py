import numpy as np
import pytest

from kgsemcom.detector import (
    Detection,
    GroundTruth,
    RPNHead,
    assign_anchors,
    decode_deltas,
    encode_deltas,
    flatten_rpn_outputs,
    generate_anchors,
    iou,
    loss_total,
    mean_average_precision,
    nms,
    propose,
    roi_level,
    roi_pool,
    rpn_forward,
)
from kgsemcom.errors import ShapeMismatchError
from kgsemcom.extractor import FeaturePyramid
from kgsemcom.layers import conv2d
from kgsemcom.optim import ParameterStore
from kgsemcom.tensor import Tensor

from oracles import finite_diff_grad, grad_rel_err, iou_direct


def toy_pyramid(rng, batch=1, channels=8):
    return FeaturePyramid([Tensor(rng.normal(size=(batch, channels, s, s)))
                           for s in (32, 16, 8, 4, 2)])


# -- iou -----------------------------------------------------------------------

def test_iou_identical_and_disjoint():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou([0, 0, 1, 1], [5, 5, 6, 6]) == 0.0


def test_iou_hand_value():
    assert abs(iou([0, 0, 2, 2], [1, 0, 3, 2]) - 1 / 3) < 1e-12


def test_iou_degenerate_box():
    assert iou([1, 1, 1, 3], [0, 0, 2, 2]) == 0.0


def test_iou_matches_oracle_on_random_boxes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = np.sort(rng.uniform(0, 10, size=4)).take([0, 1, 2, 3])
        a = [a[0], a[1], a[2] + 0.5, a[3] + 0.5]
        b = rng.uniform(0, 10, size=4)
        b = [min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 0.1, max(b[1], b[3]) + 0.1]
        assert abs(iou(a, b) - iou_direct(a, b)) < 1e-12


# -- box deltas ------------------------------------------------------------------

def test_delta_round_trip_exact():
    rng = np.random.default_rng(1)
    anchors = np.stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20),
                        rng.uniform(60, 100, 20), rng.uniform(60, 100, 20)], axis=1)
    boxes = np.stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20),
                      rng.uniform(60, 100, 20), rng.uniform(60, 100, 20)], axis=1)
    back = decode_deltas(encode_deltas(boxes, anchors), anchors)
    assert np.max(np.abs(back - boxes)) < 1e-9


# -- anchors ---------------------------------------------------------------------

def test_anchor_counts_and_assignment():
    anchors = generate_anchors(128, (32, 16, 8, 4, 2))
    assert [len(a) for a in anchors] == [32 * 32 * 3, 16 * 16 * 3, 8 * 8 * 3, 4 * 4 * 3, 2 * 2 * 3]

    flat = np.concatenate(anchors)
    gt = np.array([[30.0, 30.0, 46.0, 46.0]])
    labels, matched = assign_anchors(flat, gt)
    assert (labels == 1).any()
    assert np.all(matched[labels == 1] == 0)


def test_assignment_positive_negative_rules():
    anchors = np.array([
        [0.0, 0.0, 10.0, 10.0],     # equals the GT
        [100.0, 100.0, 110.0, 110.0],  # far away
        [0.0, 0.0, 11.0, 10.0],     # heavy overlap
    ])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    labels, matched = assign_anchors(anchors, gt)
    assert labels[0] == 1 and matched[0] == 0
    assert labels[1] == 0
    ious = [iou(a, gt[0]) for a in anchors]
    want = [1 if v >= 0.7 or v == max(ious) else (0 if v <= 0.3 else -1) for v in ious]
    assert labels.tolist() == want


def test_assignment_with_no_ground_truth():
    labels, matched = assign_anchors(np.array([[0, 0, 1, 1.0]]), np.zeros((0, 4)))
    assert labels.tolist() == [0] and matched.tolist() == [-1]


# -- rpn head ------------------------------------------------------------------------

def test_rpn_output_shapes():
    store = ParameterStore()
    head = RPNHead(store, 8, rng=np.random.default_rng(2))
    rng = np.random.default_rng(3)
    outputs = rpn_forward(toy_pyramid(rng), head)
    obj, delta = outputs[1]
    assert obj.shape == (1, 3, 16, 16)
    assert delta.shape == (1, 12, 16, 16)


def test_rpn_shared_head_identical_features():
    store = ParameterStore()
    head = RPNHead(store, 4, rng=np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(1, 4, 8, 8))
    o1, d1 = head.forward_level(Tensor(x))
    o2, d2 = head.forward_level(Tensor(x.copy()))
    assert np.array_equal(o1.data, o2.data) and np.array_equal(d1.data, d2.data)


def test_rpn_matches_hand_composition():
    store = ParameterStore()
    head = RPNHead(store, 4, rng=np.random.default_rng(6))
    x = Tensor(np.random.default_rng(7).normal(size=(1, 4, 8, 8)))
    obj, delta = head.forward_level(x)
    h = conv2d(x, head.trunk.weight, head.trunk.bias, 1, 1).leaky_relu(0.01)
    assert np.array_equal(obj.data, conv2d(h, head.obj.weight, head.obj.bias, 1, 0).data)
    assert np.array_equal(delta.data, conv2d(h, head.delta.weight, head.delta.bias, 1, 0).data)


# -- loss ------------------------------------------------------------------------------

def test_loss_all_negative_is_classification_only():
    p = Tensor(np.array([0.2, 0.3]))
    labels = np.array([0.0, 0.0])
    t = Tensor(np.zeros((2, 4)))
    loss = loss_total(p, labels, t, np.ones((2, 4)), lam=1.0)
    want = (-np.log(0.8) - np.log(0.7)) / 2
    assert abs(loss.item() - want) < 1e-12


def test_loss_perfect_predictions_near_zero():
    p = Tensor(np.array([1.0, 0.0, 1.0]))
    labels = np.array([1.0, 0.0, 1.0])
    t = Tensor(np.array([[0.1, 0.2, 0.0, 0.0], [0, 0, 0, 0], [0.5, 0, 0, 0]]))
    loss = loss_total(p, labels, t, t.data.copy(), lam=1.0)
    assert loss.item() < 1e-6


def test_loss_two_anchor_hand_case():
    # anchor 0 positive with p=0.6, delta error (0.5, 0, 0, 0)
    # anchor 1 negative with p=0.3
    p = Tensor(np.array([0.6, 0.3]))
    labels = np.array([1.0, 0.0])
    t = Tensor(np.array([[0.5, 0.0, 0.0, 0.0], [9.0, 9.0, 9.0, 9.0]]))
    t_star = np.zeros((2, 4))
    loss = loss_total(p, labels, t, t_star, lam=1.0)
    want = (-np.log(0.6) - np.log(0.7)) / 2 + (0.5 * 0.5 ** 2) / 1
    assert abs(loss.item() - want) < 1e-12


def test_loss_zero_denominators():
    p = Tensor(np.zeros(0))
    loss = loss_total(p, np.zeros(0), Tensor(np.zeros((0, 4))), np.zeros((0, 4)))
    assert loss.item() == 0.0


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    p0 = rng.uniform(0.2, 0.8, size=6)
    labels = np.array([1.0, 0, 1, 0, 0, 1])
    t0 = rng.normal(size=(6, 4)) * 0.6
    t_star = rng.normal(size=(6, 4)) * 0.6

    p = Tensor(p0, requires_grad=True)
    t = Tensor(t0, requires_grad=True)
    loss_total(p, labels, t, t_star, lam=1.3).backward()

    def f_p(v):
        return loss_total(Tensor(v), labels, Tensor(t0), t_star, lam=1.3).item()

    def f_t(v):
        return loss_total(Tensor(p0), labels, Tensor(v), t_star, lam=1.3).item()

    assert grad_rel_err(p.grad, finite_diff_grad(f_p, p0.copy())) < 1e-4
    assert grad_rel_err(t.grad, finite_diff_grad(f_t, t0.copy())) < 1e-4


# -- nms / propose ------------------------------------------------------------------------

def test_nms_single_box():
    keep = nms(np.array([[0, 0, 5, 5.0]]), np.array([0.9]), 0.5)
    assert keep == [0]


def test_nms_identical_boxes_keeps_higher_score():
    boxes = np.array([[0, 0, 5, 5.0], [0, 0, 5, 5.0]])
    keep = nms(boxes, np.array([0.4, 0.8]), 0.5)
    assert keep == [1]


def test_nms_kept_pairwise_iou_below_threshold():
    rng = np.random.default_rng(9)
    boxes = np.stack([rng.uniform(0, 40, 30), rng.uniform(0, 40, 30),
                      rng.uniform(45, 90, 30), rng.uniform(45, 90, 30)], axis=1)
    scores = rng.uniform(size=30)
    keep = nms(boxes, scores, 0.4)
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(boxes[i], boxes[j]) < 0.4


def test_propose_returns_empty_for_empty():
    store = ParameterStore()
    head = RPNHead(store, 8, rng=np.random.default_rng(10))
    rng = np.random.default_rng(11)
    pyr = toy_pyramid(rng)
    outputs = rpn_forward(pyr, head)
    anchors = generate_anchors(128, (32, 16, 8, 4, 2))
    boxes, scores = propose(outputs, anchors, 128, post_nms_n=5)
    assert boxes.shape[1] == 4 and len(boxes) == len(scores) and len(boxes) <= 5


def test_flatten_layout_matches_anchor_layout():
    # a single distinctive cell must land at the matching flat index
    store = ParameterStore()
    head = RPNHead(store, 4, rng=np.random.default_rng(12))
    pyr = FeaturePyramid([Tensor(np.zeros((1, 4, s, s))) for s in (32, 16, 8, 4, 2)])
    outputs = rpn_forward(pyr, head)
    # overwrite objectness of level 0 with a marker at cell (2, 3), anchor 1
    o0 = outputs[0][0].data.copy()
    o0[:] = 0
    o0[0, 1, 2, 3] = 7.0
    outputs[0] = (Tensor(o0), outputs[0][1])
    logits, _ = flatten_rpn_outputs(outputs, 0)
    flat_idx = (2 * 32 + 3) * 3 + 1
    assert logits.data[flat_idx] == 7.0
    anchors = generate_anchors(128, (32, 16, 8, 4, 2))
    a = anchors[0][flat_idx]
    cx, cy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    assert abs(cx - (3 + 0.5) * 4) < 1e-9 and abs(cy - (2 + 0.5) * 4) < 1e-9


# -- roi pooling -----------------------------------------------------------------------------

def test_roi_level_selection():
    # 16 px box in a 128 image: sqrt(a)/im * 4 = 0.5 -> level 3
    assert roi_level([0, 0, 16, 16], 128) == 3
    assert roi_level([0, 0, 128, 128], 128) == 6
    assert roi_level([0, 0, 2, 2], 128) == 2


def test_roi_pool_integer_aligned_box_reads_subgrid():
    # one feature cell per grid point: box spanning cells [1..4)x[1..4)
    rng = np.random.default_rng(13)
    pyr = FeaturePyramid([Tensor(rng.normal(size=(1, 2, s, s)))
                          for s in (32, 16, 8, 4, 2)])
    # level 2 has stride 4; choose a 3x3-cell box offset by half a cell so
    # every sampling point lands exactly on a cell center
    box = np.array([4 * 1.0, 4 * 1.0, 4 * 4.0, 4 * 4.0])
    pooled = roi_pool(pyr, box[None], out_size=3, image_size=128, level_override=2)
    level = pyr.levels[0].data[0]
    want = level[:, 1:4, 1:4]  # cells (1..3) in each axis
    got = pooled.data[0].reshape(2, 3, 3)
    assert np.max(np.abs(got - want)) < 1e-12


def test_roi_pool_gradients_flow():
    rng = np.random.default_rng(14)
    pyr = FeaturePyramid([Tensor(rng.normal(size=(1, 2, s, s)), requires_grad=True)
                          for s in (32, 16, 8, 4, 2)])
    boxes = np.array([[3.0, 5.0, 30.0, 40.0]])
    pooled = roi_pool(pyr, boxes, out_size=4, image_size=128)
    pooled.sum().backward()
    lvl = roi_level(boxes[0], 128)
    g = pyr.levels[lvl - 2].grad
    assert g is not None and np.abs(g).sum() > 0


def test_roi_pool_empty_boxes():
    rng = np.random.default_rng(15)
    pyr = toy_pyramid(rng)
    pooled = roi_pool(pyr, np.zeros((0, 4)), out_size=3, image_size=128)
    assert pooled.shape == (0, 8 * 9)


# -- mAP ---------------------------------------------------------------------------------------

def test_map_perfect_detection():
    gts = [GroundTruth(0, 1, (0, 0, 10, 10))]
    dets = [Detection(0, 1, 0.9, (0, 0, 10, 10))]
    per_class, m = mean_average_precision(dets, gts)
    assert per_class[1] == 1.0 and m == 1.0


def test_map_no_detections():
    gts = [GroundTruth(0, 1, (0, 0, 10, 10))]
    per_class, m = mean_average_precision([], gts)
    assert per_class[1] == 0.0 and m == 0.0


def test_map_tp_then_fp_orderings():
    gts = [GroundTruth(0, 0, (0, 0, 10, 10))]
    tp_first = [Detection(0, 0, 0.9, (0, 0, 10, 10)),
                Detection(0, 0, 0.5, (50, 50, 60, 60))]
    _, m1 = mean_average_precision(tp_first, gts)
    assert m1 == 1.0
    fp_first = [Detection(0, 0, 0.9, (50, 50, 60, 60)),
                Detection(0, 0, 0.5, (0, 0, 10, 10))]
    _, m2 = mean_average_precision(fp_first, gts)
    assert m2 == 0.5


def test_map_class_without_gt_excluded():
    gts = [GroundTruth(0, 0, (0, 0, 10, 10))]
    dets = [Detection(0, 0, 0.9, (0, 0, 10, 10)),
            Detection(0, 5, 0.99, (0, 0, 10, 10))]  # class 5 has no GT
    per_class, m = mean_average_precision(dets, gts)
    assert 5 not in per_class and m == 1.0


def test_map_duplicate_matched_detection_never_raises_ap():
    gts = [GroundTruth(0, 0, (0, 0, 10, 10)),
           GroundTruth(0, 0, (20, 20, 30, 30))]
    base = [Detection(0, 0, 0.9, (0, 0, 10, 10)),
            Detection(0, 0, 0.8, (20, 20, 30, 30))]
    _, m_before = mean_average_precision(base, gts)
    dup = base + [Detection(0, 0, 0.7, (0, 0, 10, 10))]
    _, m_after = mean_average_precision(dup, gts)
    assert m_after <= m_before


def test_map_matches_hand_pr_curve():
    # 3 GTs, detections: TP(0.9), FP(0.8), TP(0.7) -> recall 2/3
    gts = [GroundTruth(0, 0, (0, 0, 10, 10)),
           GroundTruth(0, 0, (20, 20, 30, 30)),
           GroundTruth(0, 0, (40, 40, 50, 50))]
    dets = [Detection(0, 0, 0.9, (0, 0, 10, 10)),
            Detection(0, 0, 0.8, (60, 60, 70, 70)),
            Detection(0, 0, 0.7, (20, 20, 30, 30))]
    per_class, _ = mean_average_precision(dets, gts)
    # hand PR: (1/3, 1), (1/3, 1/2), (2/3, 2/3); envelope gives
    # AP = 1/3 * 1 + 1/3 * 2/3
    assert abs(per_class[0] - (1 / 3 + 2 / 9)) < 1e-12


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        loss_total(Tensor(np.zeros(3)), np.zeros(4), Tensor(np.zeros((3, 4))),
                   np.zeros((3, 4)))
