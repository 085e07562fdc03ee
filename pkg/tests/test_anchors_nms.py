import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import assign_oracle, greedy_nms
from uavloc.detector.anchors import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    assign_targets,
    decode_boxes,
    encode_boxes,
    make_anchors,
)
from uavloc.detector.network import DESK_NETWORK, NetworkConfig
from uavloc.detector.nms import nms
from uavloc.geometry import Cuboid, Detection, bev_iou
from uavloc.pillars import DESK_GRID, GridParams

SMALL = GridParams(0.0, 4.0, -2.0, 2.0, -1.0, 1.0, 0.5, 0.5, ds_factor=2)


def test_anchor_layout():
    a = make_anchors(SMALL, DESK_NETWORK)
    assert a.shape == (4 * 4 * 2, 7)
    # row-major over cells, then yaw
    np.testing.assert_allclose(a[0], [0.5, -1.5, 0.5, 0.5, 0.5, 0.3, 0.0])
    np.testing.assert_allclose(a[1], [0.5, -1.5, 0.5, 0.5, 0.5, 0.3, math.pi / 2])
    np.testing.assert_allclose(a[2, :2], [1.5, -1.5])
    np.testing.assert_allclose(a[8, :2], [0.5, -0.5])
    assert make_anchors(DESK_GRID, DESK_NETWORK).shape == (40 * 40 * 2, 7)


def test_zero_residuals_decode_to_anchor(rng):
    a = make_anchors(SMALL, DESK_NETWORK)
    np.testing.assert_array_equal(decode_boxes(np.zeros_like(a), a), a)


@given(st.integers(0, 2**31))
def test_encode_decode_are_inverse(seed):
    rng = np.random.default_rng(seed)
    anchors = np.c_[rng.normal(0, 5, (20, 3)), rng.uniform(0.1, 2, (20, 3)), rng.uniform(-3, 3, 20)]
    r = rng.normal(0, 1, (20, 7))
    np.testing.assert_allclose(encode_boxes(decode_boxes(r, anchors), anchors), r, atol=1e-9)
    boxes = np.c_[rng.normal(0, 5, (20, 3)), rng.uniform(0.1, 2, (20, 3)), rng.uniform(-3, 3, 20)]
    np.testing.assert_allclose(decode_boxes(encode_boxes(boxes, anchors), anchors), boxes, atol=1e-9)


def test_identical_anchor_is_positive_with_zero_residuals():
    a = make_anchors(SMALL, DESK_NETWORK)
    t = assign_targets(a, [Cuboid.from_array(a[5])], DESK_NETWORK)
    assert t.labels[5] == POSITIVE and t.matched[5] == 0
    np.testing.assert_allclose(t.residuals[5], 0, atol=1e-15)


def test_no_truth_means_all_negative():
    a = make_anchors(SMALL, DESK_NETWORK)
    t = assign_targets(a, [], DESK_NETWORK)
    assert np.all(t.labels == NEGATIVE) and t.n_positive == 0


def test_weak_truth_still_gets_its_best_anchor():
    a = make_anchors(SMALL, DESK_NETWORK)
    # small box sitting on a cell centre: IoU with the anchor is 0.04, far below 0.35
    t = assign_targets(a, [Cuboid(0.5, -1.5, 0.5, 0.1, 0.1, 0.3)], DESK_NETWORK)
    # both yaws of that cell tie at the maximum
    assert t.labels[0] == POSITIVE and t.labels[1] == POSITIVE
    assert t.n_positive == 2


def test_ignore_band():
    net = NetworkConfig(match_iou_pos=0.9, match_iou_neg=0.1)
    a = np.array([[0, 0, 0.5, 1, 1, 0.3, 0], [0.5, 0, 0.5, 1, 1, 0.3, 0], [5, 5, 0.5, 1, 1, 0.3, 0]], float)
    t = assign_targets(a, [Cuboid(0, 0, 0.5, 1, 1, 0.3)], net)
    assert t.labels.tolist() == [POSITIVE, IGNORE, NEGATIVE]


@given(st.integers(0, 2**31))
def test_assignment_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    a = make_anchors(SMALL, DESK_NETWORK)
    n = int(rng.integers(0, 4))
    truths = [np.r_[rng.uniform(0, 4), rng.uniform(-2, 2), 0.5, rng.uniform(0.2, 1.2, 2), 0.3,
                    rng.uniform(-3, 3)] for _ in range(n)]
    t = assign_targets(a, truths, DESK_NETWORK)
    labels, matched = assign_oracle(a.tolist(), [x.tolist() for x in truths], 0.5, 0.35)
    assert t.labels.tolist() == labels
    assert t.matched.tolist() == matched
    assert np.all(np.isfinite(t.residuals))


# -- NMS --------------------------------------------------------------------------

def det(x, y, score, l=1.0, w=1.0, yaw=0.0):
    return Detection(Cuboid(x, y, 0, l, w, 1, 0, 0, yaw), score)


def test_nms_examples():
    assert nms([det(0, 0, 0.7)], 0.5, 0.6) == [det(0, 0, 0.7)]
    assert nms([det(0, 0, 0.5)], 0.5, 0.6) == []
    assert nms([det(0, 0, 0.8), det(0, 0, 0.9)], 0.5) == [det(0, 0, 0.9)]
    # ties resolved in input order
    a, b = det(0, 0, 0.9), det(0.1, 0, 0.9)
    assert nms([a, b], 0.5) == [a]
    assert nms([b, a], 0.5) == [b]


def test_nms_threshold_is_strict():
    # unit square inside a 2 x 1 box: IoU exactly 0.5
    a, b = det(0, 0, 0.9), det(0.5, 0, 0.8, l=2.0, w=1.0)
    iou = bev_iou(a.box, b.box)
    assert iou == pytest.approx(0.5)
    assert len(nms([a, b], iou_threshold=0.5)) == 2
    assert len(nms([a, b], iou_threshold=0.49)) == 1


@given(st.integers(0, 2**31), st.floats(0.05, 0.9))
def test_nms_matches_greedy_oracle(seed, thr):
    rng = np.random.default_rng(seed)
    dets = [det(*rng.uniform(-2, 2, 2), float(rng.choice([0.3, 0.5, rng.random()])),
                *rng.uniform(0.3, 1.5, 2), rng.uniform(-3, 3)) for _ in range(50)]
    kept = nms(dets, thr)
    boxes = [d.box.to_box7() for d in dets]
    want = greedy_nms(boxes, [d.score for d in dets], thr)
    assert kept == [dets[i] for i in want]
    scores = [d.score for d in kept]
    assert scores == sorted(scores, reverse=True)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert bev_iou(kept[i].box, kept[j].box) <= thr + 1e-12
