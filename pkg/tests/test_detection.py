import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcspp_yolo.anchors import AnchorSet
from dcspp_yolo.detection import (
    BBox,
    Detection,
    DetectionError,
    decode,
    detect_image,
    format_detections,
    iou,
    nms,
)
from dcspp_yolo.network import NetworkConfig, build_network


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


# -- IoU ------------------------------------------------------------------------


def test_iou_identical_boxes():
    b = BBox(1.0, 2.0, 4.0, 7.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint_boxes():
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0


def test_iou_hand_geometry():
    # inter 2, union 6
    assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_iou_pixel_count_oracle():
    # brute force on a fine lattice approximates the analytic ratio
    rng = np.random.default_rng(0)
    for _ in range(20):
        ax0, ay0 = rng.uniform(0, 5, 2)
        a = BBox(ax0, ay0, ax0 + rng.uniform(0.5, 4), ay0 + rng.uniform(0.5, 4))
        bx0, by0 = rng.uniform(0, 5, 2)
        b = BBox(bx0, by0, bx0 + rng.uniform(0.5, 4), by0 + rng.uniform(0.5, 4))
        n = 400
        xs = np.linspace(0, 10, n)
        ys = np.linspace(0, 10, n)
        gx, gy = np.meshgrid(xs, ys)
        in_a = (gx >= a.x_min) & (gx <= a.x_max) & (gy >= a.y_min) & (gy <= a.y_max)
        in_b = (gx >= b.x_min) & (gx <= b.x_max) & (gy >= b.y_min) & (gy <= b.y_max)
        union = (in_a | in_b).sum()
        if union == 0:
            continue
        approx = (in_a & in_b).sum() / union
        assert iou(a, b) == pytest.approx(approx, abs=0.02)


def test_iou_zero_area_box():
    assert iou(BBox(1, 1, 1, 1), BBox(0, 0, 5, 5)) == 0.0


@given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
@settings(max_examples=100)
def test_iou_symmetry(vals):
    a = BBox(min(vals[0], vals[1]), min(vals[2], vals[3]), max(vals[0], vals[1]), max(vals[2], vals[3]))
    b = BBox(min(vals[4], vals[5]), min(vals[6], vals[7]), max(vals[4], vals[5]), max(vals[6], vals[7]))
    assert iou(a, b) == iou(b, a)


def test_degenerate_box_rejected():
    with pytest.raises(DetectionError):
        BBox(3, 0, 1, 2)


# -- decode ----------------------------------------------------------------------


def _anchors1():
    return AnchorSet(dims=[(1.0, 1.0)])


def test_decode_all_large_negative_empty():
    grid = np.full((1, 6, 13, 13), -40.0)
    assert decode(grid, _anchors1(), 416, 416, 0.25) == []


def test_decode_center_of_first_cell():
    grid = np.full((1, 6, 13, 13), -40.0)
    grid[0, 0:2, 0, 0] = 0.0   # tx = ty = 0 in cell (0, 0)
    grid[0, 4, 0, 0] = 40.0    # conf ~ 1
    grid[0, 5, 0, 0] = 40.0    # class prob ~ 1
    dets = decode(grid, _anchors1(), 416, 416, 0.25)
    assert len(dets) == 1
    box = dets[0].box
    assert (box.x_min + box.x_max) / 2 == pytest.approx(16.0)
    assert (box.y_min + box.y_max) / 2 == pytest.approx(16.0)


def test_decode_single_hot_cell_score_is_sigmoid_product():
    grid = np.full((1, 7, 4, 4), -40.0)
    tc, tcls = 0.7, -0.4
    grid[0, 4, 2, 1] = tc
    grid[0, 5, 2, 1] = tcls
    grid[0, 6, 2, 1] = tcls - 1.0
    anchors = _anchors1()
    dets = decode(grid, anchors, 128, 128, 0.01)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(_sig(tc) * _sig(tcls))
    assert dets[0].class_id == 0


def test_decode_channel_mismatch():
    with pytest.raises(DetectionError):
        decode(np.zeros((1, 7, 4, 4)), AnchorSet(dims=[(1, 1), (2, 2)]), 128, 128, 0.1)


def test_decode_conf_threshold_one_empty():
    grid = np.full((1, 6, 4, 4), 3.0)
    assert decode(grid, _anchors1(), 128, 128, 1.0) == []


def test_decode_centers_stay_in_cell():
    # sigmoid offsets pin the pre-clip center to the cell; with tiny boxes
    # clipping never moves it
    rng = np.random.default_rng(5)
    s, img = 4, 128
    cell = img / s
    for i in range(s):
        for j in range(s):
            g = np.full((1, 6, s, s), -40.0)
            g[0, 0, i, j] = rng.standard_normal() * 3
            g[0, 1, i, j] = rng.standard_normal() * 3
            g[0, 2:4, i, j] = -4.0  # shrink w/h so the box stays inside
            g[0, 4, i, j] = 40.0
            g[0, 5, i, j] = 40.0
            d = decode(g, _anchors1(), img, img, 0.5)[0]
            cx = (d.box.x_min + d.box.x_max) / 2
            cy = (d.box.y_min + d.box.y_max) / 2
            assert j * cell <= cx <= (j + 1) * cell
            assert i * cell <= cy <= (i + 1) * cell


def test_decode_scales_with_image_dims():
    rng = np.random.default_rng(6)
    grid = rng.standard_normal((1, 6, 4, 4))
    small = decode(grid, _anchors1(), 128, 128, 0.01)
    big = decode(grid, _anchors1(), 256, 256, 0.01)
    assert len(small) == len(big)
    for a, b in zip(small, big):
        assert a.class_id == b.class_id
        assert b.box.x_min == pytest.approx(2 * a.box.x_min, abs=1e-6)
        assert b.box.y_max == pytest.approx(2 * a.box.y_max, abs=1e-6)


# -- NMS --------------------------------------------------------------------------


def brute_force_nms(dets, thres):
    """Reference with explicit kept-set semantics: repeatedly take the
    highest-scored remaining detection, discard same-class overlaps."""
    remaining = list(dets)
    remaining.sort(key=lambda d: -d.score)
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [
            d for d in remaining
            if d.class_id != best.class_id or iou(d.box, best.box) <= thres
        ]
    return kept


def _random_dets(rng, n, classes=2):
    out = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 60, 2)
        out.append(
            Detection(
                box=BBox(x0, y0, x0 + rng.uniform(5, 40), y0 + rng.uniform(5, 40)),
                class_id=int(rng.integers(classes)),
                score=float(rng.uniform(0.05, 1.0)),
            )
        )
    return out


def test_nms_single_detection_unchanged():
    d = Detection(box=BBox(0, 0, 10, 10), class_id=0, score=0.7)
    assert nms([d], 0.45) == [d]


def test_nms_identical_boxes_keep_best():
    hi = Detection(box=BBox(0, 0, 10, 10), class_id=0, score=0.9)
    lo = Detection(box=BBox(0, 0, 10, 10), class_id=0, score=0.8)
    assert nms([lo, hi], 0.45) == [hi]


def test_nms_different_classes_do_not_suppress():
    a = Detection(box=BBox(0, 0, 10, 10), class_id=0, score=0.9)
    b = Detection(box=BBox(0, 0, 10, 10), class_id=1, score=0.8)
    assert nms([a, b], 0.45) == [a, b]


def test_nms_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(300):
        dets = _random_dets(rng, int(rng.integers(0, 10)))
        assert nms(dets, 0.45) == brute_force_nms(dets, 0.45)


def test_nms_output_subset_and_no_overlap():
    rng = np.random.default_rng(8)
    for _ in range(50):
        dets = _random_dets(rng, 8)
        out = nms(dets, 0.45)
        assert all(d in dets for d in out)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= 0.45


# -- detect_image -------------------------------------------------------------------


def _tiny_detector():
    anchors = AnchorSet(dims=[(0.7, 0.7), (1.3, 1.3)])
    cfg = NetworkConfig(input_size=96, num_classes=3, num_anchors=2,
                        anchors=anchors, channel_scale=Fraction(1, 8))
    net = build_network(cfg)
    net.init_weights(3)
    return net


def test_detect_image_deterministic():
    net = _tiny_detector()
    rng = np.random.default_rng(9)
    from dcspp_yolo.tensor import Tensor
    x = Tensor(rng.uniform(0, 1, (1, 3, 96, 96)).astype(np.float32))
    a = detect_image(net, x, 0.01, 0.45)
    b = detect_image(net, x, 0.01, 0.45)
    assert a == b


def test_detect_image_conf_one_empty():
    net = _tiny_detector()
    from dcspp_yolo.tensor import Tensor
    x = Tensor.full((1, 3, 96, 96), 0.5)
    assert detect_image(net, x, 1.0, 0.45) == []


def test_format_detections_layout():
    d = Detection(box=BBox(1.25, 2.0, 30.5, 44.125), class_id=2, score=0.875)
    line = format_detections([d]).strip()
    assert line == "2 0.875000 1.250000 2.000000 30.500000 44.125000"
