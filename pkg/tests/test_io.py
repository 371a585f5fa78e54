import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcspp_yolo.data import (
    LabelError,
    class_color,
    image_to_tensor,
    letterbox_params,
    parse_label_line,
    read_label_file,
    render_detections,
    unletterbox_box,
    write_label_file,
)
from dcspp_yolo.detection import BBox, Detection
from dcspp_yolo.loss import TruthBox
from dcspp_yolo.ppm import PPMError, ppm_read, ppm_write


# -- PPM codec -----------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (7, 11, 3)).astype(np.uint8)
    path = tmp_path / "img.ppm"
    ppm_write(path, img)
    assert np.array_equal(ppm_read(path), img)


def test_ppm_exact_byte_layout(tmp_path):
    img = np.array([[[1, 2, 3], [4, 5, 6]]], dtype=np.uint8)  # 2x1
    path = tmp_path / "img.ppm"
    ppm_write(path, img)
    assert path.read_bytes() == b"P6\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])


def test_ppm_rejects_ascii(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P3\n1 1\n255\n1 2 3\n")
    with pytest.raises(PPMError, match="ASCII PPM unsupported"):
        ppm_read(path)


def test_ppm_rejects_other_magic(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P5\n1 1\n255\nx")
    with pytest.raises(PPMError, match="not a PPM"):
        ppm_read(path)


def test_ppm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PPMError, match="maxval"):
        ppm_read(path)


def test_ppm_short_payload(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PPMError, match="short"):
        ppm_read(path)


@given(st.integers(0, 2 ** 31), st.integers(1, 12), st.integers(1, 12))
@settings(max_examples=40, deadline=None)
def test_ppm_round_trip_property(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.ppm"
        ppm_write(path, img)
        assert np.array_equal(ppm_read(path), img)


# -- labels -------------------------------------------------------------------------


def test_label_round_trip(tmp_path):
    truths = [TruthBox(cx=0.5, cy=0.25, w=0.25, h=0.125, class_id=2)]
    path = tmp_path / "a.txt"
    write_label_file(path, truths)
    assert read_label_file(path) == truths


def test_label_rejects_out_of_range_with_location(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 0.5 0.5 0.2 0.2\n1 1.5 0.5 0.2 0.2\n")
    with pytest.raises(LabelError, match=r"bad\.txt:2"):
        read_label_file(path)


def test_label_rejects_box_past_edge():
    with pytest.raises(LabelError, match="outside the image"):
        parse_label_line("0 0.95 0.5 0.2 0.2", "here")


def test_label_rejects_malformed():
    with pytest.raises(LabelError):
        parse_label_line("0 0.5 oops 0.2 0.2", "here")


# -- letterboxing --------------------------------------------------------------------


def test_letterbox_square_matching_size_is_identity():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (96, 96, 3)).astype(np.uint8)
    t = image_to_tensor(img, 96)
    assert t.shape == (1, 3, 96, 96)
    assert np.allclose(t.data[0].transpose(1, 2, 0), img.astype(np.float32) / 255.0)


def test_letterbox_wide_image_pads_quarters():
    img = np.full((48, 96, 3), 255, dtype=np.uint8)  # 2:1
    t = image_to_tensor(img, 96).data[0]
    assert np.all(t[:, :24, :] == 0.5)
    assert np.all(t[:, 72:, :] == 0.5)
    assert np.all(t[:, 24:72, :] == 1.0)


def test_letterbox_all_white_region_is_one():
    img = np.full((96, 96, 3), 255, dtype=np.uint8)
    t = image_to_tensor(img, 96).data
    assert np.all(t == 1.0)


def test_letterbox_rejects_bad_target():
    with pytest.raises(LabelError):
        image_to_tensor(np.zeros((10, 10, 3), dtype=np.uint8), 100)


def test_unletterbox_inverts_mapping():
    w, h, target = 200, 100, 96
    p = letterbox_params(w, h, target)
    # a box in original pixels, mapped forward then back
    x0, y0, x1, y1 = 20.0, 30.0, 120.0, 80.0
    fwd = BBox(x0 * p.scale + p.pad_x, y0 * p.scale + p.pad_y,
               x1 * p.scale + p.pad_x, y1 * p.scale + p.pad_y)
    back = unletterbox_box(fwd, w, h, target)
    assert back.x_min == pytest.approx(x0, abs=1e-6)
    assert back.y_max == pytest.approx(y1, abs=1e-6)


# -- rendering ------------------------------------------------------------------------


def test_render_no_detections_unchanged():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
    assert np.array_equal(render_detections(img, []), img)


def test_render_touches_only_outline():
    img = np.zeros((40, 40, 3), dtype=np.uint8)
    det = Detection(box=BBox(10, 10, 30, 30), class_id=1, score=0.9)
    out = render_detections(img, [det])
    changed = np.argwhere((out != img).any(axis=2))
    assert len(changed)
    for y, x in changed:
        on_x_band = 10 <= x <= 11 or 29 <= x <= 30
        on_y_band = 10 <= y <= 11 or 29 <= y <= 30
        assert (on_x_band and 10 <= y <= 30) or (on_y_band and 10 <= x <= 30)


def test_render_deterministic():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
    det = Detection(box=BBox(2, 2, 20, 20), class_id=4, score=0.5)
    assert np.array_equal(render_detections(img, [det]), render_detections(img, [det]))


def test_class_colors_distinct_for_small_ids():
    colors = {class_color(i) for i in range(10)}
    assert len(colors) == 10
