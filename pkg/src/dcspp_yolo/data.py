"""Label file parsing, letterbox preprocessing, and annotated rendering."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np

from .detection import BBox, Detection
from .loss import TruthBox
from .tensor import Tensor


class LabelError(ValueError):
    pass


# box edges may poke a hair past the image from 6-decimal label rounding
_EDGE_TOL = 1e-6


def parse_label_line(line: str, where: str) -> TruthBox:
    parts = line.split()
    if len(parts) != 5:
        raise LabelError(f"{where}: expected 'class_id cx cy w h', got {len(parts)} fields")
    try:
        cid = int(parts[0])
        cx, cy, w, h = (float(v) for v in parts[1:])
    except ValueError as exc:
        raise LabelError(f"{where}: malformed value: {exc}") from exc
    if cid < 0:
        raise LabelError(f"{where}: class id must be >= 0, got {cid}")
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise LabelError(f"{where}: center ({cx}, {cy}) out of [0, 1]")
    if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
        raise LabelError(f"{where}: size ({w}, {h}) out of (0, 1]")
    if (
        cx - w / 2 < -_EDGE_TOL
        or cy - h / 2 < -_EDGE_TOL
        or cx + w / 2 > 1 + _EDGE_TOL
        or cy + h / 2 > 1 + _EDGE_TOL
    ):
        raise LabelError(f"{where}: box ({cx}, {cy}, {w}, {h}) extends outside the image")
    return TruthBox(cx=cx, cy=cy, w=w, h=h, class_id=cid)


def read_label_file(path: str | Path) -> list[TruthBox]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        out.append(parse_label_line(line, f"{path}:{lineno}"))
    return out


def write_label_file(path: str | Path, truths: list[TruthBox]) -> None:
    lines = [f"{t.class_id} {t.cx:.6f} {t.cy:.6f} {t.w:.6f} {t.h:.6f}" for t in truths]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_class_names(path: str | Path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not names:
        raise LabelError(f"{path}: empty class list")
    return names


def write_class_names(path: str | Path, names: list[str]) -> None:
    Path(path).write_text("\n".join(names) + "\n")


# ---------------------------------------------------------------------------
# letterboxing


class LetterboxParams(NamedTuple):
    scale: float
    pad_x: int
    pad_y: int
    new_w: int
    new_h: int


def letterbox_params(w: int, h: int, target: int) -> LetterboxParams:
    scale = min(target / w, target / h)
    new_w = max(1, round(w * scale))
    new_h = max(1, round(h * scale))
    return LetterboxParams(scale, (target - new_w) // 2, (target - new_h) // 2, new_w, new_h)


def _resize_nearest(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(new_h) + 0.5) * h / new_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(new_w) + 0.5) * w / new_w, w - 1).astype(np.intp)
    return img[rows][:, cols]


def image_to_tensor(img: np.ndarray, target: int) -> Tensor:
    """Aspect-preserving resize onto a target x target gray canvas.

    Output is (1, 3, target, target) float32 in [0, 1] with channel planes
    R, G, B; padding bands hold exactly 0.5.
    """
    if target % 32 != 0:
        raise LabelError(f"target size must be a multiple of 32, got {target}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise LabelError(f"image must be (h, w, 3), got {img.shape}")
    h, w = img.shape[:2]
    p = letterbox_params(w, h, target)
    resized = _resize_nearest(img, p.new_h, p.new_w).astype(np.float32) / 255.0
    canvas = np.full((target, target, 3), 0.5, dtype=np.float32)
    canvas[p.pad_y:p.pad_y + p.new_h, p.pad_x:p.pad_x + p.new_w] = resized
    return Tensor(canvas.transpose(2, 0, 1)[None])


def unletterbox_box(box: BBox, orig_w: int, orig_h: int, target: int) -> BBox:
    """Map a box from network-input pixels back to original-image pixels."""
    p = letterbox_params(orig_w, orig_h, target)
    x0 = (box.x_min - p.pad_x) / p.scale
    x1 = (box.x_max - p.pad_x) / p.scale
    y0 = (box.y_min - p.pad_y) / p.scale
    y1 = (box.y_max - p.pad_y) / p.scale
    x0, x1 = (min(max(v, 0.0), orig_w) for v in (x0, x1))
    y0, y1 = (min(max(v, 0.0), orig_h) for v in (y0, y1))
    return BBox(x0, y0, x1, y1)


def truths_to_pixel_boxes(truths: list[TruthBox], w: int, h: int) -> list[tuple[int, BBox]]:
    out = []
    for t in truths:
        b = t.corners()
        out.append(
            (
                t.class_id,
                BBox(
                    max(b.x_min, 0.0) * w,
                    max(b.y_min, 0.0) * h,
                    min(b.x_max, 1.0) * w,
                    min(b.y_max, 1.0) * h,
                ),
            )
        )
    return out


# ---------------------------------------------------------------------------
# rendering


def class_color(class_id: int) -> tuple[int, int, int]:
    """Deterministic bright-ish color per class id."""
    x = (class_id * 2654435761 + 0x9E3779B9) & 0xFFFFFFFF
    return (64 + (x & 0x7F), 64 + ((x >> 8) & 0x7F), 64 + ((x >> 16) & 0x7F))


def render_detections(
    img: np.ndarray, dets: list[Detection], class_names: list[str] | None = None
) -> np.ndarray:
    """Copy of the image with 2-pixel box outlines per detection."""
    out = img.copy()
    h, w = out.shape[:2]
    for d in dets:
        color = np.array(class_color(d.class_id), dtype=np.uint8)
        x0 = int(max(0, min(round(d.box.x_min), w - 1)))
        x1 = int(max(0, min(round(d.box.x_max), w - 1)))
        y0 = int(max(0, min(round(d.box.y_min), h - 1)))
        y1 = int(max(0, min(round(d.box.y_max), h - 1)))
        for t in range(2):
            yt = min(y0 + t, h - 1)
            yb = max(y1 - t, 0)
            out[yt, x0:x1 + 1] = color
            out[yb, x0:x1 + 1] = color
            xl = min(x0 + t, w - 1)
            xr = max(x1 - t, 0)
            out[y0:y1 + 1, xl] = color
            out[y0:y1 + 1, xr] = color
    return out
