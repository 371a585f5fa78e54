"""Inference post-processing: grid decode, confidence thresholding, and
class-aware non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .tensor import Tensor


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise DetectionError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 by convention when the union is empty."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode(
    grid: Tensor | np.ndarray,
    anchors: AnchorSet,
    img_w: float,
    img_h: float,
    conf_thres: float,
) -> list[Detection]:
    """Turn one (1, K*(5+C), S, S) output volume into scored detections.

    Per slot the box center is (cell + sigmoid offset) scaled to pixels,
    dims are anchor * exp(raw) scaled to pixels, and the score is the
    objectness sigmoid times the best per-class sigmoid. Boxes are
    clipped to the image; slots at or below conf_thres are dropped.
    """
    arr = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DetectionError(f"decode expects a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    channels, s, s2 = arr.shape
    if s != s2:
        raise DetectionError(f"grid must be square, got {s}x{s2}")
    k = anchors.k
    if channels % k or channels // k < 6:
        raise DetectionError(
            f"channel count {channels} does not factor as K*(5+C) with K={k} and C >= 1"
        )
    c = channels // k - 5
    vol = arr.astype(np.float64).reshape(k, 5 + c, s, s)
    dims = anchors.as_array()

    cell_w = img_w / s
    cell_h = img_h / s
    dets: list[Detection] = []
    for a in range(k):
        sx = _sigmoid(vol[a, 0])
        sy = _sigmoid(vol[a, 1])
        bw = dims[a, 0] * np.exp(vol[a, 2]) * cell_w
        bh = dims[a, 1] * np.exp(vol[a, 3]) * cell_h
        conf = _sigmoid(vol[a, 4])
        cls = _sigmoid(vol[a, 5:])
        best_cls = cls.argmax(axis=0)
        best_p = np.take_along_axis(cls, best_cls[None], axis=0)[0]
        score = conf * best_p
        for i in range(s):
            for j in range(s):
                if score[i, j] <= conf_thres:
                    continue
                bx = (j + sx[i, j]) * cell_w
                by = (i + sy[i, j]) * cell_h
                x0 = min(max(bx - bw[i, j] / 2, 0.0), img_w)
                x1 = min(max(bx + bw[i, j] / 2, 0.0), img_w)
                y0 = min(max(by - bh[i, j] / 2, 0.0), img_h)
                y1 = min(max(by + bh[i, j] / 2, 0.0), img_h)
                dets.append(
                    Detection(
                        box=BBox(x0, y0, x1, y1),
                        class_id=int(best_cls[i, j]),
                        score=float(score[i, j]),
                    )
                )
    dets.sort(key=lambda d: -d.score)
    return dets


def nms(dets: list[Detection], nms_thres: float) -> list[Detection]:
    """Greedy class-aware suppression.

    Per class, in descending score order, keep a detection unless it
    overlaps an already kept same-class detection above nms_thres.
    Output is sorted by descending score (stable for ties).
    """
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for cid in sorted(by_class):
        group = sorted(by_class[cid], key=lambda d: -d.score)
        chosen: list[Detection] = []
        for d in group:
            if all(iou(d.box, kept_d.box) <= nms_thres for kept_d in chosen):
                chosen.append(d)
        kept.extend(chosen)
    kept.sort(key=lambda d: -d.score)
    return kept


def detect_image(
    net,
    image: Tensor,
    conf_thres: float = 0.25,
    nms_thres: float = 0.45,
) -> list[Detection]:
    """Forward, decode, and suppress for one network-sized input image.

    Pixel coordinates are in the network input space; callers that
    letterboxed the original image undo that mapping themselves.
    """
    if net.cfg.anchors is None:
        raise DetectionError("network config has no anchor set; detection needs one")
    out = net.forward(image, training=False)
    size = float(net.cfg.input_size)
    dets = decode(out, net.cfg.anchors, size, size, conf_thres)
    return nms(dets, nms_thres)


def format_detections(dets: list[Detection]) -> str:
    """One 'class_id score x_min y_min x_max y_max' line per detection."""
    lines = [
        f"{d.class_id} {d.score:.6f} {d.box.x_min:.6f} {d.box.y_min:.6f} "
        f"{d.box.x_max:.6f} {d.box.y_max:.6f}"
        for d in dets
    ]
    return "\n".join(lines) + ("\n" if lines else "")
