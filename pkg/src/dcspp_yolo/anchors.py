"""Anchor priors via k-means over box shapes under the 1 - IoU distance.

Boxes are compared co-centered, so only width/height matter. Centroids
are updated as the coordinate-wise mean of their members; iteration
stops at an assignment fixpoint, at max_iter, or as soon as a mean
update would raise the total cost (the mean is not the exact minimizer
of this metric, so that guard keeps the recorded cost non-increasing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class AnchorError(ValueError):
    pass


@dataclass
class AnchorSet:
    """K prior (w, h) pairs in grid units, sorted by area ascending."""

    dims: list[tuple[float, float]]
    seed: int = 0
    iterations: int = 0
    mean_iou: float = 0.0
    cost_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if not self.dims:
            raise AnchorError("an anchor set needs at least one (w, h) pair")
        for w, h in self.dims:
            if w <= 0 or h <= 0:
                raise AnchorError(f"anchor dims must be positive, got ({w}, {h})")

    @property
    def k(self) -> int:
        return len(self.dims)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64)


def shape_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """IoU of two boxes sharing a center; only shapes matter."""
    aw, ah = a
    bw, bh = b
    inter = min(aw, bw) * min(ah, bh)
    union = aw * ah + bw * bh - inter
    return inter / union


def iou_dist(box: tuple[float, float], centroid: tuple[float, float]) -> float:
    """1 - IoU of co-centered boxes; 0 iff the shapes are identical."""
    if box[0] <= 0 or box[1] <= 0 or centroid[0] <= 0 or centroid[1] <= 0:
        raise AnchorError(f"boxes must have positive dims, got {box} vs {centroid}")
    return 1.0 - shape_iou(box, centroid)


def _dist_matrix(boxes: np.ndarray, cents: np.ndarray) -> np.ndarray:
    """(N, K) matrix of 1 - IoU between boxes and centroids."""
    bw, bh = boxes[:, None, 0], boxes[:, None, 1]
    cw, ch = cents[None, :, 0], cents[None, :, 1]
    inter = np.minimum(bw, cw) * np.minimum(bh, ch)
    union = bw * bh + cw * ch - inter
    return 1.0 - inter / union


def _plus_plus_init(boxes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    cents = [boxes[rng.integers(len(boxes))]]
    while len(cents) < k:
        d = _dist_matrix(boxes, np.asarray(cents)).min(axis=1)
        d2 = d * d
        total = d2.sum()
        if total <= 0:
            cents.append(boxes[rng.integers(len(boxes))])
            continue
        cents.append(boxes[rng.choice(len(boxes), p=d2 / total)])
    return np.asarray(cents, dtype=np.float64)


def kmeans_anchors(
    boxes: list[tuple[float, float]] | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
) -> AnchorSet:
    data = np.asarray(boxes, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != 2:
        raise AnchorError(f"boxes must be (w, h) pairs, got array of shape {data.shape}")
    if np.any(data <= 0):
        raise AnchorError("all box dims must be positive")
    if k < 1:
        raise AnchorError(f"k must be >= 1, got {k}")
    if len(data) < k:
        raise AnchorError(f"need at least k={k} boxes, got {len(data)}")

    rng = np.random.default_rng(seed)
    cents = _plus_plus_init(data, k, rng)
    costs: list[float] = []
    prev_assign = None
    prev_cents = cents
    assign = np.zeros(len(data), dtype=np.intp)
    iterations = 0

    for _ in range(max_iter):
        d = _dist_matrix(data, cents)
        assign = d.argmin(axis=1)
        cost = float(d[np.arange(len(data)), assign].sum())
        if costs and cost > costs[-1] + 1e-12:
            # mean update made things worse: keep the previous state
            cents = prev_cents
            d = _dist_matrix(data, cents)
            assign = d.argmin(axis=1)
            break
        costs.append(cost)
        iterations += 1
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        prev_cents = cents.copy()

        new_cents = cents.copy()
        for j in range(k):
            members = data[assign == j]
            if len(members):
                new_cents[j] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the worst-fit box
                worst = int(d[np.arange(len(data)), assign].argmax())
                new_cents[j] = data[worst]
        cents = new_cents

    best_iou = 1.0 - _dist_matrix(data, cents).min(axis=1)
    order = np.argsort(cents[:, 0] * cents[:, 1], kind="stable")
    dims = [(float(w), float(h)) for w, h in cents[order]]
    return AnchorSet(
        dims=dims,
        seed=seed,
        iterations=iterations,
        mean_iou=float(best_iou.mean()),
        cost_history=costs,
    )


def load_boxes_from_labels(label_dir: str | Path, grid_size: int) -> list[tuple[float, float]]:
    """Collect (w, h) pairs from every label file, scaled to grid units.

    Files are visited in lexicographic order so the result is stable.
    """
    root = Path(label_dir)
    files = sorted(root.glob("*.txt"))
    if not files:
        raise AnchorError(f"no label files found in {root}")
    out: list[tuple[float, float]] = []
    for path in files:
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise AnchorError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                w, h = float(parts[3]), float(parts[4])
            except ValueError as exc:
                raise AnchorError(f"{path}:{lineno}: malformed number: {exc}") from exc
            if not (0 < w <= 1 and 0 < h <= 1):
                raise AnchorError(f"{path}:{lineno}: w/h out of (0, 1]: {w}, {h}")
            out.append((w * grid_size, h * grid_size))
    return out


def save_anchors(anchors: AnchorSet, path: str | Path) -> None:
    lines = [f"# mean_iou={anchors.mean_iou:.6f} seed={anchors.seed}"]
    lines += [f"{w:.4f} {h:.4f}" for w, h in anchors.dims]
    Path(path).write_text("\n".join(lines) + "\n")


def load_anchors(path: str | Path) -> AnchorSet:
    text = Path(path).read_text().splitlines()
    mean_iou, seed = 0.0, 0
    dims: list[tuple[float, float]] = []
    for lineno, line in enumerate(text, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("mean_iou="):
                    mean_iou = float(tok.split("=", 1)[1])
                elif tok.startswith("seed="):
                    seed = int(tok.split("=", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise AnchorError(f"{path}:{lineno}: expected 'w h', got {line!r}")
        dims.append((float(parts[0]), float(parts[1])))
    if not dims:
        raise AnchorError(f"{path}: no anchor rows found")
    return AnchorSet(dims=dims, seed=seed, mean_iou=mean_iou)
