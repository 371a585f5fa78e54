"""Composite detection loss and target assignment.

Five weighted terms: no-object confidence, object confidence, coordinate
regression, classification cross-entropy, and an early-training pull of
every box toward its anchor prior. Confidence and intra-cell x/y terms
are squared errors on the post-sigmoid values (so their gradients carry
the sigmoid slope, the delta convention of Darknet-style region losses);
w/h residuals are squared differences in decoded grid units;
classification is binary cross-entropy over independent per-class
sigmoids against a one-hot target, which at the true class reduces to
the negative log probability.

Scaling the squared residual itself by the sigmoid derivative is a
tempting alternative reading, but it is degenerate as a training
objective: the no-object term would then vanish at confidence 1 as well
as 0, and gradient descent actively saturates any slot that wanders
above 2/3. The squared-error-on-activations form keeps zero loss
equivalent to zero residuals.

Targets (which slot owns which truth, and the confidence target for
owned slots) are frozen into the Assignment when it is built, so
`compute_loss` is a pure differentiable function of the raw network
output for a fixed assignment. Gradients are returned with respect to
the raw pre-activation outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, shape_iou
from .detection import BBox, iou


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    noobj: float = 1.0
    obj: float = 5.0
    coord: float = 1.0
    cls: float = 1.0
    prior: float = 0.1
    iou_thres: float = 0.5
    n_prior: int = 12800

    def __post_init__(self) -> None:
        for name in ("noobj", "obj", "coord", "cls", "prior"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be >= 0")
        if not (0 < self.iou_thres < 1):
            raise LossError(f"iou_thres must be in (0, 1), got {self.iou_thres}")


@dataclass(frozen=True)
class TruthBox:
    """Annotated box: center/size normalized to [0, 1], class id from 0."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def corners(self) -> BBox:
        return BBox(self.cx - self.w / 2, self.cy - self.h / 2,
                    self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class PredGrid:
    """Decoded predictions for one image, anchor-major arrays of (S, S, K).

    x_off/y_off are sigmoid intra-cell offsets; w/h are decoded box dims
    in grid units (anchor * exp(raw)); conf is the sigmoid objectness;
    cls is (S, S, K, C) per-class sigmoid probabilities.
    """

    x_off: np.ndarray
    y_off: np.ndarray
    w: np.ndarray
    h: np.ndarray
    conf: np.ndarray
    cls: np.ndarray
    anchor_dims: np.ndarray  # (K, 2) grid units

    @property
    def s(self) -> int:
        return self.x_off.shape[0]

    @property
    def k(self) -> int:
        return self.x_off.shape[2]

    @property
    def c(self) -> int:
        return self.cls.shape[3]

    def box(self, i: int, j: int, k: int) -> BBox:
        """Predicted box in normalized image coordinates."""
        s = self.s
        cx = (j + self.x_off[i, j, k]) / s
        cy = (i + self.y_off[i, j, k]) / s
        w = self.w[i, j, k] / s
        h = self.h[i, j, k] / s
        return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_predictions(raw: np.ndarray, anchors: AnchorSet) -> PredGrid:
    """Split a raw (K*(5+C), S, S) output volume into a PredGrid.

    Channel layout per anchor: tx, ty, tw, th, tc, then C class logits.
    """
    if raw.ndim == 4:
        if raw.shape[0] != 1:
            raise LossError(f"decode_predictions expects one image, got batch of {raw.shape[0]}")
        raw = raw[0]
    channels, s, s2 = raw.shape
    if s != s2:
        raise LossError(f"grid must be square, got {s}x{s2}")
    k = anchors.k
    if channels % k or channels // k < 6:
        raise LossError(
            f"channel count {channels} does not factor as K*(5+C) with K={k} and C >= 1"
        )
    c = channels // k - 5
    vol = raw.astype(np.float64).reshape(k, 5 + c, s, s).transpose(2, 3, 0, 1)  # (S,S,K,5+C)
    dims = anchors.as_array()
    return PredGrid(
        x_off=sigmoid(vol[..., 0]),
        y_off=sigmoid(vol[..., 1]),
        w=dims[None, None, :, 0] * np.exp(vol[..., 2]),
        h=dims[None, None, :, 1] * np.exp(vol[..., 3]),
        conf=sigmoid(vol[..., 4]),
        cls=sigmoid(vol[..., 5:]),
        anchor_dims=dims,
    )


@dataclass
class Assignment:
    """Per-slot indicators plus the targets frozen at assignment time."""

    obj: np.ndarray          # (S, S, K) bool
    noobj: np.ndarray        # (S, S, K) bool
    prior_active: bool
    truth_idx: np.ndarray    # (S, S, K) int, -1 when unassigned
    conf_target: np.ndarray  # (S, S, K) IoU(pred, truth) for owned slots


def _validate_truths(truths: list[TruthBox]) -> None:
    for idx, t in enumerate(truths):
        if not (0.0 <= t.cx <= 1.0 and 0.0 <= t.cy <= 1.0):
            raise LossError(f"truth {idx}: center ({t.cx}, {t.cy}) outside [0, 1]")
        if not (0.0 < t.w <= 1.0 and 0.0 < t.h <= 1.0):
            raise LossError(f"truth {idx}: size ({t.w}, {t.h}) outside (0, 1]")
        if t.class_id < 0:
            raise LossError(f"truth {idx}: negative class id {t.class_id}")


def assign_targets(
    truths: list[TruthBox],
    preds: PredGrid,
    anchors: AnchorSet,
    weights: LossWeights,
    images_seen: int = 0,
) -> Assignment:
    """Choose the responsible slot per truth and the no-object mask.

    Each truth is owned by the slot in its center cell whose anchor shape
    has the highest co-centered IoU with it; that slot's confidence target
    is the IoU of the current predicted box against the truth. Slots whose
    predicted box overlaps any truth above iou_thres are exempted from the
    no-object penalty; everything else is a no-object slot. The prior
    indicator covers all slots while fewer than n_prior images were seen.
    """
    _validate_truths(truths)
    s, k = preds.s, preds.k
    obj = np.zeros((s, s, k), dtype=bool)
    noobj = np.ones((s, s, k), dtype=bool)
    truth_idx = np.full((s, s, k), -1, dtype=np.int64)
    conf_target = np.zeros((s, s, k), dtype=np.float64)

    if truths:
        truth_boxes = [t.corners() for t in truths]
        for i in range(s):
            for j in range(s):
                for a in range(k):
                    pb = preds.box(i, j, a)
                    best = max(iou(pb, tb) for tb in truth_boxes)
                    if best > weights.iou_thres:
                        noobj[i, j, a] = False
        for t_i, t in enumerate(truths):
            j = min(int(t.cx * s), s - 1)
            i = min(int(t.cy * s), s - 1)
            shape = (t.w * s, t.h * s)
            ious = [shape_iou(shape, tuple(anchors.dims[a])) for a in range(k)]
            a_best = int(np.argmax(ious))
            obj[i, j, a_best] = True
            noobj[i, j, a_best] = False
            truth_idx[i, j, a_best] = t_i
            conf_target[i, j, a_best] = iou(preds.box(i, j, a_best), truth_boxes[t_i])

    return Assignment(
        obj=obj,
        noobj=noobj,
        prior_active=images_seen < weights.n_prior,
        truth_idx=truth_idx,
        conf_target=conf_target,
    )


@dataclass
class LossParts:
    noobj: float
    obj: float
    coord: float
    cls: float
    prior: float

    @property
    def total(self) -> float:
        return self.noobj + self.obj + self.coord + self.cls + self.prior

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.total, self.noobj, self.obj, self.coord, self.cls, self.prior)


def _dsig(s: np.ndarray) -> np.ndarray:
    """Sigmoid derivative at the logit, from the post-sigmoid value."""
    return s * (1.0 - s)


def _sq_term_and_grad(residual, s):
    """Value and d/d(raw logit) of (target - sigmoid(raw))**2, treating the
    target as a constant. `residual` is target - s with s the sigmoid value."""
    val = residual ** 2
    grad = -2.0 * residual * _dsig(s)
    return val, grad


def _prior_residuals(preds: PredGrid, dims: np.ndarray):
    rx = 0.5 - preds.x_off
    ry = 0.5 - preds.y_off
    rw = dims[None, None, :, 0] - preds.w
    rh = dims[None, None, :, 1] - preds.h
    return rx, ry, rw, rh


def prior_term(preds: PredGrid, anchors: AnchorSet) -> float:
    """Unweighted sum over all slots of the prior-matching penalty."""
    rx, ry, rw, rh = _prior_residuals(preds, anchors.as_array())
    return float((rx ** 2 + ry ** 2 + rw ** 2 + rh ** 2).sum())


def compute_loss(
    preds: PredGrid,
    truths: list[TruthBox],
    assignment: Assignment,
    weights: LossWeights,
) -> tuple[LossParts, np.ndarray]:
    """Weighted loss parts and the gradient w.r.t. the raw output volume.

    The returned gradient has shape (K*(5+C), S, S) in float64 and matches
    central finite differences of the total for a fixed assignment.
    """
    s, k, c = preds.s, preds.k, preds.c
    lam = weights
    obj = assignment.obj
    noobj = assignment.noobj

    d_tx = np.zeros((s, s, k))
    d_ty = np.zeros((s, s, k))
    d_tw = np.zeros((s, s, k))
    d_th = np.zeros((s, s, k))
    d_tc = np.zeros((s, s, k))
    d_cls = np.zeros((s, s, k, c))

    # confidence: target 0 on no-object slots, stored IoU on owned slots
    conf_res = np.where(obj, assignment.conf_target, 0.0) - preds.conf
    conf_val, conf_grad = _sq_term_and_grad(conf_res, preds.conf)
    slot_lam = np.where(obj, lam.obj, 0.0) + np.where(noobj, lam.noobj, 0.0)
    noobj_part = lam.noobj * float(conf_val[noobj].sum())
    obj_part = lam.obj * float(conf_val[obj].sum())
    d_tc += slot_lam * conf_grad

    # coordinates and classification on owned slots
    coord_part = 0.0
    cls_part = 0.0
    if truths:
        own = np.argwhere(obj)
        for i, j, a in own:
            t = truths[assignment.truth_idx[i, j, a]]
            gx = t.cx * s - j
            gy = t.cy * s - i
            gw = t.w * s
            gh = t.h * s
            vx, gx_grad = _sq_term_and_grad(gx - preds.x_off[i, j, a], preds.x_off[i, j, a])
            vy, gy_grad = _sq_term_and_grad(gy - preds.y_off[i, j, a], preds.y_off[i, j, a])
            rw = gw - preds.w[i, j, a]
            rh = gh - preds.h[i, j, a]
            coord_part += float(vx + vy + rw ** 2 + rh ** 2)
            d_tx[i, j, a] += lam.coord * gx_grad
            d_ty[i, j, a] += lam.coord * gy_grad
            d_tw[i, j, a] += lam.coord * 2.0 * rw * (-preds.w[i, j, a])
            d_th[i, j, a] += lam.coord * 2.0 * rh * (-preds.h[i, j, a])

            p = preds.cls[i, j, a]
            onehot = np.zeros(c)
            onehot[t.class_id] = 1.0
            cls_part += -float(
                np.log(np.maximum(np.where(onehot > 0, p, 1.0 - p), 1e-15)).sum()
            )
            d_cls[i, j, a] += lam.cls * (p - onehot)
    coord_part *= lam.coord
    cls_part *= lam.cls

    # prior pull on every slot during warm-up
    prior_part = 0.0
    if assignment.prior_active and lam.prior > 0:
        rx, ry, rw, rh = _prior_residuals(preds, preds.anchor_dims)
        vx, gx_grad = _sq_term_and_grad(rx, preds.x_off)
        vy, gy_grad = _sq_term_and_grad(ry, preds.y_off)
        prior_part = lam.prior * float((vx + vy + rw ** 2 + rh ** 2).sum())
        d_tx += lam.prior * gx_grad
        d_ty += lam.prior * gy_grad
        d_tw += lam.prior * 2.0 * rw * (-preds.w)
        d_th += lam.prior * 2.0 * rh * (-preds.h)

    parts = LossParts(noobj=noobj_part, obj=obj_part, coord=coord_part,
                      cls=cls_part, prior=prior_part)

    # assemble (S,S,K,5+C) then fold into the raw channel layout
    grad_slots = np.concatenate(
        [
            d_tx[..., None], d_ty[..., None], d_tw[..., None], d_th[..., None],
            d_tc[..., None], d_cls,
        ],
        axis=-1,
    )
    grad = grad_slots.transpose(2, 3, 0, 1).reshape(k * (5 + c), s, s)
    return parts, grad
