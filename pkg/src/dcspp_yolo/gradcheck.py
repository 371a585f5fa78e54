"""Central finite-difference verification of every analytic backward pass.

All checks run in float64 with step 1e-3 and report the max absolute
gradient error relative to the largest gradient magnitude involved.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Callable

import numpy as np

from . import layers
from .anchors import AnchorSet
from .loss import LossWeights, TruthBox, assign_targets, compute_loss, decode_predictions
from .network import NetworkConfig, build_network

STEP = 1e-3


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude present."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi_w = float(flat[i])  # storage may quantize the step
        hi = f(x)
        flat[i] = orig - step
        lo_w = float(flat[i])
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (hi_w - lo_w)
    return g


def check_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    p = layers.ConvParams(
        weights=rng.standard_normal((4, 3, 3, 3)),
        bias=rng.standard_normal(4),
        stride=1,
        pad=1,
    )
    proj = rng.standard_normal(layers.conv2d_forward(x, p).shape)

    def f_x(v):
        return float((layers.conv2d_forward(v, p) * proj).sum())

    gx, gw, gb = layers.conv2d_backward(proj, x, p)
    errs = [max_rel_err(gx, numeric_grad(f_x, x))]

    def f_w(v):
        return float((layers.conv2d_forward(x, layers.ConvParams(v, p.bias, p.stride, p.pad)) * proj).sum())

    errs.append(max_rel_err(gw, numeric_grad(f_w, p.weights)))

    def f_b(v):
        return float((layers.conv2d_forward(x, layers.ConvParams(p.weights, v, p.stride, p.pad)) * proj).sum())

    errs.append(max_rel_err(gb, numeric_grad(f_b, p.bias)))
    return max(errs)


def check_conv_strided(seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    p = layers.ConvParams(
        weights=rng.standard_normal((3, 2, 3, 3)), bias=rng.standard_normal(3), stride=2, pad=1
    )
    proj = rng.standard_normal(layers.conv2d_forward(x, p).shape)
    gx, gw, gb = layers.conv2d_backward(proj, x, p)

    def f_x(v):
        return float((layers.conv2d_forward(v, p) * proj).sum())

    return max_rel_err(gx, numeric_grad(f_x, x))


def check_batchnorm(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 5))
    p = layers.BNParams(
        gamma=rng.uniform(0.5, 1.5, 4),
        beta=rng.standard_normal(4),
        running_mean=np.zeros(4),
        running_var=np.ones(4),
    )
    y, cache = layers.batchnorm_forward(x, p, training=True)
    proj = rng.standard_normal(y.shape)
    gx, ggamma, gbeta = layers.batchnorm_backward(proj, cache, p)

    def run(xv, gammav, betav):
        pv = layers.BNParams(gammav, betav, np.zeros(4), np.ones(4))
        out, _ = layers.batchnorm_forward(xv, pv, training=True)
        return float((out * proj).sum())

    errs = [
        max_rel_err(gx, numeric_grad(lambda v: run(v, p.gamma, p.beta), x)),
        max_rel_err(ggamma, numeric_grad(lambda v: run(x, v, p.beta), p.gamma.copy())),
        max_rel_err(gbeta, numeric_grad(lambda v: run(x, p.gamma, v), p.beta.copy())),
    ]
    return max(errs)


def check_leaky(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    # keep sample points away from the kink at 0 where the derivative jumps
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.05] += 0.1
    p = layers.LeakyParams(10.0)
    proj = rng.standard_normal(x.shape)
    gx = layers.leaky_backward(proj, x, p)

    def f(v):
        return float((layers.leaky_forward(v, p) * proj).sum())

    return max_rel_err(gx, numeric_grad(f, x))


def check_maxpool(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    # well-separated values keep the argmax stable under the probe step
    x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float64) * 0.1).reshape(2, 2, 6, 6)
    errs = []
    for size, stride, pad in ((2, 2, 0), (3, 1, (1, 1)), (5, 1, (2, 2))):
        y, cache = layers.maxpool_forward(x, size, stride, pad)
        proj = rng.standard_normal(y.shape)
        gx = layers.maxpool_backward(proj, cache)

        def f(v):
            out, _ = layers.maxpool_forward(v, size, stride, pad)
            return float((out * proj).sum())

        errs.append(max_rel_err(gx, numeric_grad(f, x.copy())))
    return max(errs)


def check_reorg(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    proj = rng.standard_normal((2, 12, 2, 2))
    gx = layers.reorg_backward(proj, 2)

    def f(v):
        return float((layers.reorg_forward(v, 2) * proj).sum())

    return max_rel_err(gx, numeric_grad(f, x))


NETWORK_STEP = 1e-5


def check_network(seed: int = 0, samples: int = 20) -> float:
    """End-to-end spot check on a scale-reduced network.

    Samples parameter entries uniformly across the whole graph and
    compares backward against central differences of a fixed random
    projection of the output. Input 64 keeps the 1x1-head pathology away:
    at input 32 the deepest batch norms see only batch-many samples and
    their statistics make finite differences meaningless. Probes use a
    small step with the actually-stored (float32-quantized) step as the
    denominator. Biases under batch norm are excluded: normalization
    cancels per-channel shifts exactly, so both gradients are zero and
    their ratio is pure noise.
    """
    cfg = NetworkConfig(input_size=64, num_classes=2, num_anchors=2,
                        channel_scale=Fraction(1, 8))
    net = build_network(cfg)
    net.init_weights(seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 3, 64, 64))

    out = net.forward(x, training=True)
    proj = rng.standard_normal(out.shape)
    grads = net.backward(proj)

    bn_conv_biases = {
        f"{node.name}.bias" for node in net.conv_nodes() if node.bn is not None
    }
    candidates = [p for p in net.parameters() if p.name not in bn_conv_biases]
    weights = np.array([p.array.size for p in candidates], dtype=np.float64)
    weights /= weights.sum()

    def loss() -> float:
        return float((net.forward(x, training=True).data * proj).sum())

    worst = 0.0
    for _ in range(samples):
        p = candidates[rng.choice(len(candidates), p=weights)]
        flat = p.array.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = float(flat[i])
        flat[i] = orig + NETWORK_STEP
        hi_w = float(flat[i])
        hi = loss()
        flat[i] = orig - NETWORK_STEP
        lo_w = float(flat[i])
        lo = loss()
        flat[i] = orig
        numeric = (hi - lo) / (hi_w - lo_w)
        analytic = float(grads[p.name].reshape(-1)[i])
        scale = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def check_loss(seed: int = 0) -> float:
    """Finite differences through the full loss on a 2x2-grid instance."""
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(dims=[(0.8, 0.9), (1.6, 1.2)])
    k, c, s = 2, 2, 2
    raw = rng.standard_normal((k * (5 + c), s, s))
    truths = [
        TruthBox(cx=0.3, cy=0.28, w=0.31, h=0.42, class_id=0),
        TruthBox(cx=0.74, cy=0.8, w=0.2, h=0.23, class_id=1),
    ]
    weights = LossWeights(n_prior=10)
    preds = decode_predictions(raw, anchors)
    asg = assign_targets(truths, preds, anchors, weights, images_seen=0)
    _, grad = compute_loss(preds, truths, asg, weights)

    def f(v):
        parts, _ = compute_loss(decode_predictions(v, anchors), truths, asg, weights)
        return parts.total

    return max_rel_err(grad, numeric_grad(f, raw))


LAYER_CHECKS: dict[str, Callable[[], float]] = {
    "conv": check_conv,
    "conv_strided": check_conv_strided,
    "batchnorm": check_batchnorm,
    "leaky": check_leaky,
    "maxpool": check_maxpool,
    "reorg": check_reorg,
}


def run_all() -> dict[str, float]:
    results = {name: fn() for name, fn in LAYER_CHECKS.items()}
    results["network"] = check_network()
    results["loss"] = check_loss()
    return results
