"""Network assembly and execution: the laminated conv-pool backbone, the
four-unit dense-connection block, the stride-1 pyramid-pooling block, the
reorg passthrough, and the linear detection convolution.

The graph is a flat list of nodes in topological order. Forward caches
per-node activations when training; backward walks the list in reverse,
summing gradients over fan-out before dispatching each node's local
backward rule.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .anchors import AnchorSet
from .layers import (
    BNParams,
    ConvParams,
    LeakyParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    conv2d_out_hw,
    leaky_backward,
    leaky_forward,
    maxpool_backward,
    maxpool_forward,
    maxpool_out_hw,
    reorg_backward,
    reorg_forward,
)
from .tensor import Tensor

WEIGHT_MAGIC = b"DCSY"
WEIGHT_VERSION = 1
_HEADER_STRUCT = struct.Struct("<7I")
_HEADER_SIZE = 4 + _HEADER_STRUCT.size


class NetworkError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: int = 416
    num_classes: int = 20
    num_anchors: int = 5
    anchors: AnchorSet | None = None
    channel_scale: Fraction = Fraction(1)
    leaky_a: float = 10.0

    def __post_init__(self) -> None:
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise NetworkError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1:
            raise NetworkError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_anchors < 1:
            raise NetworkError(f"num_anchors must be >= 1, got {self.num_anchors}")
        self.channel_scale = Fraction(self.channel_scale)
        if not (0 < self.channel_scale <= 1):
            raise NetworkError(f"channel_scale must be in (0, 1], got {self.channel_scale}")
        if self.anchors is not None and self.anchors.k != self.num_anchors:
            raise NetworkError(
                f"anchor set has {self.anchors.k} entries but num_anchors={self.num_anchors}"
            )

    @property
    def grid_size(self) -> int:
        return self.input_size // 32

    @property
    def detect_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)


def scaled_channels(c: int, scale: Fraction) -> int:
    """Scale a channel count, rounding up to a multiple of 8 with a floor of 8."""
    v = Fraction(c) * scale
    return max(8, int(math.ceil(v / 8)) * 8)


@dataclass
class LayerNode:
    name: str
    kind: str                      # conv | maxpool | route | reorg | detection
    inputs: list[str]
    conv: ConvParams | None = None
    bn: BNParams | None = None
    act: LeakyParams | None = None
    pre_activation: bool = False   # bn -> leaky -> conv instead of conv -> bn -> leaky
    pool_size: int = 0
    pool_stride: int = 0
    pool_pad: tuple[int, int] = (0, 0)
    reorg_stride: int = 0


class Param(NamedTuple):
    name: str
    kind: str        # conv_weight | bias | bn_gamma | bn_beta
    array: np.ndarray


def he_uniform(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    """Fan-in scaled uniform init: U(-s, s) with s = sqrt(2 / (k*k*in_c))."""
    s = math.sqrt(2.0 / (k * k * in_c))
    return rng.uniform(-s, s, size=(out_c, in_c, k, k)).astype(np.float32)


def _conv_node(
    name: str,
    src: str,
    in_c: int,
    out_c: int,
    k: int,
    leaky_a: float,
    *,
    bn: bool = True,
    act: bool = True,
    pre: bool = False,
    kind: str = "conv",
) -> LayerNode:
    conv = ConvParams(
        weights=np.zeros((out_c, in_c, k, k), dtype=np.float32),
        bias=np.zeros(out_c, dtype=np.float32),
        stride=1,
        pad=(k - 1) // 2,
    )
    bn_params = BNParams.identity(in_c if pre else out_c) if bn else None
    return LayerNode(
        name=name,
        kind=kind,
        inputs=[src],
        conv=conv,
        bn=bn_params,
        act=LeakyParams(leaky_a) if act else None,
        pre_activation=pre,
    )


def _spp_window_sizes(fmap: int) -> tuple[int, int, int]:
    """Pooling windows ceil(fmap / n) for pyramid levels n = 3, 2, 1."""
    return math.ceil(fmap / 3), math.ceil(fmap / 2), fmap


def _stride1_pad(size: int) -> tuple[int, int]:
    # total padding size-1 preserves spatial dims at stride 1; symmetric
    # for odd windows, one extra trailing row/col for even ones
    before = (size - 1) // 2
    return before, (size - 1) - before


def build_network(cfg: NetworkConfig) -> "NetworkGraph":
    sc = lambda c: scaled_channels(c, cfg.channel_scale)
    a = cfg.leaky_a
    nodes: list[LayerNode] = []
    prev = "data"
    prev_c = 3

    def conv(name: str, out: int, k: int, src: str | None = None, src_c: int | None = None,
             *, bn: bool = True, act: bool = True, pre: bool = False, kind: str = "conv") -> int:
        nonlocal prev, prev_c
        node = _conv_node(name, src or prev, src_c or prev_c, out, k, a,
                          bn=bn, act=act, pre=pre, kind=kind)
        nodes.append(node)
        if src is None:
            prev, prev_c = name, out
        return out

    def pool(name: str) -> None:
        nonlocal prev
        nodes.append(LayerNode(name=name, kind="maxpool", inputs=[prev],
                               pool_size=2, pool_stride=2, pool_pad=(0, 0)))
        prev = name

    # laminated conv-pool backbone, five 2x downsamples
    conv("conv1", sc(32), 3)
    pool("pool1")
    conv("conv2", sc(64), 3)
    pool("pool2")
    conv("conv3", sc(128), 3)
    conv("conv4", sc(64), 1)
    conv("conv5", sc(128), 3)
    pool("pool3")
    conv("conv6", sc(256), 3)
    conv("conv7", sc(128), 1)
    conv("conv8", sc(256), 3)
    pool("pool4")
    conv("conv9", sc(512), 3)
    conv("conv10", sc(256), 1)
    conv("conv11", sc(512), 3)
    conv("conv12", sc(256), 1)
    conv("conv13", sc(512), 3)
    pool("pool5")

    # dense-connection block: each unit reads the concat of the block input
    # and every earlier unit output, runs bn-leaky-conv3x3 then
    # bn-leaky-conv1x1, and appends its 1x1 output to the running concat
    dc_sources = ["pool5"]
    dc_channels = [sc(512)]
    increments = [sc(256), sc(512), sc(512), sc(512)]
    widths = [sc(512), sc(1024), sc(1024), sc(1024)]
    for u, (inc, wide) in enumerate(zip(increments, widths), start=1):
        if u == 1:
            src, src_c = "pool5", dc_channels[0]
        else:
            src = f"dc_cat{u}"
            src_c = sum(dc_channels)
            nodes.append(LayerNode(name=src, kind="route", inputs=list(dc_sources)))
        conv(f"dc{u}_3x3", wide, 3, src=src, src_c=src_c, pre=True)
        conv(f"dc{u}_1x1", inc, 1, src=f"dc{u}_3x3", src_c=wide, pre=True)
        dc_sources.append(f"dc{u}_1x1")
        dc_channels.append(inc)
    nodes.append(LayerNode(name="dc_out", kind="route", inputs=list(dc_sources)))
    prev, prev_c = "dc_out", sum(dc_channels)

    conv("conv22", sc(1024), 3)
    conv("conv23", sc(512), 1)

    # pyramid pooling: three stride-1 zero-padded max pools over conv23,
    # concatenated with their input
    fmap = cfg.grid_size
    spp_sources = ["conv23"]
    for tag, size in zip(("a", "b", "c"), _spp_window_sizes(fmap)):
        name = f"spp_{tag}"
        nodes.append(LayerNode(name=name, kind="maxpool", inputs=["conv23"],
                               pool_size=size, pool_stride=1, pool_pad=_stride1_pad(size)))
        spp_sources.append(name)
    nodes.append(LayerNode(name="spp_cat", kind="route", inputs=spp_sources))
    prev, prev_c = "spp_cat", 4 * sc(512)

    conv("conv26", sc(512), 1)
    conv("conv27", sc(1024), 3)

    # passthrough: squeeze conv13 with a 1x1, then space-to-depth /2
    conv("pass_conv", sc(64), 1, src="conv13", src_c=sc(512))
    nodes.append(LayerNode(name="reorg", kind="reorg", inputs=["pass_conv"], reorg_stride=2))
    nodes.append(LayerNode(name="head_cat", kind="route", inputs=["conv27", "reorg"]))
    prev, prev_c = "head_cat", sc(1024) + 4 * sc(64)

    conv("conv30", sc(1024), 3)
    conv("conv31", cfg.detect_channels, 1, bn=False, act=False, kind="detection")

    return NetworkGraph(cfg, nodes)


class NetworkGraph:
    """Topologically ordered DAG of layer nodes.

    A graph used only for inference is read-only and safe to share across
    threads; training-mode forward/backward mutates caches and running
    batch-norm statistics and must stay single-threaded per instance.
    """

    def __init__(self, cfg: NetworkConfig, nodes: list[LayerNode]):
        self.cfg = cfg
        self.nodes = nodes
        self._by_name = {n.name: n for n in nodes}
        self._cache: tuple[dict, dict] | None = None

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def conv_nodes(self) -> Iterator[LayerNode]:
        return (n for n in self.nodes if n.conv is not None)

    # -- execution ---------------------------------------------------------

    def forward(self, x: Tensor | np.ndarray, training: bool = False) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        s = self.cfg.input_size
        if arr.ndim != 4 or arr.shape[1:] != (3, s, s):
            raise NetworkError(f"input must be (n, 3, {s}, {s}), got {arr.shape}")
        acts: dict[str, np.ndarray] = {"data": arr}
        caches: dict[str, object] = {}
        for node in self.nodes:
            ins = [acts[name] for name in node.inputs]
            out, cache = self._node_forward(node, ins, training)
            acts[node.name] = out
            if training:
                caches[node.name] = cache
        self._cache = (acts, caches) if training else None
        return Tensor(acts[self.output_name])

    def _node_forward(self, node: LayerNode, ins: list[np.ndarray], training: bool):
        if node.kind in ("conv", "detection"):
            x = ins[0]
            if node.pre_activation:
                bn_out, bn_cache = batchnorm_forward(x, node.bn, training)
                conv_in = leaky_forward(bn_out, node.act)
                y = conv2d_forward(conv_in, node.conv)
                return y, {"bn_in": x, "bn": bn_cache, "act_in": bn_out, "conv_in": conv_in}
            y = conv2d_forward(x, node.conv)
            cache = {"conv_in": x}
            if node.bn is not None:
                z = y
                y, bn_cache = batchnorm_forward(z, node.bn, training)
                cache["bn"] = bn_cache
            if node.act is not None:
                cache["act_in"] = y
                y = leaky_forward(y, node.act)
            return y, cache
        if node.kind == "maxpool":
            y, cache = maxpool_forward(ins[0], node.pool_size, node.pool_stride, node.pool_pad)
            return y, cache
        if node.kind == "route":
            sizes = [a.shape[1] for a in ins]
            return np.concatenate(ins, axis=1), sizes
        if node.kind == "reorg":
            return reorg_forward(ins[0], node.reorg_stride), None
        raise NetworkError(f"unknown node kind {node.kind!r}")

    def backward(self, grad_out: Tensor | np.ndarray) -> dict[str, np.ndarray]:
        """Propagate an output gradient; returns parameter gradients keyed
        '<node>.weights', '<node>.bias', '<node>.gamma', '<node>.beta'."""
        if self._cache is None:
            raise NetworkError("backward requires a preceding forward(training=True)")
        acts, caches = self._cache
        g = grad_out.data if isinstance(grad_out, Tensor) else np.asarray(grad_out)
        out = acts[self.output_name]
        if g.shape != out.shape:
            raise NetworkError(f"grad shape {g.shape} does not match output {out.shape}")

        node_grads: dict[str, np.ndarray] = {self.output_name: g}
        param_grads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            gout = node_grads.pop(node.name, None)
            if gout is None:
                continue
            gins = self._node_backward(node, gout, caches[node.name], param_grads)
            for src, gi in zip(node.inputs, gins):
                if src in node_grads:
                    node_grads[src] = node_grads[src] + gi
                else:
                    node_grads[src] = gi
        return param_grads

    def _node_backward(self, node: LayerNode, gout, cache, param_grads) -> list[np.ndarray]:
        if node.kind in ("conv", "detection"):
            if node.pre_activation:
                g, gw, gb = conv2d_backward(gout, cache["conv_in"], node.conv)
                g = leaky_backward(g, cache["act_in"], node.act)
                g, ggamma, gbeta = batchnorm_backward(g, cache["bn"], node.bn)
                param_grads[f"{node.name}.gamma"] = ggamma
                param_grads[f"{node.name}.beta"] = gbeta
            else:
                g = gout
                if node.act is not None:
                    g = leaky_backward(g, cache["act_in"], node.act)
                if node.bn is not None:
                    g, ggamma, gbeta = batchnorm_backward(g, cache["bn"], node.bn)
                    param_grads[f"{node.name}.gamma"] = ggamma
                    param_grads[f"{node.name}.beta"] = gbeta
                g, gw, gb = conv2d_backward(g, cache["conv_in"], node.conv)
            param_grads[f"{node.name}.weights"] = gw
            param_grads[f"{node.name}.bias"] = gb
            return [g]
        if node.kind == "maxpool":
            return [maxpool_backward(gout, cache)]
        if node.kind == "route":
            sizes = cache
            offsets = np.cumsum(sizes)[:-1]
            return list(np.split(gout, offsets, axis=1))
        if node.kind == "reorg":
            return [reorg_backward(gout, node.reorg_stride)]
        raise NetworkError(f"unknown node kind {node.kind!r}")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Param]:
        out: list[Param] = []
        for node in self.conv_nodes():
            out.append(Param(f"{node.name}.weights", "conv_weight", node.conv.weights))
            out.append(Param(f"{node.name}.bias", "bias", node.conv.bias))
            if node.bn is not None:
                out.append(Param(f"{node.name}.gamma", "bn_gamma", node.bn.gamma))
                out.append(Param(f"{node.name}.beta", "bn_beta", node.bn.beta))
        return out

    def num_parameters(self) -> int:
        return sum(p.array.size for p in self.parameters())

    def init_weights(self, seed: int = 0) -> None:
        """He-style uniform conv weights, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        for node in self.conv_nodes():
            c = node.conv
            c.weights[...] = he_uniform(rng, c.out_channels, c.in_channels, c.kernel)
            c.bias[...] = 0.0
            if node.bn is not None:
                node.bn.gamma[...] = 1.0
                node.bn.beta[...] = 0.0
                node.bn.running_mean[...] = 0.0
                node.bn.running_var[...] = 1.0

    # -- shape inference -----------------------------------------------------

    def infer_shapes(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Per-node output (c, h, w) without running any data through."""
        shapes: dict[str, tuple[int, int, int]] = {
            "data": (3, self.cfg.input_size, self.cfg.input_size)
        }
        out: list[tuple[str, tuple[int, int, int]]] = []
        for node in self.nodes:
            ins = [shapes[name] for name in node.inputs]
            if node.kind in ("conv", "detection"):
                c, h, w = ins[0]
                oh, ow = conv2d_out_hw(h, w, node.conv.kernel, node.conv.stride, node.conv.pad)
                shape = (node.conv.out_channels, oh, ow)
            elif node.kind == "maxpool":
                c, h, w = ins[0]
                oh, ow = maxpool_out_hw(h, w, node.pool_size, node.pool_stride, node.pool_pad)
                shape = (c, oh, ow)
            elif node.kind == "route":
                c = sum(s[0] for s in ins)
                shape = (c, ins[0][1], ins[0][2])
            elif node.kind == "reorg":
                c, h, w = ins[0]
                s = node.reorg_stride
                if h % s or w % s:
                    raise NetworkError(f"{node.name}: {h}x{w} not divisible by reorg stride {s}")
                shape = (c * s * s, h // s, w // s)
            else:
                raise NetworkError(f"unknown node kind {node.kind!r}")
            shapes[node.name] = shape
            out.append((node.name, shape))
        return out

    # -- serialization --------------------------------------------------------

    def _param_arrays(self, node: LayerNode) -> list[np.ndarray]:
        arrs = []
        if node.bn is not None:
            arrs += [node.bn.gamma, node.bn.beta, node.bn.running_mean, node.bn.running_var]
        arrs += [node.conv.bias, node.conv.weights]
        return arrs

    def _serialized_float_count(self) -> int:
        return sum(a.size for n in self.conv_nodes() for a in self._param_arrays(n))

    def save_weights(self, path: str | Path) -> None:
        cfg = self.cfg
        header = WEIGHT_MAGIC + _HEADER_STRUCT.pack(
            WEIGHT_VERSION,
            cfg.input_size,
            cfg.num_classes,
            cfg.num_anchors,
            cfg.channel_scale.numerator,
            cfg.channel_scale.denominator,
            sum(1 for _ in self.conv_nodes()),
        )
        chunks = [header]
        for node in self.conv_nodes():
            for arr in self._param_arrays(node):
                chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    def load_weights(self, path: str | Path) -> None:
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER_SIZE:
            raise NetworkError(f"{path}: truncated weight file ({len(blob)} bytes, header needs {_HEADER_SIZE})")
        if blob[:4] != WEIGHT_MAGIC:
            raise NetworkError(f"{path}: bad magic {blob[:4]!r}, expected {WEIGHT_MAGIC!r}")
        version, in_size, c, k, num, den, n_layers = _HEADER_STRUCT.unpack_from(blob, 4)
        if version != WEIGHT_VERSION:
            raise NetworkError(f"{path}: unsupported weight format version {version}")
        body = len(blob) - _HEADER_SIZE
        if body % 4:
            raise NetworkError(f"{path}: body of {body} bytes is not a whole number of floats")
        found = body // 4
        expected = self._serialized_float_count()
        cfg = self.cfg
        mismatches = []
        if in_size != cfg.input_size:
            mismatches.append(f"input_size {in_size} != {cfg.input_size}")
        if c != cfg.num_classes:
            mismatches.append(f"num_classes {c} != {cfg.num_classes}")
        if k != cfg.num_anchors:
            mismatches.append(f"num_anchors {k} != {cfg.num_anchors}")
        if (num, den) != (cfg.channel_scale.numerator, cfg.channel_scale.denominator):
            mismatches.append(f"channel_scale {num}/{den} != {cfg.channel_scale}")
        if n_layers != sum(1 for _ in self.conv_nodes()):
            mismatches.append(f"conv layer count {n_layers} != {sum(1 for _ in self.conv_nodes())}")
        if mismatches or found != expected:
            detail = "; ".join(mismatches) if mismatches else "same config header"
            raise NetworkError(
                f"{path}: weight file does not match this network ({detail}); "
                f"expected {expected} parameters, file contains {found}"
            )
        offset = _HEADER_SIZE
        for node in self.conv_nodes():
            for arr in self._param_arrays(node):
                nbytes = arr.size * 4
                vals = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset)
                arr[...] = vals.reshape(arr.shape)
                offset += nbytes
        if offset != len(blob):
            raise NetworkError(f"{path}: {len(blob) - offset} trailing bytes after parameters")


class WeightHeader(NamedTuple):
    version: int
    input_size: int
    num_classes: int
    num_anchors: int
    channel_scale: Fraction
    conv_layers: int


def read_weight_header(path: str | Path) -> WeightHeader:
    """Parse just the header so a matching network can be constructed."""
    with open(path, "rb") as f:
        blob = f.read(_HEADER_SIZE)
    if len(blob) < _HEADER_SIZE:
        raise NetworkError(f"{path}: truncated weight file")
    if blob[:4] != WEIGHT_MAGIC:
        raise NetworkError(f"{path}: bad magic {blob[:4]!r}, expected {WEIGHT_MAGIC!r}")
    version, in_size, c, k, num, den, n_layers = _HEADER_STRUCT.unpack_from(blob, 4)
    if version != WEIGHT_VERSION:
        raise NetworkError(f"{path}: unsupported weight format version {version}")
    return WeightHeader(version, in_size, c, k, Fraction(num, den), n_layers)


# Expected per-layer output shapes for the reference 416-input build at
# channel scale 1 (final channel count depends on K and C and is checked
# separately). Used by the shapecheck command and the conformance tests.
REFERENCE_SHAPES_416: list[tuple[str, int, int]] = [
    ("conv1", 32, 416),
    ("pool1", 32, 208),
    ("conv2", 64, 208),
    ("pool2", 64, 104),
    ("conv3", 128, 104),
    ("conv4", 64, 104),
    ("conv5", 128, 104),
    ("pool3", 128, 52),
    ("conv6", 256, 52),
    ("conv7", 128, 52),
    ("conv8", 256, 52),
    ("pool4", 256, 26),
    ("conv9", 512, 26),
    ("conv10", 256, 26),
    ("conv11", 512, 26),
    ("conv12", 256, 26),
    ("conv13", 512, 26),
    ("pool5", 512, 13),
    ("dc_out", 2304, 13),
    ("conv22", 1024, 13),
    ("conv23", 512, 13),
    ("spp_a", 512, 13),
    ("spp_b", 512, 13),
    ("spp_c", 512, 13),
    ("spp_cat", 2048, 13),
    ("conv26", 512, 13),
    ("conv27", 1024, 13),
    ("pass_conv", 64, 26),
    ("reorg", 256, 13),
    ("head_cat", 1280, 13),
    ("conv30", 1024, 13),
]
