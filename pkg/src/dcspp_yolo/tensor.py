"""Dense 4-D tensors in (batch, channel, height, width) layout.

Every value flowing through the network is one of these: 32-bit float
storage by default, with 64-bit accepted so numerical checks can run the
same code paths at higher precision. The layout is fixed as n-major,
then c, h, w; all layers assume it.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

# Refuse allocations past this element count instead of letting numpy
# abort with an opaque MemoryError on a typo'd shape.
_MAX_ELEMENTS = 1 << 31

Shape = tuple[int, int, int, int]


class TensorError(ValueError):
    """Invalid construction or mismatched operands."""


class Tensor:
    """Dense NCHW value.

    Treated as immutable after construction; the only sanctioned in-place
    mutation in the package is the optimizer updating parameter arrays,
    which never pass through this class.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise TensorError(f"tensor must be 4-D (n, c, h, w), got {arr.ndim}-D shape {arr.shape}")
        if min(arr.shape) < 1:
            raise TensorError(f"all dims must be >= 1, got {arr.shape}")
        if arr.size > _MAX_ELEMENTS:
            raise TensorError(f"shape {arr.shape} exceeds the {_MAX_ELEMENTS} element limit")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def full(cls, shape: Shape, fill: float = 0.0, dtype=np.float32) -> "Tensor":
        """New tensor of `shape` with every element equal to `fill`."""
        if len(shape) != 4:
            raise TensorError(f"shape must have 4 components, got {shape}")
        n, c, h, w = (int(d) for d in shape)
        if min(n, c, h, w) < 1:
            raise TensorError(f"all dims must be >= 1, got {shape}")
        if n * c * h * w > _MAX_ELEMENTS:
            raise TensorError(f"shape {shape} exceeds the {_MAX_ELEMENTS} element limit")
        return cls(np.full((n, c, h, w), fill, dtype=dtype))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> Shape:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(n={self.n}, c={self.c}, h={self.h}, w={self.w}, dtype={self.data.dtype})"


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor(a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _check_same_shape("mul", a, b)
    return Tensor(a.data * b.data)


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.data * float(s))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, blocks in argument order."""
    if not parts:
        raise TensorError("concat_channels requires at least one part")
    first = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if (p.n, p.h, p.w) != (first.n, first.h, first.w):
            raise TensorError(
                f"concat_channels: part {i} has (n, h, w)=({p.n}, {p.h}, {p.w}), "
                f"expected ({first.n}, {first.h}, {first.w})"
            )
    if len(parts) == 1:
        return Tensor(first.data)
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


def split_channels(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of concat_channels for the given per-block channel sizes."""
    if sum(sizes) != t.c:
        raise TensorError(f"split sizes {list(sizes)} sum to {sum(sizes)}, tensor has {t.c} channels")
    out, start = [], 0
    for s in sizes:
        out.append(Tensor(t.data[:, start:start + s].copy()))
        start += s
    return out
