import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcspp_yolo import tensor
from dcspp_yolo.tensor import Tensor, TensorError


def test_full_zero_fill():
    t = Tensor.full((1, 1, 2, 2), 0.0)
    assert t.shape == (1, 1, 2, 2)
    assert np.all(t.data == 0.0)


def test_full_element_count():
    t = Tensor.full((1, 3, 416, 416), 0.5)
    assert t.data.size == 519168
    assert np.all(t.data == 0.5)


def test_zero_dimension_rejected():
    with pytest.raises(TensorError):
        Tensor.full((2, 0, 1, 1), 0.0)


def test_oversized_rejected():
    with pytest.raises(TensorError):
        Tensor.full((1 << 20, 1 << 20, 2, 2), 0.0)


def test_wrong_rank_rejected():
    with pytest.raises(TensorError):
        Tensor(np.zeros((2, 3)))


def test_elementwise_mul():
    a = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    b = Tensor(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))
    assert tensor.mul(a, b).data.tolist() == [[[[3.0, 8.0]]]]


def test_add_zero_is_identity():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    z = Tensor.full((2, 3, 4, 5), 0.0)
    assert np.array_equal(tensor.add(a, z).data, a.data)


def test_scale_one_is_identity():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
    assert np.array_equal(tensor.scale(a, 1.0).data, a.data)


def test_shape_mismatch_names_both_shapes():
    a = Tensor.full((1, 2, 3, 3))
    b = Tensor.full((1, 3, 3, 3))
    with pytest.raises(TensorError, match=r"\(1, 2, 3, 3\).*\(1, 3, 3, 3\)"):
        tensor.add(a, b)


def test_concat_channels_dc_block_total():
    parts = [Tensor.full((1, c, 13, 13), float(i)) for i, c in enumerate((512, 256, 512, 512, 512))]
    out = tensor.concat_channels(parts)
    assert out.shape == (1, 2304, 13, 13)
    # blocks appear in argument order, bit-identical
    start = 0
    for i, p in enumerate(parts):
        assert np.array_equal(out.data[:, start:start + p.c], p.data)
        start += p.c


def test_concat_channels_head():
    out = tensor.concat_channels([Tensor.full((1, 1024, 13, 13)), Tensor.full((1, 256, 13, 13))])
    assert out.shape == (1, 1280, 13, 13)


def test_concat_single_part_identity():
    a = Tensor(np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4))
    assert np.array_equal(tensor.concat_channels([a]).data, a.data)


def test_concat_spatial_mismatch():
    with pytest.raises(TensorError):
        tensor.concat_channels([Tensor.full((1, 2, 3, 3)), Tensor.full((1, 2, 4, 3))])


def test_concat_split_round_trip():
    rng = np.random.default_rng(2)
    parts = [Tensor(rng.standard_normal((2, c, 5, 5)).astype(np.float32)) for c in (3, 1, 4)]
    back = tensor.split_channels(tensor.concat_channels(parts), [3, 1, 4])
    for orig, rec in zip(parts, back):
        assert np.array_equal(orig.data, rec.data)


@given(st.integers(0, 2 ** 31), st.permutations(range(4)))
@settings(max_examples=50, deadline=None)
def test_elementwise_is_pointwise_under_batch_permutation(seed, perm):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    out = tensor.mul(Tensor(a), Tensor(b)).data
    out_perm = tensor.mul(Tensor(a[list(perm)]), Tensor(b[list(perm)])).data
    assert np.array_equal(out_perm, out[list(perm)])


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_ops_keep_finite_inputs_finite(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1e3, 1e3, (2, 3, 4, 4)).astype(np.float32))
    b = Tensor(rng.uniform(-1e3, 1e3, (2, 3, 4, 4)).astype(np.float32))
    for out in (tensor.add(a, b), tensor.sub(a, b), tensor.mul(a, b), tensor.scale(a, 2.5)):
        assert np.isfinite(out.data).all()
