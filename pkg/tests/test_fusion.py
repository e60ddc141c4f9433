import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgst import ops
from mgst.fusion import ConcatFusion, FusionParams, export_mask, fuse, fuse_with_mask, mask_from
from mgst.tensor import Tensor

SHAPE = (4, 3, 2, 2)


def params(seed=0, channels=4, **kw):
    return FusionParams(channels, np.random.default_rng(seed), **kw)


def pair(rng, shape=SHAPE, dtype=np.float32):
    return (Tensor(rng.standard_normal(shape).astype(dtype)), Tensor(rng.standard_normal(shape).astype(dtype)))


def test_equal_inputs_return_input(rng):
    s = Tensor(rng.standard_normal(SHAPE).astype(np.float32))
    p = params()
    p.W.data *= 50
    np.testing.assert_array_equal(fuse(s, Tensor(s.data.copy()), p).data, s.data)


def test_zero_weight_averages(rng):
    s, t = pair(rng)
    p = params()
    p.W.data[:] = 0
    np.testing.assert_allclose(fuse(s, t, p).data, (s.data + t.data) / 2, rtol=1e-6, atol=1e-7)
    assert np.all(export_mask(t, p).data == 0.5)


def test_scalar_example():
    p = params(channels=1)
    t_value = 2.0
    p.W.data = np.full((1, 1, 1, 1, 1), np.log(3.0) / t_value)
    out = fuse(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.full((1, 1, 1, 1), t_value)), p)
    assert out.data.item() == pytest.approx(1.75, abs=1e-12)


def test_mask_bounded_and_shaped(rng):
    p = params()
    t = Tensor((rng.standard_normal(SHAPE) * 5).astype(np.float32))
    m = export_mask(t, p).data
    assert m.shape == SHAPE
    assert np.all((m > 0) & (m < 1))


def test_mask_monotone_in_logit():
    p = params(channels=2)
    p.W.data = np.eye(2).reshape(2, 2, 1, 1, 1)
    t = np.zeros((2, 1, 2, 2))
    before = export_mask(Tensor(t), p).data
    t[1, 0, 1, 0] = 0.5
    after = export_mask(Tensor(t), p).data
    assert after[1, 0, 1, 0] > before[1, 0, 1, 0]
    changed = np.ones(after.shape, bool)
    changed[1, 0, 1, 0] = False
    np.testing.assert_array_equal(after[changed], before[changed])


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ops.ShapeError):
        fuse(Tensor(np.zeros(SHAPE)), Tensor(np.zeros((4, 3, 2, 3))), params())


def test_batched_and_single_agree(rng):
    s, t = pair(rng, (3,) + SHAPE)
    p = params()
    batched = fuse(s, t, p).data
    for i in range(3):
        np.testing.assert_allclose(fuse(Tensor(s.data[i]), Tensor(t.data[i]), p).data, batched[i], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), gain=st.floats(0.0, 20.0))
def test_convexity(seed, gain):
    rng = np.random.default_rng(seed)
    s, t = pair(rng)
    p = params(seed % 7)
    p.W.data = (p.W.data * gain).astype(np.float32)
    f = fuse(s, t, p).data
    lo, hi = np.minimum(s.data, t.data), np.maximum(s.data, t.data)
    assert np.all(f >= lo) and np.all(f <= hi)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_swapped_arguments_same_mask_sum_to_total(seed):
    rng = np.random.default_rng(seed)
    s, t = pair(rng, dtype=np.float64)
    m = Tensor(rng.uniform(0, 1, SHAPE))
    total = fuse_with_mask(s, t, m).data + fuse_with_mask(t, s, m).data
    np.testing.assert_allclose(total, s.data + t.data, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_complementary_masks_sum_to_total(seed):
    rng = np.random.default_rng(seed)
    s, t = pair(rng, dtype=np.float64)
    p = params(seed % 5)
    m = mask_from(Tensor(t.data[None]), p).data[0]
    total = fuse_with_mask(s, t, Tensor(m)).data + fuse_with_mask(s, t, Tensor(1 - m)).data
    np.testing.assert_allclose(total, s.data + t.data, rtol=1e-12, atol=1e-12)


def test_complementary_mask_with_swapped_arguments_doubles():
    # swapping the arguments and complementing the mask reproduces F, so the sum is 2F rather than S + T
    s, t, m = np.array([1.0]), np.array([3.0]), np.array([0.25])
    f1 = fuse_with_mask(Tensor(s), Tensor(t), Tensor(m)).data
    f2 = fuse_with_mask(Tensor(t), Tensor(s), Tensor(1 - m)).data
    np.testing.assert_array_equal(f1, f2)
    assert f1 + f2 != s + t


def test_single_channel_mask_broadcasts(rng):
    p = params(mask_channels="single")
    s, t = pair(rng)
    m = export_mask(t, p).data
    assert m.shape == (1,) + SHAPE[1:]
    np.testing.assert_allclose(fuse(s, t, p).data, s.data + m * (t.data - s.data), rtol=1e-5, atol=1e-6)


def test_both_conditioning_needs_s(rng):
    p = params(condition="both")
    s, t = pair(rng)
    assert p.W.shape == (4, 8, 1, 1, 1)
    assert fuse(s, t, p).shape == SHAPE
    with pytest.raises(ValueError):
        export_mask(t, p)


def test_bias_flag(rng):
    p = params(bias=True)
    p.W.data[:] = 0
    p.b.data[:] = 100.0
    s, t = pair(rng)
    # mask rounds to exactly 1; S + (T - S) matches T up to one rounding step
    np.testing.assert_array_equal(export_mask(t, p).data, 1.0)
    np.testing.assert_allclose(fuse(s, t, p).data, t.data, rtol=0, atol=1e-6)


def test_concat_fusion_shape(rng):
    cf = ConcatFusion(4, rng)
    s, t = pair(rng, (2,) + SHAPE)
    assert cf(s, t).shape == (2,) + SHAPE
