import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cycledepth import autodiff as ad
from cycledepth.autodiff import Tensor, backward
from cycledepth.warp import (SYNTHESIZE_LEFT, SYNTHESIZE_RIGHT, area_downsample, area_downsample_op,
                             to_scale_units, upsample_disparity_full, warp)

from conftest import assert_fd_close


def row(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype).reshape(1, 1, 1, -1))


def const_disp(value, shape, dtype=np.float64):
    n, _, h, w = shape
    return Tensor(np.full((n, 1, h, w), value, dtype=dtype))


@pytest.mark.parametrize("direction", [SYNTHESIZE_LEFT, SYNTHESIZE_RIGHT])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_zero_disparity_identity(rng, direction, dtype):
    src = Tensor(rng.random((2, 3, 8, 16)).astype(dtype))
    out = warp(const_disp(0.0, src.shape, dtype), src, direction)
    np.testing.assert_allclose(out.data, src.data, rtol=0, atol=1e-6)


def test_integer_shift_with_clamp():
    out = warp(row([1.0] * 4), row([10, 20, 30, 40]), SYNTHESIZE_LEFT)
    assert out.data.reshape(-1).tolist() == [10, 10, 20, 30]


def test_integer_shift_right_direction():
    out = warp(row([1.0] * 4), row([10, 20, 30, 40]), SYNTHESIZE_RIGHT)
    assert out.data.reshape(-1).tolist() == [20, 30, 40, 40]


def test_fractional_hand_case():
    out = warp(row([0.5] * 4), row([0, 2, 4, 6]), SYNTHESIZE_LEFT)
    np.testing.assert_allclose(out.data.reshape(-1), [0, 1, 3, 5], atol=1e-6)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_interior_shift_exact(rng, d):
    src = rng.random((1, 3, 6, 20))
    out = warp(const_disp(float(d), src.shape), Tensor(src), SYNTHESIZE_LEFT).data
    assert np.array_equal(out[..., d:], src[..., :-d])
    out = warp(const_disp(float(d), src.shape), Tensor(src), SYNTHESIZE_RIGHT).data
    assert np.array_equal(out[..., :-d], src[..., d:])


def test_negative_disparity_rejected():
    with pytest.raises(ValueError, match="negative"):
        warp(row([0.0, -0.1]), row([1.0, 2.0]), SYNTHESIZE_LEFT)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        warp(Tensor(np.zeros((1, 1, 4, 5))), Tensor(np.zeros((1, 3, 4, 6))), SYNTHESIZE_LEFT)
    with pytest.raises(ValueError):
        warp(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))), SYNTHESIZE_LEFT)


def test_receptive_field_at_most_two_pixels(rng):
    src = Tensor(rng.random((1, 1, 1, 12)), requires_grad=True)
    disp = Tensor(rng.uniform(0, 4, (1, 1, 1, 12)))
    out = warp(disp, src, SYNTHESIZE_LEFT)
    for x in range(12):
        src.grad = None
        mask = np.zeros(out.shape)
        mask[..., x] = 1
        backward(ad.mean(ad.mul(out, Tensor(mask))))
        assert np.count_nonzero(src.grad) <= 2


def test_duality_integer(rng):
    d = 3
    src = rng.random((1, 3, 5, 24))
    disp = const_disp(float(d), src.shape)
    left = warp(disp, Tensor(src), SYNTHESIZE_LEFT)
    back = warp(disp, left, SYNTHESIZE_RIGHT).data
    np.testing.assert_allclose(back[..., d:-d], src[..., d:-d], atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(-2.0, 2.0), st.floats(-1.0, 1.0))
def test_duality_on_ramp(d, slope, offset):
    # bilinear sampling is exact on a linear ramp, so the round trip is exact for any d
    w = 24
    src = (offset + slope * np.arange(w, dtype=np.float64)).reshape(1, 1, 1, w)
    disp = const_disp(d, src.shape)
    back = warp(disp, warp(disp, Tensor(src), SYNTHESIZE_LEFT), SYNTHESIZE_RIGHT).data
    m = int(np.ceil(d)) + 1
    np.testing.assert_allclose(back[..., m:w - m], src[..., m:w - m], atol=1e-5)


def test_warp_gradients_match_fd(rng):
    arrs = {"d": rng.uniform(0.1, 3.0, (1, 1, 3, 8)) + 0.37, "s": rng.uniform(-1, 1, (1, 2, 3, 8))}
    arrs["d"] = np.where(np.abs(arrs["d"] - np.round(arrs["d"])) < 0.05, arrs["d"] + 0.1, arrs["d"])
    for direction in (SYNTHESIZE_LEFT, SYNTHESIZE_RIGHT):
        weights = Tensor(rng.uniform(-1, 1, (1, 2, 3, 8)))
        assert_fd_close(lambda t: ad.mean(ad.mul(warp(t["d"], t["s"], direction), weights)), arrs)


def test_clamped_pixels_have_zero_disparity_gradient():
    disp = Tensor(np.full((1, 1, 1, 4), 5.5), requires_grad=True)
    out = warp(disp, row([1.0, 2.0, 3.0, 4.0]), SYNTHESIZE_LEFT)
    backward(ad.mean(out))
    assert not disp.grad.any()


# -- multi-scale ----------------------------------------------------------------

def test_upsample_full_scale_zero_identity(rng):
    d = Tensor(rng.random((1, 1, 4, 4)))
    assert np.array_equal(upsample_disparity_full(d, 0).data, d.data)


def test_upsample_full_block_replicates():
    d = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = upsample_disparity_full(d, 1).data[0, 0]
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


@pytest.mark.parametrize("scale", [1, 2, 3])
def test_upsampled_warp_matches_hand_built(rng, scale):
    h, w = 16, 32
    src = Tensor(rng.random((1, 3, h, w)))
    low = Tensor(np.full((1, 1, h >> scale, w >> scale), 2.25))
    a = warp(upsample_disparity_full(low, scale), src, SYNTHESIZE_LEFT).data
    b = warp(Tensor(np.full((1, 1, h, w), 2.25)), src, SYNTHESIZE_LEFT).data
    assert np.array_equal(a, b)


def test_scale_units():
    d = Tensor(np.full((1, 1, 2, 2), 8.0))
    assert to_scale_units(d, 0) is d
    assert np.all(to_scale_units(d, 2).data == 2.0)


def test_area_downsample_matches_op(rng):
    img = rng.random((2, 3, 8, 16))
    a = area_downsample(img, 2)
    b = area_downsample_op(Tensor(img), 2).data
    assert a.shape == (2, 3, 2, 4)
    np.testing.assert_allclose(a, b, rtol=1e-14)
    np.testing.assert_allclose(a.mean(), img.mean(), rtol=1e-12)
