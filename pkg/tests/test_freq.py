import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covflow.freq import (DequantConfig, blur, decompose, dequantize, gaussian_kernel, kernel_radius,
                          quantize)


def direct_blur(image, sigma):
    """2-D correlation with the outer-product kernel over numpy-reflect padding."""
    r = kernel_radius(sigma)
    k = gaussian_kernel(sigma)
    k2 = np.outer(k, k)
    pad = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(r, r), (r, r)], mode="reflect")
    h, w = image.shape[-2:]
    out = np.zeros(image.shape)
    for i in range(h):
        for j in range(w):
            out[..., i, j] = np.sum(pad[..., i:i + 2 * r + 1, j:j + 2 * r + 1] * k2, axis=(-2, -1))
    return out


@pytest.mark.parametrize("sigma", [0.3, 1.0, 1.7, 3.0])
def test_kernel_normalized_and_symmetric(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1) < 1e-12
    np.testing.assert_array_equal(k, k[::-1])
    assert np.all(k > 0)
    assert len(k) == 2 * kernel_radius(sigma) + 1


def test_kernel_sigma1_radius2_values():
    k = gaussian_kernel(1.0, 2)
    ref = np.array([np.exp(-(j ** 2) / 2) for j in range(-2, 3)])
    np.testing.assert_allclose(k, ref / ref.sum(), rtol=0, atol=1e-15)


def test_kernel_radius_is_ceil_3sigma():
    assert kernel_radius(1.0) == 3
    assert kernel_radius(1.1) == 4
    assert kernel_radius(0.2) == 1


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_kernel_rejects_nonpositive_sigma(bad):
    with pytest.raises(ValueError):
        gaussian_kernel(bad)


def test_kernel_rejects_zero_radius():
    with pytest.raises(ValueError):
        gaussian_kernel(1.0, 0)


def test_constant_image_has_no_high_band():
    img = np.full((3, 8, 8), 0.37)
    p = decompose(img)
    np.testing.assert_allclose(p.low, 0.37, atol=1e-15)
    np.testing.assert_allclose(p.high, 0.0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 9), st.integers(2, 9)),
              elements=st.floats(-2, 2)))
def test_low_plus_high_reconstructs(img):
    p = decompose(img)
    assert p.low.shape == p.high.shape == img.shape
    assert np.max(np.abs(p.low + p.high - img)) <= 1e-12


def test_impulse_response_is_outer_kernel():
    img = np.zeros((1, 15, 15))
    img[0, 7, 7] = 1.0
    k = gaussian_kernel(1.0)
    expected = np.zeros((15, 15))
    expected[4:11, 4:11] = np.outer(k, k)
    np.testing.assert_allclose(decompose(img, 1.0).low[0], expected, rtol=0, atol=1e-15)


def test_blur_matches_direct_convolution_with_reflect_borders():
    rng = np.random.default_rng(0)
    img = rng.random((2, 7, 9))
    np.testing.assert_allclose(blur(img, 1.0), direct_blur(img, 1.0), atol=1e-13)


def test_decompose_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        decompose(np.zeros((3, 0, 4)))
    with pytest.raises(ValueError):
        decompose(np.array([[0.0, np.nan], [0.0, 0.0]]))


def test_decompose_commutes_with_channel_permutation():
    rng = np.random.default_rng(1)
    img = rng.random((3, 10, 10))
    perm = [2, 0, 1]
    a, b = decompose(img[perm]), decompose(img)
    np.testing.assert_array_equal(a.low, b.low[perm])
    np.testing.assert_array_equal(a.high, b.high[perm])


def test_reblurring_reduces_high_band_variance():
    rng = np.random.default_rng(2)
    img = rng.random((3, 16, 16))
    assert decompose(blur(img, 1.0)).high.var() < decompose(img).high.var()


def test_dequant_config_validation():
    with pytest.raises(ValueError):
        DequantConfig(12)
    with pytest.raises(ValueError):
        DequantConfig(16, (1.0, 1.0))


def test_dequantize_zero_with_zero_noise():
    assert dequantize(np.array([0.0]), DequantConfig(), noise=0.0)[0] == 0.0


def test_dequantize_midpoint():
    cfg = DequantConfig(16, (0.0, 1.0))
    x = np.array([0.3])
    level = np.floor(0.3 * 65536)
    assert dequantize(x, cfg, noise=0.5)[0] == pytest.approx(level / 65536 + 0.5 / 65536, abs=1e-15)


def test_dequantize_seeded_is_reproducible():
    cfg = DequantConfig(16, (-0.5, 0.5))
    x = np.random.default_rng(3).uniform(-0.4, 0.4, (2, 3, 4, 4))
    a = dequantize(x, cfg, rng=np.random.default_rng(9))
    b = dequantize(x, cfg, rng=np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-0.5, 0.5)), st.sampled_from([8, 16]),
       st.integers(0, 2**32 - 1))
def test_dequantized_value_stays_in_its_cell(x, bits, seed):
    cfg = DequantConfig(bits, (-0.5, 0.5))
    lev = quantize(x, cfg)
    y = dequantize(x, cfg, rng=np.random.default_rng(seed))
    lo = -0.5 + lev * cfg.step
    assert np.all(y >= lo) and np.all(y < lo + cfg.step)
    assert np.all(np.abs(y - x) <= cfg.step)


def test_out_of_range_rejected_with_coordinates():
    x = np.zeros((2, 3))
    x[1, 2] = 0.7
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        dequantize(x, DequantConfig(16, (-0.5, 0.5)))


def test_clip_saturates_out_of_range():
    cfg = DequantConfig(16, (-0.5, 0.5))
    y = dequantize(np.array([-3.0, 3.0]), cfg, noise=0.0, clip=True)
    assert y[0] == -0.5 and y[1] == 0.5 - cfg.step


def test_noise_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        dequantize(np.zeros(2), DequantConfig(), noise=1.0)
