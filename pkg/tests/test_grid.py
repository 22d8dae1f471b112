import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfblab.fields import Field
from hfblab.grid import (fractional_symbol, free_propagate_field, laplacian_symbol, make_grid)


def test_canonical_frequencies():
    g = make_grid(1, 8, 2 * np.pi)
    assert sorted(np.round(g.k1d).astype(int)) == [-4, -3, -2, -1, 0, 1, 2, 3]


def test_sizes_and_weights():
    g = make_grid(2, 4, 1.0)
    assert g.size == 16 and g.weight == pytest.approx(1 / 16)
    g3 = make_grid(3, 16, 10.0)
    assert g3.size == 4096 and g3.weight == pytest.approx((10 / 16) ** 3)
    assert g3.l2_norm(np.ones(g3.shape)) ** 2 == pytest.approx(1000.0)


@pytest.mark.parametrize("n,L", [(7, 1.0), (8, 0.0), (8, -1.0), (2, 1.0)])
def test_rejects_bad_grid(n, L):
    with pytest.raises(ValueError):
        make_grid(1, n, L)


def test_rejects_bad_dimension():
    with pytest.raises(ValueError):
        make_grid(4, 8, 1.0)


def test_laplacian_eigenfunctions():
    g = make_grid(1, 32, 2 * np.pi)
    x = g.x1d
    f = np.exp(1j * x)
    assert np.max(np.abs(g.apply_multiplier(f, laplacian_symbol(g)) + f)) < 1e-12
    s = np.sin(2 * x)
    assert np.max(np.abs(g.apply_multiplier(s, laplacian_symbol(g)) + 4 * s)) < 1e-12
    assert np.max(np.abs(g.apply_multiplier(np.ones(32), laplacian_symbol(g)))) < 1e-12


def test_fractional_symbol():
    g = make_grid(2, 16, 2 * np.pi)
    assert np.all(fractional_symbol(g, 0) == 1)
    assert np.allclose(fractional_symbol(g, 2), -laplacian_symbol(g), atol=1e-12)
    g1 = make_grid(1, 16, 2 * np.pi)
    f = np.exp(1j * g1.x1d)
    assert np.max(np.abs(g1.apply_multiplier(f, fractional_symbol(g1, 1)) - f)) < 1e-12
    with pytest.raises(ValueError):
        fractional_symbol(g, -0.5)


def _gaussian_free(x, t, w, L, images=6):
    # continuum e^{it Lap} of exp(-x^2/(2w^2)), summed over periodic images
    z = w * w + 2j * t
    return sum(w / np.sqrt(z) * np.exp(-(x + m * L) ** 2 / (2 * z)) for m in range(-images, images + 1))


def test_free_gaussian_image_sum():
    g = make_grid(1, 128, 20.0)
    w = 1.0
    f0 = Field(g, _gaussian_free(g.x1d, 0.0, w, g.L))
    for t in (0.1, 0.5, 2.0):
        ft = free_propagate_field(f0, t)
        assert np.max(np.abs(ft.data - _gaussian_free(g.x1d, t, w, g.L))) < 1e-8


def test_transform_roundtrip_and_plancherel(rng):
    g = make_grid(3, 8, 3.0)
    f = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    assert np.max(np.abs(g.ifft(g.fft(f)) - f)) / np.max(np.abs(f)) < 1e-12
    assert g.fourier_l2_norm(g.fft(f)) == pytest.approx(g.l2_norm(f), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(s=st.floats(-3, 3), t=st.floats(-3, 3), seed=st.integers(0, 2 ** 32 - 1))
def test_free_flow_group_law(s, t, seed):
    g = make_grid(2, 8, 5.0)
    r = np.random.default_rng(seed)
    f = Field(g, r.standard_normal(g.shape) + 1j * r.standard_normal(g.shape))
    a = free_propagate_field(free_propagate_field(f, s), t)
    b = free_propagate_field(f, s + t)
    assert np.max(np.abs(a.data - b.data)) < 1e-10 * max(1, np.max(np.abs(f.data)))
    assert a.norm() == pytest.approx(f.norm(), rel=1e-12)
    assert np.max(np.abs(free_propagate_field(b, -(s + t)).data - f.data)) < 1e-12 * np.max(np.abs(f.data)) * 10


def test_free_flow_identity_at_zero(rng):
    g = make_grid(1, 16, 4.0)
    f = Field(g, rng.standard_normal(16))
    assert np.allclose(free_propagate_field(f, 0.0).data, f.data, atol=1e-15)


def test_spectral_derivative_real_for_real_input(rng):
    g = make_grid(1, 16, 4.0)
    f = rng.standard_normal(16)
    assert np.max(np.abs(g.derivative(f, 0).imag)) < 1e-13


def test_wrap_fraction():
    g = make_grid(1, 64, 16.0)
    f = np.exp(-g.x1d ** 2)
    assert g.wrap_fraction(f) < 1e-12
    assert g.wrap_fraction(np.ones(64)) == pytest.approx(0.5, abs=0.05)
