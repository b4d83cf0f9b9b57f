"""Grid, field, and stencil tests against closed-form oracles.

The trig identities used here are exact for the discrete operators: a
centered difference of sin(kx) on a uniform periodic grid returns
(sin(k h)/h) cos(kx) with no truncation remainder, so comparisons run at
rounding tolerance rather than discretization tolerance.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hwlab.numerics import (
    Field,
    Grid,
    arakawa_bracket,
    fd_deriv,
    fd_laplacian,
    fft2,
    ifft2,
    iterated_laplacian,
    make_field,
    make_grid,
    spectral_poisson_solve,
)


def smooth_random(grid: Grid, seed: int, n_modes: int = 5) -> np.ndarray:
    """Random band-limited periodic field (exactly representable modes)."""
    rng = np.random.default_rng(seed)
    x, y = np.meshgrid(grid.x, grid.y)
    out = np.zeros(grid.shape)
    for _ in range(n_modes):
        jx, jy = rng.integers(-3, 4, size=2)
        amp, phase = rng.normal(), rng.uniform(0, 2 * np.pi)
        out += amp * np.sin(grid.k0 * (jx * x + jy * y) + phase)
    return out


class TestGrid:
    def test_box_size_and_spacing(self):
        g = make_grid(64, 0.5)
        assert g.L == pytest.approx(2 * np.pi / 0.5)
        assert g.dx == pytest.approx(g.L / 64)
        assert g.shape == (64, 64)
        assert len(g.x) == 64 and len(g.y) == 64
        assert g.x[0] == 0.0

    def test_wavenumbers_match_fft_convention(self):
        g = make_grid(16, 1.0)
        np.testing.assert_allclose(g.kx, 2 * np.pi * np.fft.fftfreq(16, g.dx))
        assert g.kx[1] == pytest.approx(g.k0)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            make_grid(15, 1.0)
        with pytest.raises(ValueError):
            make_grid(4, 1.0)
        with pytest.raises(ValueError):
            make_grid(32, -1.0)

    @given(
        n=st.sampled_from([8, 16, 32]),
        k0=st.floats(0.1, 2.0, allow_nan=False),
    )
    @settings(max_examples=25, deadline=None)
    def test_equality_is_structural(self, n, k0):
        a, b = make_grid(n, k0), make_grid(n, k0)
        assert a == b
        assert hash(a) == hash(b)
        assert a != make_grid(2 * n, k0)


class TestField:
    def test_stats(self):
        g = make_grid(8, 1.0)
        f = make_field(g, np.full(g.shape, -3.0))
        assert f.mean() == pytest.approx(-3.0)
        assert f.rms() == pytest.approx(3.0)
        assert f.max_abs() == pytest.approx(3.0)

    def test_rejects_wrong_shape(self):
        g = make_grid(8, 1.0)
        with pytest.raises(ValueError):
            make_field(g, np.zeros((8, 4)))

    def test_make_field_converts_but_constructor_validates(self):
        g = make_grid(8, 1.0)
        f = make_field(g, np.zeros(g.shape, dtype=np.int64))
        assert f.values.dtype == np.float64
        with pytest.raises(ValueError):
            Field(g, np.zeros(g.shape, dtype=np.int64))

    def test_rejects_non_finite(self):
        g = make_grid(8, 1.0)
        bad = np.zeros(g.shape)
        bad[3, 5] = np.inf
        with pytest.raises(ValueError):
            make_field(g, bad)


class TestDerivatives:
    def test_ddx_exact_trig_identity(self):
        g = make_grid(32, 1.0)
        x, _ = np.meshgrid(g.x, g.y)
        f = make_field(g, np.sin(x))
        d = fd_deriv(f, "x")
        expected = (np.sin(g.dx) / g.dx) * np.cos(x)
        np.testing.assert_allclose(d.values, expected, atol=1e-14)

    def test_ddy_acts_on_other_axis(self):
        g = make_grid(32, 1.0)
        _, y = np.meshgrid(g.x, g.y)
        f = make_field(g, np.sin(2 * y))
        d = fd_deriv(f, "y")
        expected = (np.sin(2 * g.dx) / g.dx) * np.cos(2 * y)
        np.testing.assert_allclose(d.values, expected, atol=1e-14)
        # and the x-derivative of a y-only field is zero
        np.testing.assert_array_equal(fd_deriv(f, "x").values, 0.0)

    def test_second_order_convergence(self):
        errs = []
        for n in (16, 32, 64):
            g = make_grid(n, 1.0)
            x, _ = np.meshgrid(g.x, g.y)
            d = fd_deriv(make_field(g, np.sin(x)), "x")
            errs.append(np.max(np.abs(d.values - np.cos(x))))
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(orders > 1.99)

    def test_laplacian_exact_trig_identity(self):
        g = make_grid(32, 1.0)
        x, y = np.meshgrid(g.x, g.y)
        f = make_field(g, np.sin(x) + np.cos(2 * y))
        lam1 = -(2 - 2 * np.cos(g.dx)) / g.dx**2
        lam2 = -(2 - 2 * np.cos(2 * g.dx)) / g.dx**2
        expected = lam1 * np.sin(x) + lam2 * np.cos(2 * y)
        np.testing.assert_allclose(fd_laplacian(f).values, expected, atol=1e-13)

    def test_iterated_laplacian_composes(self):
        g = make_grid(16, 1.0)
        f = make_field(g, smooth_random(g, 3))
        twice = fd_laplacian(fd_laplacian(f))
        np.testing.assert_array_equal(
            iterated_laplacian(f, 2).values, twice.values
        )
        with pytest.raises(ValueError):
            iterated_laplacian(f, 0)

    def test_derivative_of_constant_is_zero(self):
        g = make_grid(16, 0.7)
        f = make_field(g, np.full(g.shape, 4.2))
        np.testing.assert_array_equal(fd_deriv(f, "x").values, 0.0)
        np.testing.assert_array_equal(fd_laplacian(f).values, 0.0)


class TestArakawa:
    def test_analytic_bracket(self):
        """J(sin x, sin y) = cos x cos y, discretized exactly."""
        g = make_grid(64, 1.0)
        x, y = np.meshgrid(g.x, g.y)
        j = arakawa_bracket(make_field(g, np.sin(x)), make_field(g, np.sin(y)))
        factor = (np.sin(g.dx) / g.dx) ** 2
        np.testing.assert_allclose(
            j.values, factor * np.cos(x) * np.cos(y), atol=1e-14
        )

    def test_bracket_with_constant_vanishes(self):
        # zero up to rounding: the corner terms cancel only after
        # reassociation, so the residual is eps-level, not bitwise zero
        g = make_grid(32, 1.0)
        f = make_field(g, smooth_random(g, 1))
        c = make_field(g, np.full(g.shape, 2.5))
        np.testing.assert_allclose(arakawa_bracket(f, c).values, 0.0, atol=1e-13)
        np.testing.assert_allclose(arakawa_bracket(c, f).values, 0.0, atol=1e-13)

    def test_self_bracket_vanishes(self):
        g = make_grid(32, 1.0)
        f = make_field(g, smooth_random(g, 2))
        np.testing.assert_array_equal(arakawa_bracket(f, f).values, 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_discrete_conservation_laws(self, seed):
        """Sum, energy, and enstrophy sums of J vanish to rounding."""
        g = make_grid(64, 1.0)
        p = smooth_random(g, 10 + seed)
        q = smooth_random(g, 20 + seed)
        j = arakawa_bracket(make_field(g, p), make_field(g, q)).values
        scale = np.sum(np.abs(j))
        assert abs(np.sum(j)) / scale < 1e-13
        assert abs(np.sum(p * j)) / (np.sum(np.abs(p * j))) < 1e-13
        assert abs(np.sum(q * j)) / (np.sum(np.abs(q * j))) < 1e-13

    @given(pseed=st.integers(0, 10_000), qseed=st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_antisymmetry_is_bitwise(self, pseed, qseed):
        g = make_grid(32, 0.8)
        p = make_field(g, smooth_random(g, pseed))
        q = make_field(g, smooth_random(g, qseed))
        fwd = arakawa_bracket(p, q).values
        rev = arakawa_bracket(q, p).values
        np.testing.assert_array_equal(fwd, -rev)

    def test_second_order_convergence(self):
        # relative error: difference from the analytic Jacobian, normalized
        # by the computed bracket's own max magnitude
        errs = []
        for n in (32, 64, 128):
            g = make_grid(n, 1.0)
            x, y = np.meshgrid(g.x, g.y)
            j = arakawa_bracket(
                make_field(g, np.sin(x)), make_field(g, np.sin(y))
            ).values
            diff = np.max(np.abs(j - np.cos(x) * np.cos(y)))
            errs.append(diff / np.max(np.abs(j)))
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(orders >= 2.0)

    def test_grid_mismatch_rejected(self):
        a = make_field(make_grid(16, 1.0), np.zeros((16, 16)))
        b = make_field(make_grid(32, 1.0), np.zeros((32, 32)))
        with pytest.raises(ValueError):
            arakawa_bracket(a, b)


class TestPoisson:
    def test_eigenfunction(self):
        """vorticity sin(m k0 x) inverts to -sin(m k0 x) / (m k0)^2."""
        g = make_grid(64, 0.5)
        x, y = np.meshgrid(g.x, g.y)
        for mx, my in ((1, 0), (0, 2), (3, 1)):
            k2 = (mx * g.k0) ** 2 + (my * g.k0) ** 2
            w = np.sin(g.k0 * (mx * x + my * y))
            phi = spectral_poisson_solve(make_field(g, w))
            np.testing.assert_allclose(phi.values, -w / k2, atol=1e-13)

    def test_round_trip_spectral_laplacian(self):
        g = make_grid(64, 1.0)
        rng = np.random.default_rng(0)
        w = rng.standard_normal(g.shape)
        w -= w.mean()
        phi = spectral_poisson_solve(make_field(g, w))
        k2 = g.kx[None, :] ** 2 + g.ky[:, None] ** 2
        back = ifft2(-k2 * fft2(phi), g)
        np.testing.assert_allclose(back.values, w, atol=1e-12)

    def test_zero_mean_gauge(self):
        g = make_grid(32, 1.0)
        rng = np.random.default_rng(1)
        w = rng.standard_normal(g.shape) + 5.0  # deliberately non-zero mean
        phi = spectral_poisson_solve(make_field(g, w))
        assert abs(phi.values.mean()) < 1e-13

    def test_fft_round_trip(self):
        g = make_grid(32, 1.0)
        f = make_field(g, smooth_random(g, 7))
        back = ifft2(fft2(f), g)
        np.testing.assert_allclose(back.values, f.values, atol=1e-13)
