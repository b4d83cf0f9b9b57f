"""Diagnostics tests: flux integrals against exact trig sums, spectrum
binning against a Parseval identity, slope fitting on synthetic power laws,
and the CSV round trip.
"""

import numpy as np
import pytest

from hwlab.diagnostics import (
    QoiSeries,
    RadialSpectrum,
    fit_loglog_slope,
    gamma_c,
    gamma_n,
    grad_phi_spectrum,
    qoi_series,
    qoi_to_csv,
    series_fft,
    series_spectrum_to_csv,
    spectrum_to_csv,
    temporal_stats,
)
from hwlab.hwsim import HwParams, PlasmaState, SimConfig, make_state, simulate
from hwlab.numerics import Field, make_grid

REF = HwParams(c1=1.0, k0=0.6, kappa=1.0, c_pb=1.0)


def state_from(grid, omega=None, phi=None, n=None, t=0.0):
    zero = np.zeros(grid.shape)
    return PlasmaState(
        Field(grid, zero if omega is None else omega),
        Field(grid, zero if phi is None else phi),
        Field(grid, zero if n is None else n),
        t,
    )


class TestFluxes:
    def test_gamma_n_analytic(self):
        """n = sin y, phi = cos y: mean flux = (sin dx / dx) / 2."""
        g = make_grid(64, 1.0)
        _, y = np.meshgrid(g.x, g.y)
        st = state_from(g, phi=np.cos(y), n=np.sin(y))
        expected = (np.sin(g.dx) / g.dx) / 2
        assert gamma_n(st) == pytest.approx(expected, rel=1e-13)

    def test_gamma_n_independent_of_box_size(self):
        """Domain averaging makes the flux intensive: same wave, any box."""
        values = []
        for n, k0 in ((32, 1.0), (64, 0.5), (96, 0.25)):
            g = make_grid(n, k0)
            _, y = np.meshgrid(g.x, g.y)
            st = state_from(g, phi=np.cos(y), n=np.sin(y))
            # divide out the stencil's sinc factor, which depends on dx
            values.append(gamma_n(st) / (np.sin(g.dx) / g.dx))
        assert values[0] == pytest.approx(0.5, rel=1e-12)
        assert values[0] == pytest.approx(values[1], rel=1e-12)
        assert values[0] == pytest.approx(values[2], rel=1e-12)

    def test_gamma_n_sign_convention(self):
        """Density crests moving with +y drift give positive outward flux."""
        g = make_grid(64, 1.0)
        _, y = np.meshgrid(g.x, g.y)
        st = state_from(g, phi=np.cos(y), n=np.sin(y))
        assert gamma_n(st) > 0

    def test_gamma_n_orthogonal_fields_vanish(self):
        g = make_grid(32, 1.0)
        x, y = np.meshgrid(g.x, g.y)
        st = state_from(g, phi=np.cos(y), n=np.sin(x))
        assert gamma_n(st) == pytest.approx(0.0, abs=1e-12)

    def test_gamma_c_analytic(self):
        """n - phi = sin x averages to c1 / 2 exactly."""
        g = make_grid(64, 1.0)
        x, _ = np.meshgrid(g.x, g.y)
        st = state_from(g, n=np.sin(x))
        p = HwParams(c1=1.3, k0=1.0, kappa=1.0, c_pb=1.0)
        assert gamma_c(st, p) == pytest.approx(1.3 / 2, rel=1e-14)

    def test_gamma_c_nonnegative(self):
        g = make_grid(32, 1.0)
        rng = np.random.default_rng(0)
        st = state_from(
            g, phi=rng.standard_normal(g.shape), n=rng.standard_normal(g.shape)
        )
        assert gamma_c(st, REF) >= 0.0


class TestQoiSeries:
    def test_series_matches_pointwise(self):
        cfg = SimConfig(grid_n=16, params=REF, dt=0.02, n_steps=8, seed=2)
        traj = simulate(cfg)
        series = qoi_series(traj)
        assert len(series.times) == len(traj.states)
        for i, st in enumerate(traj.states):
            assert series.gamma_n[i] == gamma_n(st)
            assert series.gamma_c[i] == gamma_c(st, REF)

    def test_window_is_inclusive(self):
        s = QoiSeries(
            np.array([0.0, 1.0, 2.0, 3.0]),
            np.arange(4.0),
            np.arange(4.0) ** 2,
        )
        w = s.window(1.0, 2.0)
        np.testing.assert_array_equal(w.times, [1.0, 2.0])
        np.testing.assert_array_equal(w.gamma_n, [1.0, 2.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            QoiSeries(np.zeros(3), np.zeros(3), np.zeros(2))

    def test_stats_hand_computed(self):
        s = QoiSeries(
            np.array([0.0, 1.0, 2.0, 3.0]),
            np.array([1.0, 3.0, 1.0, 3.0]),
            np.array([2.0, 2.0, 2.0, 2.0]),
        )
        st = temporal_stats(s, 0.0, 3.0)
        assert st.gamma_n_mean == pytest.approx(2.0)
        assert st.gamma_n_std == pytest.approx(1.0)  # population std
        assert st.gamma_c_mean == pytest.approx(2.0)
        assert st.gamma_c_std == 0.0

    def test_stats_empty_window_raises(self):
        s = QoiSeries(np.array([0.0, 1.0]), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            temporal_stats(s, 5.0, 6.0)


class TestSeriesFft:
    def test_peak_at_injected_frequency(self):
        n, dt = 128, 0.25
        t = np.arange(n) * dt
        f_inj = 8 / (n * dt)  # exactly representable bin
        sig = 2.5 * np.cos(2 * np.pi * f_inj * t)
        spec = series_fft(QoiSeries(t, sig, np.zeros(n)))
        peak = spec.freqs[np.argmax(spec.gamma_n_mag)]
        assert peak == pytest.approx(f_inj)
        # rfft magnitude of a unit-bin cosine is amplitude * n / 2
        assert spec.gamma_n_mag.max() == pytest.approx(2.5 * n / 2, rel=1e-12)

    def test_dc_bin_removed(self):
        t = np.arange(64) * 0.5
        spec = series_fft(QoiSeries(t, np.full(64, 7.0), np.zeros(64)))
        assert spec.gamma_n_mag[0] == pytest.approx(0.0, abs=1e-10)

    def test_nonuniform_sampling_rejected(self):
        t = np.array([0.0, 1.0, 2.5])
        with pytest.raises(ValueError):
            series_fft(QoiSeries(t, np.zeros(3), np.zeros(3)))

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            series_fft(QoiSeries(np.array([0.0]), np.zeros(1), np.zeros(1)))


class TestRadialSpectrum:
    def test_parseval_identity(self):
        """Count-weighted shell sums reassemble the field's mean square."""
        g = make_grid(32, 0.6)
        rng = np.random.default_rng(1)
        phi = rng.standard_normal(g.shape)
        st = state_from(g, phi=phi)
        spec = grad_phi_spectrum(st)

        # recompute counts independently from the shell definition
        k_mag = np.sqrt(g.kx[None, :] ** 2 + g.ky[:, None] ** 2)
        shells = np.floor(k_mag / g.k0 + 0.5).astype(int)
        from hwlab.numerics import _ddx, _ddy

        s = _ddx(phi, g.dx) ** 2 + _ddy(phi, g.dx) ** 2
        total = 0.0
        for center, power in zip(spec.k_bins, spec.power):
            m = int(round(center / g.k0))
            total += power * np.count_nonzero(shells == m)
        assert total == pytest.approx(np.mean(s**2), rel=1e-12)

    def test_single_mode_lands_in_one_shell(self):
        g = make_grid(32, 1.0)
        x, _ = np.meshgrid(g.x, g.y)
        # |grad phi|^2 of sin(3x) = 9 cos^2(3x) = 4.5 + 4.5 cos(6x):
        # spectral content at k = 0 and k = 6
        st = state_from(g, phi=np.sin(3 * x))
        spec = grad_phi_spectrum(st)
        nonzero = spec.k_bins[spec.power > 1e-20]
        np.testing.assert_allclose(sorted(nonzero), [0.0, 6.0])

    def test_shell_centers_are_k0_multiples(self):
        g = make_grid(32, 0.7)
        st = state_from(g, phi=np.random.default_rng(2).standard_normal(g.shape))
        spec = grad_phi_spectrum(st)
        ratios = spec.k_bins / g.k0
        np.testing.assert_allclose(ratios, np.round(ratios), atol=1e-12)
        assert np.all(np.diff(spec.k_bins) > 0)

    def test_bins_power_length_check(self):
        with pytest.raises(ValueError):
            RadialSpectrum(np.zeros(3), np.zeros(4))


class TestSlopeFit:
    def test_recovers_synthetic_power_law(self):
        k = np.linspace(1.0, 20.0, 24)
        spec = RadialSpectrum(k, 3.0 * k**-2.7)
        assert fit_loglog_slope(spec, 1.0, 20.0) == pytest.approx(-2.7, abs=1e-12)

    def test_range_restriction(self):
        k = np.linspace(1.0, 20.0, 40)
        power = np.where(k < 10.0, k**-1.0, k**-5.0 * 10.0**4)
        steep = fit_loglog_slope(RadialSpectrum(k, power), 11.0, 20.0)
        shallow = fit_loglog_slope(RadialSpectrum(k, power), 1.0, 9.0)
        assert steep == pytest.approx(-5.0, abs=1e-10)
        assert shallow == pytest.approx(-1.0, abs=1e-10)

    def test_too_few_points_raises(self):
        spec = RadialSpectrum(np.array([1.0, 2.0]), np.array([1.0, 0.5]))
        with pytest.raises(ValueError):
            fit_loglog_slope(spec, 0.5, 3.0)

    def test_nonpositive_power_raises(self):
        spec = RadialSpectrum(
            np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.1])
        )
        with pytest.raises(ValueError):
            fit_loglog_slope(spec, 0.5, 4.0)


class TestCsv:
    def test_qoi_round_trip(self, tmp_path):
        s = QoiSeries(
            np.array([0.0, 0.1, 0.2]),
            np.array([1.0 / 3.0, 2.0 / 7.0, 0.5]),
            np.array([1e-17, 2.5, 3.5]),
        )
        path = tmp_path / "qoi.csv"
        qoi_to_csv(s, path)
        data = np.genfromtxt(path, delimiter=",", names=True)
        np.testing.assert_array_equal(data["t"], s.times)
        np.testing.assert_array_equal(data["gamma_n"], s.gamma_n)
        np.testing.assert_array_equal(data["gamma_c"], s.gamma_c)

    def test_spectrum_round_trip(self, tmp_path):
        spec = RadialSpectrum(
            np.array([0.6, 1.2]), np.array([1.0 / 3.0, 1e-30])
        )
        path = tmp_path / "spec.csv"
        spectrum_to_csv(spec, path)
        data = np.genfromtxt(path, delimiter=",", names=True)
        np.testing.assert_array_equal(data["k"], spec.k_bins)
        np.testing.assert_array_equal(data["power"], spec.power)

    def test_series_spectrum_writes_header(self, tmp_path):
        t = np.arange(8) * 0.5
        spec = series_fft(QoiSeries(t, np.sin(t), np.cos(t)))
        path = tmp_path / "fft.csv"
        series_spectrum_to_csv(spec, path)
        header = path.read_text().splitlines()[0]
        assert header.split(",") == ["freq", "gamma_n_mag", "gamma_c_mag"]
