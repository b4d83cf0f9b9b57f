"""Scalar and spectral diagnostics for Hasegawa-Wakatani runs.

Quantities of interest per snapshot, both domain averages so the values
are intensive (independent of box size):

    Gamma_n = -< n * dphi/dy >          (radial particle flux)
    Gamma_c = c1 * < (n - phi)^2 >      (resistive dissipation proxy)

where < . > is the mean over the grid, with the mean-free phi gauge of the
spectral Poisson solve.  Time series of these saturate to an O(1) positive
level once the turbulence is developed; `temporal_stats` reduces a window
to (mean, std) and `series_fft` exposes the fluctuation spectrum of the
series itself.

`grad_phi_spectrum` bins the 2-D power of |grad phi|^2 into radial shells
of width k0, the natural resolution of the discrete k-lattice.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .hwsim import HwParams, PlasmaState, Trajectory
from .numerics import _ddx, _ddy

__all__ = [
    "QoiSeries",
    "QoiStats",
    "SeriesSpectrum",
    "RadialSpectrum",
    "gamma_n",
    "gamma_c",
    "qoi_series",
    "temporal_stats",
    "series_fft",
    "grad_phi_spectrum",
    "fit_loglog_slope",
    "qoi_to_csv",
    "spectrum_to_csv",
    "series_spectrum_to_csv",
]


def gamma_n(state: PlasmaState) -> float:
    """Radial particle flux Gamma_n = -<n * dphi/dy>, a domain average.

    The y-derivative is the centered difference, matching the solver's
    advection stencil.  Positive once the gradient drive feeds outward
    transport.
    """
    dphidy = _ddy(state.phi.values, state.grid.dx)
    return -float(np.mean(state.n.values * dphidy))


def gamma_c(state: PlasmaState, params: HwParams) -> float:
    """Coupling dissipation Gamma_c = c1 * <(n - phi)^2>, a domain average.

    Gauge-dependent through phi; the mean-free gauge is assumed.
    """
    diff = state.n.values - state.phi.values
    return params.c1 * float(np.mean(diff**2))


@dataclass
class QoiSeries:
    """Time series of (Gamma_n, Gamma_c) over one run."""

    times: np.ndarray
    gamma_n: np.ndarray
    gamma_c: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.gamma_n) == len(self.gamma_c)):
            raise ValueError("times/gamma_n/gamma_c lengths differ")

    def window(self, t_lo: float, t_hi: float) -> "QoiSeries":
        """Restrict to t_lo <= t <= t_hi (inclusive)."""
        mask = (self.times >= t_lo) & (self.times <= t_hi)
        return QoiSeries(
            self.times[mask], self.gamma_n[mask], self.gamma_c[mask]
        )


def qoi_series(trajectory: Trajectory) -> QoiSeries:
    """Evaluate both QoIs on every snapshot of a trajectory."""
    params = trajectory.params
    times = trajectory.times
    g_n = np.array([gamma_n(s) for s in trajectory.states])
    g_c = np.array([gamma_c(s, params) for s in trajectory.states])
    return QoiSeries(times, g_n, g_c)


@dataclass(frozen=True)
class QoiStats:
    """Windowed (mean, std) per QoI; std is the population value."""

    gamma_n_mean: float
    gamma_n_std: float
    gamma_c_mean: float
    gamma_c_std: float


def temporal_stats(series: QoiSeries, t_lo: float, t_hi: float) -> QoiStats:
    """Mean and population std of each QoI over the window [t_lo, t_hi]."""
    win = series.window(t_lo, t_hi)
    if len(win.times) == 0:
        raise ValueError(f"no samples in window [{t_lo}, {t_hi}]")
    return QoiStats(
        float(win.gamma_n.mean()),
        float(win.gamma_n.std()),
        float(win.gamma_c.mean()),
        float(win.gamma_c.std()),
    )


@dataclass
class SeriesSpectrum:
    """Magnitude spectra of the mean-removed QoI series."""

    freqs: np.ndarray
    gamma_n_mag: np.ndarray
    gamma_c_mag: np.ndarray


def series_fft(series: QoiSeries) -> SeriesSpectrum:
    """Magnitude spectrum of each mean-removed QoI series.

    Requires at least 2 uniformly spaced samples; the DC bin is zero up to
    round-off by construction.
    """
    t = series.times
    if len(t) < 2:
        raise ValueError("need at least 2 samples for a spectrum")
    steps = np.diff(t)
    dt = steps[0]
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
        raise ValueError("series is not uniformly sampled")
    freqs = np.fft.rfftfreq(len(t), d=dt)
    mag_n = np.abs(np.fft.rfft(series.gamma_n - series.gamma_n.mean()))
    mag_c = np.abs(np.fft.rfft(series.gamma_c - series.gamma_c.mean()))
    return SeriesSpectrum(freqs, mag_n, mag_c)


@dataclass
class RadialSpectrum:
    """Shell-averaged Fourier power: power[i] at wavenumber k_bins[i]."""

    k_bins: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        if len(self.k_bins) != len(self.power):
            raise ValueError("k_bins/power lengths differ")


def grad_phi_spectrum(state: PlasmaState) -> RadialSpectrum:
    """Radial power spectrum of the E x B energy density |grad phi|^2.

    The field s = (dphi/dx)^2 + (dphi/dy)^2 (centered differences) is
    Fourier transformed with 1/n^2 normalization and |s_hat|^2 is averaged
    over shells |k| in [(m - 1/2) k0, (m + 1/2) k0); empty shells are
    dropped.  k_bins holds the shell centers m*k0.
    """
    grid = state.grid
    phi = state.phi.values
    s = _ddx(phi, grid.dx) ** 2 + _ddy(phi, grid.dx) ** 2
    power2d = np.abs(np.fft.fft2(s) / s.size) ** 2
    k_mag = np.sqrt(grid.kx[None, :] ** 2 + grid.ky[:, None] ** 2)
    shell = np.floor(k_mag / grid.k0 + 0.5).astype(int)
    counts = np.bincount(shell.ravel())
    sums = np.bincount(shell.ravel(), weights=power2d.ravel())
    occupied = counts > 0
    centers = np.arange(len(counts)) * grid.k0
    return RadialSpectrum(centers[occupied], sums[occupied] / counts[occupied])


def fit_loglog_slope(
    spectrum: RadialSpectrum, k_lo: float, k_hi: float
) -> float:
    """Least-squares slope of log(power) vs log(k) over k in [k_lo, k_hi].

    Needs >= 3 shells with strictly positive k and power in range.
    """
    mask = (
        (spectrum.k_bins >= k_lo)
        & (spectrum.k_bins <= k_hi)
        & (spectrum.k_bins > 0)
    )
    if int(mask.sum()) < 3:
        raise ValueError(
            f"need >= 3 shells in [{k_lo}, {k_hi}], found {int(mask.sum())}"
        )
    p = spectrum.power[mask]
    if np.any(p <= 0):
        raise ValueError("non-positive shell power in fit range")
    slope, _ = np.polyfit(np.log(spectrum.k_bins[mask]), np.log(p), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# CSV export (17 significant digits: values survive a write/read round trip)
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def _write_csv(path, header: list[str], columns: list[np.ndarray]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([_FMT % v for v in row])


def qoi_to_csv(series: QoiSeries, path):
    _write_csv(
        path, ["t", "gamma_n", "gamma_c"],
        [series.times, series.gamma_n, series.gamma_c],
    )


def spectrum_to_csv(spectrum: RadialSpectrum, path):
    _write_csv(path, ["k", "power"], [spectrum.k_bins, spectrum.power])


def series_spectrum_to_csv(spec: SeriesSpectrum, path):
    _write_csv(
        path, ["freq", "gamma_n_mag", "gamma_c_mag"],
        [spec.freqs, spec.gamma_n_mag, spec.gamma_c_mag],
    )
