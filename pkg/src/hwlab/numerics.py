"""Periodic-grid finite-difference and spectral building blocks.

Everything in this package lives on a square doubly-periodic domain of side
L = 2*pi/k0 sampled on an n x n grid.  Conventions:

* arrays are indexed ``values[iy, ix]`` - row index is y, column index is x;
* wavenumbers are integer multiples of k0 in standard FFT ordering
  (``numpy.fft.fftfreq`` scaled by 2*pi);
* spatial derivatives are 2nd-order centered differences with periodic wrap;
* the Poisson equation  Lap(phi) = omega  is inverted spectrally with the
  k = 0 mode gauged to zero (phi is mean-free).

The Poisson bracket [p, q] = dp/dx dq/dy - dp/dy dq/dx uses Arakawa's
energy- and enstrophy-conserving three-form average (J1 + J2 + J3)/3,
evaluated as (J1(p,q) + J2(p,q) - J2(q,p))/3 via the identity
J3(p,q) = -J2(q,p), which makes antisymmetry hold bitwise in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "Field",
    "make_grid",
    "make_field",
    "fd_deriv",
    "fd_laplacian",
    "iterated_laplacian",
    "arakawa_bracket",
    "spectral_poisson_solve",
    "fft2",
    "ifft2",
]


class Grid:
    """Square periodic grid: n x n points, base wavenumber k0, side 2*pi/k0.

    Precomputes the FFT wavenumber tables used by the spectral Poisson solve
    so repeated solves share them.  Two grids compare equal iff (n, k0) match.
    """

    def __init__(self, n: int, k0: float):
        n = int(n)
        k0 = float(k0)
        if n < 8 or n % 2 != 0:
            raise ValueError(f"grid size must be even and >= 8, got {n}")
        if not np.isfinite(k0) or k0 <= 0.0:
            raise ValueError(f"base wavenumber k0 must be positive, got {k0}")
        self.n = n
        self.k0 = k0
        self.L = 2.0 * np.pi / k0
        self.dx = self.L / n
        # cell-centered-free collocation points, x[0] = 0
        self.x = np.arange(n) * self.dx
        self.y = self.x.copy()
        # 1-D angular wavenumbers in FFT ordering; these are exact integer
        # multiples of k0 (2*pi*fftfreq(n, d=L/n) = k0 * [0, 1, ..., -1])
        self.kx = 2.0 * np.pi * np.fft.fftfreq(n, d=self.dx)
        self.ky = self.kx.copy()
        # |k|^2 on the rfft2 layout (ky full, kx half) and its inverse with
        # the k = 0 entry zeroed: multiplying by it both inverts the
        # Laplacian and applies the mean-free gauge.
        kx_r = 2.0 * np.pi * np.fft.rfftfreq(n, d=self.dx)
        self._k2_r = self.ky[:, None] ** 2 + kx_r[None, :] ** 2
        self._inv_k2_r = np.zeros_like(self._k2_r)
        self._inv_k2_r[0, 0] = 0.0
        nonzero = self._k2_r > 0.0
        self._inv_k2_r[nonzero] = 1.0 / self._k2_r[nonzero]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (X, Y) coordinate arrays indexed [iy, ix]."""
        return np.meshgrid(self.x, self.y)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Grid) and self.n == other.n and self.k0 == other.k0
        )

    def __hash__(self):
        return hash((self.n, self.k0))

    def __repr__(self) -> str:
        return f"Grid(n={self.n}, k0={self.k0})"


def make_grid(n: int, k0: float) -> Grid:
    """Build a validated periodic grid (see `Grid`)."""
    return Grid(n, k0)


@dataclass(frozen=True)
class Field:
    """A scalar field sampled on a `Grid`.

    ``values[iy, ix]`` has shape (n, n).  64-bit reals everywhere except the
    learning stack, which is allowed to hand back 32-bit data.
    """

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.shape != self.grid.shape:
            raise ValueError(
                f"field values must be an ndarray of shape {self.grid.shape}"
            )
        if v.dtype not in (np.float64, np.float32):
            raise ValueError(f"field dtype must be float32/float64, got {v.dtype}")

    def mean(self) -> float:
        return float(self.values.mean())

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.values**2)))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def make_field(grid: Grid, values: np.ndarray) -> Field:
    """Wrap `values` on `grid`, rejecting non-finite data."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("field values must be finite")
    return Field(grid, values)


# ---------------------------------------------------------------------------
# array-level kernels (operate on bare (n, n) arrays; hot path of the solver)
# ---------------------------------------------------------------------------


def _ddx(v: np.ndarray, dx: float) -> np.ndarray:
    """Centered d/dx (x = axis 1) with periodic wrap."""
    return (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2.0 * dx)


def _ddy(v: np.ndarray, dx: float) -> np.ndarray:
    """Centered d/dy (y = axis 0) with periodic wrap."""
    return (np.roll(v, -1, axis=0) - np.roll(v, 1, axis=0)) / (2.0 * dx)


def _laplacian(v: np.ndarray, dx: float) -> np.ndarray:
    """5-point periodic Laplacian."""
    p = np.pad(v, 1, mode="wrap")
    return (
        p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4.0 * v
    ) / (dx * dx)


def _iterated_laplacian(v: np.ndarray, dx: float, order: int) -> np.ndarray:
    out = v
    for _ in range(order):
        out = _laplacian(out, dx)
    return out


def _arakawa(p: np.ndarray, q: np.ndarray, dx: float) -> np.ndarray:
    """Arakawa bracket [p, q] = (J1 + J2 + J3)/3 on a square periodic grid.

    Evaluated as (J1(p,q) + (J2(p,q) - J2(q,p))) / (12 dx^2) using the exact
    identity J3(p,q) = -J2(q,p).  With this grouping, swapping p and q
    reproduces every elementary operation with operands mirrored, so the
    result negates *bitwise* (IEEE products commute and rounding is
    sign-symmetric), not just to round-off.
    """
    P = np.pad(p, 1, mode="wrap")
    Q = np.pad(q, 1, mode="wrap")
    # shifted views of the padded arrays; i indexes x (axis 1), j indexes y
    p_ip, p_im = P[1:-1, 2:], P[1:-1, :-2]
    p_jp, p_jm = P[2:, 1:-1], P[:-2, 1:-1]
    p_ipjp, p_imjm = P[2:, 2:], P[:-2, :-2]
    p_imjp, p_ipjm = P[2:, :-2], P[:-2, 2:]
    q_ip, q_im = Q[1:-1, 2:], Q[1:-1, :-2]
    q_jp, q_jm = Q[2:, 1:-1], Q[:-2, 1:-1]
    q_ipjp, q_imjm = Q[2:, 2:], Q[:-2, :-2]
    q_imjp, q_ipjm = Q[2:, :-2], Q[:-2, 2:]

    j1 = (p_ip - p_im) * (q_jp - q_jm) - (p_jp - p_jm) * (q_ip - q_im)
    j2_pq = (
        p_ip * (q_ipjp - q_ipjm)
        - p_im * (q_imjp - q_imjm)
        - p_jp * (q_ipjp - q_imjp)
        + p_jm * (q_ipjm - q_imjm)
    )
    j2_qp = (
        q_ip * (p_ipjp - p_ipjm)
        - q_im * (p_imjp - p_imjm)
        - q_jp * (p_ipjp - p_imjp)
        + q_jm * (p_ipjm - p_imjm)
    )
    return (j1 + (j2_pq - j2_qp)) / (12.0 * dx * dx)


def _poisson_phi(omega: np.ndarray, grid: Grid) -> np.ndarray:
    """Solve Lap(phi) = omega spectrally; phi is mean-free."""
    w_hat = np.fft.rfft2(omega)
    phi_hat = -w_hat * grid._inv_k2_r
    return np.fft.irfft2(phi_hat, s=grid.shape)


# ---------------------------------------------------------------------------
# field-level interface
# ---------------------------------------------------------------------------


def _check_same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


def fd_deriv(f: Field, axis: str) -> Field:
    """Centered first derivative of `f` along "x" or "y".

    2nd-order accurate; on pure harmonics the discrete derivative equals the
    exact one times sin(k dx)/(k dx).  The output sums to zero (telescoping).
    """
    if axis == "x":
        out = _ddx(f.values, f.grid.dx)
    elif axis == "y":
        out = _ddy(f.values, f.grid.dx)
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    return Field(f.grid, out)


def fd_laplacian(f: Field) -> Field:
    """5-point periodic Laplacian of `f` (2nd-order, zero-mean output)."""
    return Field(f.grid, _laplacian(f.values, f.grid.dx))


def iterated_laplacian(f: Field, order: int) -> Field:
    """Lap^order(f) by repeated application of the 5-point stencil.

    Used for the hyperdiffusion operator nu * Lap^N with N small (default 3).
    """
    order = int(order)
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    return Field(f.grid, _iterated_laplacian(f.values, f.grid.dx, order))


def arakawa_bracket(p: Field, q: Field) -> Field:
    """Energy/enstrophy-conserving Poisson bracket [p, q] (Arakawa 1966).

    Discretely conserves sum(J), sum(p*J) and sum(q*J) to round-off and is
    antisymmetric bitwise: [p, q] == -[q, p] exactly.

    Args:
        p, q: fields on the same grid.

    Returns:
        Field holding [p, q] ~= dp/dx dq/dy - dp/dy dq/dx.
    """
    _check_same_grid(p, q)
    return Field(p.grid, _arakawa(p.values, q.values, p.grid.dx))


def spectral_poisson_solve(omega: Field) -> Field:
    """Invert Lap(phi) = omega in Fourier space.

    phi_hat = -omega_hat / |k|^2 with the k = 0 coefficient set to zero
    (mean-free gauge), so the solution ignores any mean in omega and is
    exact for band-limited data.
    """
    return Field(omega.grid, _poisson_phi(omega.values, omega.grid))


def fft2(f: Field) -> np.ndarray:
    """Forward 2-D FFT of a field (complex (n, n) array, numpy ordering)."""
    return np.fft.fft2(f.values)


def ifft2(spectrum: np.ndarray, grid: Grid) -> Field:
    """Inverse 2-D FFT back to a real field on `grid`.

    The imaginary part is discarded; callers are expected to hand back
    conjugate-symmetric spectra.
    """
    if spectrum.shape != grid.shape:
        raise ValueError(f"spectrum shape {spectrum.shape} != grid {grid.shape}")
    return Field(grid, np.fft.ifft2(spectrum).real)
