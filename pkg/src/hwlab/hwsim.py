"""2-D Hasegawa-Wakatani drift-wave turbulence solver.

Evolves vorticity Omega and density n on a doubly-periodic square box of
side L = 2*pi/k0 in normalized units:

    dOmega/dt = c1*(phi - n) - c_pb*[phi, Omega] + nu*Lap^N(Omega)
    dn/dt     = c1*(phi - n) - c_pb*[phi, n] - kappa*dphi/dy + nu*Lap^N(n)
    Lap(phi)  = Omega

with [.,.] the Arakawa bracket, kappa the background-gradient drive and
c1 the adiabaticity coupling.  Hyperdiffusion nu*Lap^N (N = 3 by default)
absorbs the enstrophy cascade at the grid scale; `cross_hyperdiffusion`
swaps which field each hyperdiffusion term acts on (an alternative
coupling retained as a configuration switch - the default is
self-diffusion).

Time stepping is classical RK4 on (Omega, n) with phi re-solved from the
stage vorticity at every stage.  Initial conditions are Gaussian random
fields with a Gaussian spectral envelope.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .numerics import (
    Field,
    Grid,
    _arakawa,
    _ddy,
    _iterated_laplacian,
    _poisson_phi,
    make_grid,
)

__all__ = [
    "PARAM_RANGES",
    "HwParams",
    "SimConfig",
    "PlasmaState",
    "Trajectory",
    "SimulationBlowup",
    "make_state",
    "gaussian_random_field",
    "init_state",
    "sample_params",
    "hw_rhs",
    "rk4_update",
    "rk4_step",
    "iter_simulate",
    "simulate",
    "fluctuation_energy",
]

log = logging.getLogger(__name__)

# sampling box for the four free parameters (uniform, independent)
PARAM_RANGES: dict[str, tuple[float, float]] = {
    "c1": (0.9, 1.1),
    "k0": (0.55, 0.65),
    "kappa": (0.9, 1.1),
    "c_pb": (0.9, 1.0),
}

# |Omega| beyond this is treated as numerical blow-up even if still finite
BLOWUP_THRESHOLD = 1.0e6


@dataclass(frozen=True)
class HwParams:
    """Physical parameters of one Hasegawa-Wakatani instance."""

    c1: float
    k0: float
    kappa: float
    c_pb: float
    nu: float = 5.0e-10
    hyper_order: int = 3

    def __post_init__(self):
        for name in ("c1", "k0", "kappa", "c_pb"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if self.nu < 0.0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        if self.hyper_order < 1:
            raise ValueError(f"hyper_order must be >= 1, got {self.hyper_order}")

    def free_values(self) -> np.ndarray:
        """The four sampled parameters as [c1, k0, kappa, c_pb]."""
        return np.array([self.c1, self.k0, self.kappa, self.c_pb])


def sample_params(rng: np.random.Generator) -> HwParams:
    """Draw one parameter set uniformly from `PARAM_RANGES`.

    Draws in the fixed order c1, k0, kappa, c_pb so a seeded generator
    yields a reproducible sequence.
    """
    vals = {name: rng.uniform(lo, hi) for name, (lo, hi) in PARAM_RANGES.items()}
    return HwParams(**vals)


@dataclass(frozen=True)
class SimConfig:
    """One simulation run: grid, physics, stepping and initial conditions."""

    grid_n: int
    params: HwParams
    dt: float = 0.005
    n_steps: int = 40000
    snapshot_every: int = 1
    seed: int = 0
    grf_amplitude: float = 0.01
    grf_corr_length: float | None = None  # None -> 4*dx
    cross_hyperdiffusion: bool = False

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.snapshot_every < 1:
            raise ValueError(
                f"snapshot_every must be >= 1, got {self.snapshot_every}"
            )
        if self.grf_amplitude <= 0.0:
            raise ValueError("grf_amplitude must be positive")

    def make_grid(self) -> Grid:
        return make_grid(self.grid_n, self.params.k0)


@dataclass(frozen=True)
class PlasmaState:
    """Instantaneous (Omega, phi, n) fields at time t.

    Producers keep phi consistent with Omega through the spectral Poisson
    solve; states loaded from 32-bit storage are consistent to single
    precision only.
    """

    omega: Field
    phi: Field
    n: Field
    t: float = 0.0

    def __post_init__(self):
        if not (self.omega.grid == self.phi.grid == self.n.grid):
            raise ValueError("omega, phi, n must share one grid")

    @property
    def grid(self) -> Grid:
        return self.omega.grid


def make_state(
    grid: Grid, omega: np.ndarray, n: np.ndarray, t: float = 0.0
) -> PlasmaState:
    """Assemble a state from (Omega, n) arrays, solving for phi."""
    omega = np.asarray(omega, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    phi = _poisson_phi(omega, grid)
    return PlasmaState(Field(grid, omega), Field(grid, phi), Field(grid, n), float(t))


class SimulationBlowup(RuntimeError):
    """Raised when the state leaves the finite / bounded regime."""

    def __init__(self, step: int, t: float, max_abs_omega: float):
        self.step = step
        self.t = t
        self.max_abs_omega = max_abs_omega
        super().__init__(
            f"simulation blew up at step {step} (t={t:.3f}), "
            f"max|Omega|={max_abs_omega:.3e}"
        )


def gaussian_random_field(
    grid: Grid,
    rng: np.random.Generator,
    amplitude: float = 0.01,
    corr_length: float | None = None,
) -> Field:
    """Zero-mean Gaussian random field with a Gaussian spectral envelope.

    White noise is filtered by exp(-|k|^2 l^2 / 2), the k = 0 mode is
    removed and the result rescaled to RMS exactly `amplitude`.

    Args:
        grid: target grid.
        rng: seeded generator (consumed: one n x n normal draw).
        amplitude: target RMS of the field.
        corr_length: envelope length l; defaults to 4 grid spacings.
    """
    if corr_length is None:
        corr_length = 4.0 * grid.dx
    noise = rng.standard_normal(grid.shape)
    spectrum = np.fft.fft2(noise)
    k2 = grid.kx[None, :] ** 2 + grid.ky[:, None] ** 2
    spectrum *= np.exp(-0.5 * k2 * corr_length**2)
    spectrum[0, 0] = 0.0
    values = np.fft.ifft2(spectrum).real
    rms = np.sqrt(np.mean(values**2))
    if rms == 0.0:
        raise ValueError("degenerate random field (zero variance)")
    values *= amplitude / rms
    return Field(grid, values)


def init_state(config: SimConfig) -> PlasmaState:
    """Initial condition: independent GRFs for Omega and n, phi solved.

    Substreams for the two fields are derived from `config.seed` with
    fixed spawn keys, so the draw is reproducible and independent of any
    other use of the seed.
    """
    grid = config.make_grid()
    ss = np.random.SeedSequence(config.seed)
    omega_rng, n_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    omega = gaussian_random_field(
        grid, omega_rng, config.grf_amplitude, config.grf_corr_length
    )
    n = gaussian_random_field(
        grid, n_rng, config.grf_amplitude, config.grf_corr_length
    )
    return make_state(grid, omega.values, n.values, t=0.0)


# ---------------------------------------------------------------------------
# right-hand side and time stepping
# ---------------------------------------------------------------------------


def _rhs_arrays(
    omega: np.ndarray,
    n: np.ndarray,
    phi: np.ndarray,
    grid: Grid,
    params: HwParams,
    cross_hyperdiffusion: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """(dOmega/dt, dn/dt) given consistent bare arrays."""
    dx = grid.dx
    coupling = params.c1 * (phi - n)
    hyper_omega = params.nu * _iterated_laplacian(omega, dx, params.hyper_order)
    hyper_n = params.nu * _iterated_laplacian(n, dx, params.hyper_order)
    if cross_hyperdiffusion:
        hyper_omega, hyper_n = hyper_n, hyper_omega
    d_omega = coupling - params.c_pb * _arakawa(phi, omega, dx) + hyper_omega
    d_n = (
        coupling
        - params.c_pb * _arakawa(phi, n, dx)
        - params.kappa * _ddy(phi, dx)
        + hyper_n
    )
    return d_omega, d_n


def hw_rhs(
    state: PlasmaState, params: HwParams, cross_hyperdiffusion: bool = False
) -> tuple[Field, Field]:
    """Field-level RHS (dOmega/dt, dn/dt) at `state`.

    Uses `state.phi` as given; callers are responsible for consistency
    with `state.omega`.
    """
    grid = state.grid
    d_omega, d_n = _rhs_arrays(
        state.omega.values,
        state.n.values,
        state.phi.values,
        grid,
        params,
        cross_hyperdiffusion,
    )
    return Field(grid, d_omega), Field(grid, d_n)


def rk4_update(
    y: tuple[np.ndarray, ...],
    rhs: Callable[[tuple[np.ndarray, ...]], tuple[np.ndarray, ...]],
    dt: float,
) -> tuple[np.ndarray, ...]:
    """One classical RK4 update of a tuple-valued ODE state.

    Generic over the state tuple so the HW stepper and convergence tests
    share the same tableau.
    """
    k1 = rhs(y)
    k2 = rhs(tuple(a + 0.5 * dt * k for a, k in zip(y, k1)))
    k3 = rhs(tuple(a + 0.5 * dt * k for a, k in zip(y, k2)))
    k4 = rhs(tuple(a + dt * k for a, k in zip(y, k3)))
    return tuple(
        a + (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
    )


def rk4_step(
    state: PlasmaState,
    params: HwParams,
    dt: float,
    cross_hyperdiffusion: bool = False,
) -> PlasmaState:
    """Advance one RK4 step; phi is re-solved at every stage.

    Raises:
        SimulationBlowup: if the updated state contains non-finite values
            or max|Omega| exceeds `BLOWUP_THRESHOLD`.
    """
    grid = state.grid

    def rhs(y: tuple[np.ndarray, ...]) -> tuple[np.ndarray, ...]:
        w, n = y
        phi = _poisson_phi(w, grid)
        return _rhs_arrays(w, n, phi, grid, params, cross_hyperdiffusion)

    omega, n = rk4_update((state.omega.values, state.n.values), rhs, dt)
    max_abs = float(np.max(np.abs(omega)))
    if not (
        np.isfinite(max_abs)
        and max_abs <= BLOWUP_THRESHOLD
        and np.all(np.isfinite(n))
    ):
        raise SimulationBlowup(step=-1, t=state.t + dt, max_abs_omega=max_abs)
    phi = _poisson_phi(omega, grid)
    return PlasmaState(
        Field(grid, omega), Field(grid, phi), Field(grid, n), state.t + dt
    )


@dataclass
class Trajectory:
    """Snapshots of one run plus per-step wall-clock (memory only).

    `step_seconds` is diagnostic and never serialized, so on-disk outputs
    stay bitwise reproducible.
    """

    states: list[PlasmaState]
    config: SimConfig
    step_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def params(self) -> HwParams:
        return self.config.params


def iter_simulate(config: SimConfig) -> Iterator[PlasmaState]:
    """Generate snapshots (including the initial state) on the cadence.

    Snapshot times are exact multiples step*dt (no accumulated-sum drift).
    Progress goes to the module logger; blow-ups re-raise with the step
    index filled in.
    """
    state = init_state(config)
    yield state
    t_start = time.perf_counter()
    for step in range(1, config.n_steps + 1):
        try:
            state = rk4_step(
                state, config.params, config.dt, config.cross_hyperdiffusion
            )
        except SimulationBlowup as err:
            raise SimulationBlowup(step, step * config.dt, err.max_abs_omega)
        state = replace(state, t=step * config.dt)
        if step % config.snapshot_every == 0:
            yield state
        if step % 5000 == 0:
            rate = step / (time.perf_counter() - t_start)
            log.info(
                "step %d/%d (t=%.1f, %.0f steps/s)",
                step,
                config.n_steps,
                state.t,
                rate,
            )


def simulate(config: SimConfig) -> Trajectory:
    """Run to completion, materializing snapshots and per-step timing."""
    states = []
    seconds = np.zeros(config.n_steps + 1)
    tick = time.perf_counter()
    for i, state in enumerate(iter_simulate(config)):
        tock = time.perf_counter()
        seconds[i] = tock - tick
        tick = tock
        states.append(state)
    # seconds[0] covers initialization; the rest cover snapshot_every steps
    return Trajectory(states, config, seconds[: len(states)])


def fluctuation_energy(state: PlasmaState) -> float:
    """Total fluctuation energy E = 1/2 * integral(n^2 + |grad phi|^2).

    The gradient is spectral (exact for band-limited phi); the quadrature
    is the grid sum times dx^2.
    """
    grid = state.grid
    phi_hat = np.fft.fft2(state.phi.values)
    dphidx = np.fft.ifft2(1j * grid.kx[None, :] * phi_hat).real
    dphidy = np.fft.ifft2(1j * grid.ky[:, None] * phi_hat).real
    dens = state.n.values
    return 0.5 * float(np.sum(dens**2 + dphidx**2 + dphidy**2)) * grid.dx**2
