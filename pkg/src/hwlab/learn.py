"""Training, evaluation, autoregressive rollout, and parameter inversion.

The loss mirrors the hard-constraint scalings: with prediction errors
dOmega and dn over a batch,

    loss = mean(dOmega^2) / 100 + mean(dn^2) / 20

(means over batch * pixels).  Training is plain AdamW with seeded
epoch shuffling; everything is bitwise reproducible given (data, seed).

Inversion freezes the network and runs AdamW on the four physical
scalars that enter the input stack as constant planes, minimizing the
same loss over a fixed batch of observed pairs.  Gradients reach the
scalars through the broadcast, so the network itself is the forward
model being inverted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamW, AdamWConfig, Tensor, backward
from .autodiff.ops import add, concat, mse, mul, scale, slice_channels
from .dataset import SnapshotPair
from .ficonv import (
    FiConvConfig,
    Model,
    N_SCALE,
    OMEGA_SCALE,
    apply_hard_constraint,
    assemble_input_array,
    forward,
    predict,
    save_model,
    weight_checksum,
)
from .hwsim import HwParams, PARAM_RANGES, PlasmaState, SimConfig, Trajectory

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalResult",
    "RolloutConfig",
    "RolloutDiverged",
    "InverseConfig",
    "InversionResult",
    "loss_terms",
    "pairs_to_arrays",
    "train",
    "evaluate",
    "rollout",
    "center_params",
    "invert",
    "mae",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("c1", "k0", "kappa", "c_pb")


def loss_terms(pred: Tensor, target: Tensor) -> Tensor:
    """Weighted two-channel MSE (see module docstring); scalar tensor."""
    omega_term = mse(slice_channels(pred, 0, 1), slice_channels(target, 0, 1))
    n_term = mse(slice_channels(pred, 1, 2), slice_channels(target, 1, 2))
    return add(
        scale(omega_term, 1.0 / OMEGA_SCALE), scale(n_term, 1.0 / N_SCALE)
    )


def pairs_to_arrays(
    pairs: list[SnapshotPair], config: FiConvConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack pairs into (inputs (P,8,n,n), targets (P,2,n,n), dts (P,))."""
    xs, ys, dts = [], [], []
    for pair in pairs:
        xs.append(
            assemble_input_array(
                pair.input.omega.values,
                pair.input.phi.values,
                pair.input.n.values,
                pair.dt_i,
                pair.params,
                config,
            )
        )
        ys.append(
            np.stack(
                [pair.target.omega.values, pair.target.n.values]
            ).astype(config.dtype)
        )
        dts.append(pair.dt_i)
    return np.stack(xs), np.stack(ys), np.asarray(dts, dtype=config.dtype)


def _per_pair_loss(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample weighted loss (float64 accumulation)."""
    d = pred.astype(np.float64) - target.astype(np.float64)
    omega_term = np.mean(d[:, 0] ** 2, axis=(1, 2)) / OMEGA_SCALE
    n_term = np.mean(d[:, 1] ** 2, axis=(1, 2)) / N_SCALE
    return omega_term + n_term


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 30
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only final
    out_dir: str | None = None


@dataclass
class TrainResult:
    model: Model
    loss_steps: np.ndarray  # (steps,)
    loss_values: np.ndarray  # (steps,)

    def smoothed_drop(self, head: int = 20, tail: int = 100) -> float:
        """Ratio of early to late training loss (batch-noise robust)."""
        head = min(head, len(self.loss_values))
        tail = min(tail, len(self.loss_values))
        return float(
            self.loss_values[:head].mean() / self.loss_values[-tail:].mean()
        )


def train(
    model: Model, pairs: list[SnapshotPair], config: TrainConfig
) -> TrainResult:
    """AdamW training on shuffled minibatches of snapshot pairs.

    Batches walk seeded epoch permutations; the tail of an epoch shorter
    than `batch_size` is dropped.  Loss per step is recorded; checkpoints
    (optional) and the loss log go to `config.out_dir`.
    """
    if len(pairs) < config.batch_size:
        raise ValueError(
            f"{len(pairs)} pairs < batch size {config.batch_size}"
        )
    inputs, targets, dts = pairs_to_arrays(pairs, model.config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    opt = AdamW(
        model.weights,
        AdamWConfig(
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        ),
    )
    steps_log = np.zeros(config.steps, dtype=np.int64)
    loss_log = np.zeros(config.steps)
    order = rng.permutation(len(pairs))
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(pairs))
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        x = Tensor(inputs[idx])
        y = Tensor(targets[idx])
        dt = Tensor(dts[idx].reshape(-1, 1, 1, 1))
        pred = apply_hard_constraint(forward(model, x), x, dt)
        loss = loss_terms(pred, y)
        opt.zero_grad()
        backward(loss)
        opt.step()
        steps_log[step] = step
        loss_log[step] = loss.item()
        if config.log_every and step % config.log_every == 0:
            log.info("train step %d loss %.3e", step, loss_log[step])
        if (
            config.out_dir
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
        ):
            save_model(model, f"{config.out_dir}/checkpoint_{step + 1:06d}.ficw")
    if config.out_dir:
        save_model(model, f"{config.out_dir}/model.ficw")
        with open(f"{config.out_dir}/loss.csv", "w") as fh:
            fh.write("step,loss\n")
            for s, v in zip(steps_log, loss_log):
                fh.write(f"{s},{v:.17g}\n")
    return TrainResult(model, steps_log, loss_log)


@dataclass
class EvalResult:
    """Aggregate and per-pair one-step losses, with persistence baseline."""

    model_mse: float
    persistence_mse: float
    per_pair: np.ndarray
    per_pair_persistence: np.ndarray
    dt_i: np.ndarray

    def beats_persistence_fraction(self, max_dt: float | None = None) -> float:
        """Fraction of pairs (optionally dt_i <= max_dt) the model wins."""
        mask = (
            np.ones_like(self.dt_i, dtype=bool)
            if max_dt is None
            else self.dt_i <= max_dt + 1e-9
        )
        if not mask.any():
            raise ValueError("no pairs in the requested dt_i range")
        wins = self.per_pair[mask] < self.per_pair_persistence[mask]
        return float(wins.mean())


def evaluate(
    model: Model, pairs: list[SnapshotPair], batch_size: int = 32
) -> EvalResult:
    """One-step losses on `pairs` plus the persistence baseline.

    Persistence predicts target = input; beating it is the minimum bar
    for having learned any dynamics.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    inputs, targets, dts = pairs_to_arrays(pairs, model.config)
    frozen = model.freeze()
    chunks = []
    for lo in range(0, len(pairs), batch_size):
        x = Tensor(inputs[lo:lo + batch_size])
        dt = Tensor(dts[lo:lo + batch_size].reshape(-1, 1, 1, 1))
        pred = apply_hard_constraint(forward(frozen, x), x, dt)
        chunks.append(pred.values)
    pred_all = np.concatenate(chunks)
    per_pair = _per_pair_loss(pred_all, targets)
    persistence = np.stack([inputs[:, 0], inputs[:, 2]], axis=1)
    per_pair_persistence = _per_pair_loss(persistence, targets)
    return EvalResult(
        model_mse=float(per_pair.mean()),
        persistence_mse=float(per_pair_persistence.mean()),
        per_pair=per_pair,
        per_pair_persistence=per_pair_persistence,
        dt_i=np.asarray([p.dt_i for p in pairs]),
    )


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


class RolloutDiverged(RuntimeError):
    """Autoregressive prediction left the finite range."""


@dataclass(frozen=True)
class RolloutConfig:
    dt_step: float = 1.0
    n_steps: int = 100

    def __post_init__(self):
        if not 0.0 < self.dt_step <= 1.0:
            raise ValueError("dt_step must lie in (0, 1]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def rollout(
    model: Model,
    initial: PlasmaState,
    params: HwParams,
    config: RolloutConfig,
) -> Trajectory:
    """Iterate the one-step surrogate from `initial`.

    Each prediction is lifted to float64 with phi re-solved before being
    fed back, so the surrogate always sees self-consistent states.
    """
    frozen = model.freeze()
    states = [initial]
    state = initial
    for step in range(config.n_steps):
        try:
            state = predict(frozen, state, config.dt_step, params)
        except FloatingPointError as err:
            raise RolloutDiverged(
                f"rollout diverged at step {step + 1}: {err}"
            ) from err
        states.append(state)
    sim_config = SimConfig(
        grid_n=initial.grid.n,
        params=params,
        dt=config.dt_step,
        n_steps=config.n_steps,
        snapshot_every=1,
    )
    return Trajectory(states, sim_config)


# ---------------------------------------------------------------------------
# inverse problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InverseConfig:
    lr: float = 0.01
    steps: int = 400
    weight_decay: float = 0.0  # decay would bias physical estimates to 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: HwParams | None = None  # None -> sampling-box center


@dataclass
class InversionResult:
    """Estimates plus full optimization traces.

    `param_trace[0]` is the initial guess (before any update); row i > 0
    is the state after update i.  `estimate` is ordered (c1, k0, kappa,
    c_pb).
    """

    estimate: np.ndarray
    loss_trace: np.ndarray
    param_trace: np.ndarray
    checksum_before: str = ""
    checksum_after: str = ""

    def as_params(self, template: HwParams | None = None) -> HwParams:
        nu = template.nu if template else 5e-10
        order = template.hyper_order if template else 3
        c1, k0, kappa, c_pb = (float(v) for v in self.estimate)
        return HwParams(c1=c1, k0=k0, kappa=kappa, c_pb=c_pb, nu=nu,
                        hyper_order=order)


def center_params() -> HwParams:
    """Center of the sampling box - the default initial guess."""
    mid = {k: 0.5 * (lo + hi) for k, (lo, hi) in PARAM_RANGES.items()}
    return HwParams(**mid)


def invert(
    model: Model, pairs: list[SnapshotPair], config: InverseConfig
) -> InversionResult:
    """Estimate (c1, k0, kappa, c_pb) from observed pairs.

    The network weights are frozen (checksummed before and after); the
    four scalars are unconstrained leaves updated by AdamW at whatever
    the loss gradient through their constant input planes says.  The dt_i
    channel keeps its true per-pair values - only physics parameters are
    unknown.
    """
    if not pairs:
        raise ValueError("no pairs to invert from")
    frozen = model.freeze()
    checksum_before = weight_checksum(frozen)
    dtype = model.config.dtype
    scaling = model.config.param_scaling
    inputs, targets, dts = pairs_to_arrays(pairs, model.config)
    n_pairs, _, n, _ = inputs.shape
    # channels 0-3 (fields + dt) are data; channels 4-7 come from leaves
    const = Tensor(inputs[:, :4])
    target_t = Tensor(targets)
    dt_t = Tensor(dts.reshape(-1, 1, 1, 1))
    ones_plane = Tensor(np.ones((n_pairs, 1, n, n), dtype=dtype))
    init = config.init if config.init is not None else center_params()
    leaves = {
        name: Tensor(
            np.full((1, 1, 1, 1), getattr(init, name), dtype=dtype),
            requires_grad=True,
        )
        for name in PARAM_NAMES
    }
    opt = AdamW(
        leaves,
        AdamWConfig(
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        ),
    )
    loss_trace = np.zeros(config.steps + 1)
    param_trace = np.zeros((config.steps + 1, len(PARAM_NAMES)))
    param_trace[0] = [leaves[k].item() for k in PARAM_NAMES]
    for step in range(config.steps):
        planes = [
            scale(mul(ones_plane, leaves[name]), scaling[1 + i])
            for i, name in enumerate(PARAM_NAMES)
        ]
        x = concat([const] + planes, axis=1)
        pred = apply_hard_constraint(forward(frozen, x), x, dt_t)
        loss = loss_terms(pred, target_t)
        loss_trace[step] = loss.item()
        opt.zero_grad()
        backward(loss)
        opt.step()
        param_trace[step + 1] = [leaves[k].item() for k in PARAM_NAMES]
        if step % 50 == 0:
            log.info(
                "invert step %d loss %.3e params %s",
                step, loss_trace[step],
                np.array2string(param_trace[step + 1], precision=4),
            )
    # closing loss at the final parameter values
    planes = [
        scale(mul(ones_plane, leaves[name]), scaling[1 + i])
        for i, name in enumerate(PARAM_NAMES)
    ]
    x = concat([const] + planes, axis=1)
    pred = apply_hard_constraint(forward(frozen, x), x, dt_t)
    loss_trace[config.steps] = loss_terms(pred, target_t).item()
    return InversionResult(
        estimate=param_trace[-1].copy(),
        loss_trace=loss_trace,
        param_trace=param_trace,
        checksum_before=checksum_before,
        checksum_after=weight_checksum(frozen),
    )


def mae(true: HwParams, estimate: np.ndarray) -> np.ndarray:
    """Absolute error per parameter, ordered (c1, k0, kappa, c_pb)."""
    truth = np.asarray([getattr(true, k) for k in PARAM_NAMES])
    return np.abs(truth - np.asarray(estimate, dtype=np.float64))
