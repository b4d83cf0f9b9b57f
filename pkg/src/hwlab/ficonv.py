"""Convolutional surrogate for one-step Hasegawa-Wakatani prediction.

The network maps an 8-channel input plane stack

    [Omega, phi, n, dt_i, c1, k0, kappa, c_pb]

(the last five are scalars broadcast to constant planes) to a 2-channel
raw increment field (Omega_raw, n_raw).  A hard initial-condition
constraint turns the raw output into the prediction

    Omega_pred = dt_i * Omega_raw * 100 + Omega_in
    n_pred     = dt_i * n_raw    * 20  + n_in

so at dt_i = 0 the network reproduces its input identically regardless
of weights.

Architecture: a U-Net whose encoder levels are ConvNeXt-V2 blocks
(depthwise 7x7 -> LayerNorm -> pointwise expand 4x -> GELU -> GRN ->
pointwise contract, residual) followed by 2x2 stride-2 downsampling
convs that double the width; the decoder mirrors with 2x2 stride-2
transposed convs, skip concatenation and a 3x3 mixing conv per level.
All convolutions pad circularly, matching the periodic domain, so the
whole map commutes with shifts by multiples of 16 cells.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .autodiff import Tensor, load_checkpoint, save_checkpoint
from .autodiff.ops import (
    add,
    concat,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    gelu,
    grn,
    layer_norm,
    linear,
    mul,
    scale,
    slice_channels,
)
from .hwsim import HwParams, PlasmaState, make_state
from .numerics import _poisson_phi

__all__ = [
    "INPUT_CHANNELS",
    "FiConvConfig",
    "Model",
    "init_model",
    "count_params",
    "assemble_input_array",
    "assemble_input",
    "apply_hard_constraint",
    "forward",
    "predict",
    "weight_checksum",
    "save_model",
    "load_model",
    "desk_config",
    "full_scale_config",
]

# fixed channel order of the input stack
INPUT_CHANNELS = ("omega", "phi", "n", "dt", "c1", "k0", "kappa", "c_pb")

OMEGA_SCALE = 100.0
N_SCALE = 20.0

_LEVELS = 4


@dataclass(frozen=True)
class FiConvConfig:
    """Architecture hyperparameters.

    `param_scaling` multiplies the five scalar channels (dt_i, c1, k0,
    kappa, c_pb) before broadcast; 1.0 everywhere by default.
    """

    grid_n: int
    base_width: int = 16
    blocks_per_level: tuple[int, int, int, int] = (1, 1, 1, 1)
    param_scaling: tuple[float, float, float, float, float] = (
        1.0, 1.0, 1.0, 1.0, 1.0,
    )
    dtype: str = "float32"

    def __post_init__(self):
        if self.grid_n < 16 or self.grid_n % 16 != 0:
            raise ValueError(
                f"grid_n must be a multiple of 16 (four 2x downsamplings), "
                f"got {self.grid_n}"
            )
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if len(self.blocks_per_level) != _LEVELS or any(
            b < 1 for b in self.blocks_per_level
        ):
            raise ValueError("blocks_per_level needs 4 entries >= 1")
        if len(self.param_scaling) != 5:
            raise ValueError("param_scaling needs 5 entries (dt + 4 params)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32/float64, got {self.dtype}")

    def width(self, level: int) -> int:
        """Channel width at encoder level 1..4."""
        return self.base_width * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return {
            "grid_n": self.grid_n,
            "base_width": self.base_width,
            "blocks_per_level": list(self.blocks_per_level),
            "param_scaling": list(self.param_scaling),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiConvConfig":
        return cls(
            grid_n=int(d["grid_n"]),
            base_width=int(d["base_width"]),
            blocks_per_level=tuple(int(b) for b in d["blocks_per_level"]),
            param_scaling=tuple(float(s) for s in d["param_scaling"]),
            dtype=str(d["dtype"]),
        )


def desk_config(grid_n: int = 32) -> FiConvConfig:
    """Small configuration for CPU-scale training.

    The physics scalars vary by only +-5..10% of their magnitude across
    the sampling box, which leaves the parameter channels numerically
    invisible next to the O(1) fields.  The preset therefore scales each
    by the inverse of its half-range (dt is left alone) so that in-box
    variation spans O(1) and the network can actually condition on it --
    a prerequisite for gradient-based parameter estimation.
    """
    return FiConvConfig(
        grid_n=grid_n, base_width=16,
        param_scaling=(1.0, 10.0, 20.0, 10.0, 20.0),
    )


def full_scale_config() -> FiConvConfig:
    """Reference-scale configuration (31,004,354 trainable parameters)."""
    return FiConvConfig(grid_n=128, base_width=64, blocks_per_level=(2, 3, 3, 8))


class Model:
    """Weights (insertion-ordered name -> Tensor) plus their config."""

    def __init__(self, config: FiConvConfig, weights: dict[str, Tensor]):
        self.config = config
        self.weights = weights

    def n_params(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.weights.values())

    def freeze(self) -> "Model":
        """Copy sharing values but with requires_grad off everywhere."""
        frozen = {
            name: Tensor(t.values, requires_grad=False)
            for name, t in self.weights.items()
        }
        return Model(self.config, frozen)

    def astype(self, dtype: str) -> "Model":
        """Cast a copy of the model to float32/float64."""
        cfg = dc_replace(self.config, dtype=dtype)
        cast = {
            name: Tensor(t.values.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self.weights.items()
        }
        return Model(cfg, cast)


def _weight_shapes(config: FiConvConfig):
    """Yield (name, shape) in forward order."""
    w = config.base_width
    yield "stem.w", (w, len(INPUT_CHANNELS), 3, 3)
    yield "stem.b", (1, w, 1, 1)
    for level in range(1, _LEVELS + 1):
        c = config.width(level)
        for i in range(config.blocks_per_level[level - 1]):
            p = f"enc{level}.block{i}."
            yield p + "dw.w", (c, 1, 7, 7)
            yield p + "dw.b", (1, c, 1, 1)
            yield p + "ln.g", (1, c, 1, 1)
            yield p + "ln.b", (1, c, 1, 1)
            yield p + "pw1.w", (4 * c, c, 1, 1)
            yield p + "pw1.b", (1, 4 * c, 1, 1)
            yield p + "grn.g", (1, 4 * c, 1, 1)
            yield p + "grn.b", (1, 4 * c, 1, 1)
            yield p + "pw2.w", (c, 4 * c, 1, 1)
            yield p + "pw2.b", (1, c, 1, 1)
        yield f"enc{level}.down.w", (2 * c, c, 2, 2)
        yield f"enc{level}.down.b", (1, 2 * c, 1, 1)
    for level in range(_LEVELS, 0, -1):
        c = config.width(level)
        yield f"dec{level}.up.w", (2 * c, c, 2, 2)  # transposed: (in, out, kh, kw)
        yield f"dec{level}.up.b", (1, c, 1, 1)
        yield f"dec{level}.mix.w", (c, 2 * c, 3, 3)
        yield f"dec{level}.mix.b", (1, c, 1, 1)
    yield "head.w", (2, config.base_width, 1, 1)
    yield "head.b", (1, 2, 1, 1)


def count_params(config: FiConvConfig) -> int:
    """Closed-form trainable parameter count.

    Per ConvNeXt block of width c: 8c^2 + 65c.  Stem/downs/decoder/head
    contribute 2890 w^2 + 135 w + 2 for base width w, so the total is
    w^2 (2890 + 8 B2) + w (135 + 65 B1) + 2 with B1 = sum(b_l 2^(l-1)),
    B2 = sum(b_l 4^(l-1)).
    """
    w = config.base_width
    b1 = sum(b * 2**i for i, b in enumerate(config.blocks_per_level))
    b2 = sum(b * 4**i for i, b in enumerate(config.blocks_per_level))
    return w * w * (2890 + 8 * b2) + w * (135 + 65 * b1) + 2


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) redrawn until all samples lie within 2 std."""
    values = rng.normal(0.0, std, size=shape)
    bad = np.abs(values) > 2.0 * std
    while bad.any():
        values[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(values) > 2.0 * std
    return values


def init_model(config: FiConvConfig, seed: int = 0) -> Model:
    """Fresh weights: trunc-normal(0.02) convs, zero biases.

    Norm affine terms follow the ConvNeXt convention: LayerNorm gamma 1 /
    beta 0, GRN gamma and beta 0 (so every block starts as a residual
    identity plus a vanishing branch).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights: dict[str, Tensor] = {}
    for name, shape in _weight_shapes(config):
        if name.endswith("ln.g"):
            values = np.ones(shape)
        elif name.endswith(".b") or name.endswith("grn.g"):
            values = np.zeros(shape)
        else:
            values = _trunc_normal(rng, shape, 0.02)
        weights[name] = Tensor(values.astype(config.dtype), requires_grad=True)
    return Model(config, weights)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _convnext_block(h: Tensor, weights: dict[str, Tensor], prefix: str) -> Tensor:
    y = depthwise_conv2d(h, weights[prefix + "dw.w"], weights[prefix + "dw.b"])
    y = layer_norm(y, weights[prefix + "ln.g"], weights[prefix + "ln.b"])
    y = linear(y, weights[prefix + "pw1.w"], weights[prefix + "pw1.b"])
    y = gelu(y)
    y = grn(y, weights[prefix + "grn.g"], weights[prefix + "grn.b"])
    y = linear(y, weights[prefix + "pw2.w"], weights[prefix + "pw2.b"])
    return add(y, h)


def forward(model: Model, x: Tensor) -> Tensor:
    """Raw 2-channel output (Omega_raw, n_raw) for input (N, 8, n, n)."""
    cfg = model.config
    w = model.weights
    if x.shape[1] != len(INPUT_CHANNELS):
        raise ValueError(f"expected {len(INPUT_CHANNELS)} input channels")
    if x.shape[2] != cfg.grid_n or x.shape[3] != cfg.grid_n:
        raise ValueError(f"expected {cfg.grid_n}^2 spatial extent, got {x.shape}")
    h = conv2d(x, w["stem.w"], w["stem.b"])
    skips = []
    for level in range(1, _LEVELS + 1):
        for i in range(cfg.blocks_per_level[level - 1]):
            h = _convnext_block(h, w, f"enc{level}.block{i}.")
        skips.append(h)
        h = conv2d(h, w[f"enc{level}.down.w"], w[f"enc{level}.down.b"], stride=2)
    for level in range(_LEVELS, 0, -1):
        h = conv_transpose2d(
            h, w[f"dec{level}.up.w"], w[f"dec{level}.up.b"], stride=2
        )
        h = concat([h, skips[level - 1]], axis=1)
        h = conv2d(h, w[f"dec{level}.mix.w"], w[f"dec{level}.mix.b"])
    return conv2d(h, w["head.w"], w["head.b"])


# ---------------------------------------------------------------------------
# input assembly and the hard constraint
# ---------------------------------------------------------------------------


def assemble_input_array(
    omega: np.ndarray,
    phi: np.ndarray,
    n: np.ndarray,
    dt_i: float,
    params: HwParams,
    config: FiConvConfig,
) -> np.ndarray:
    """(8, n, n) channel stack in `INPUT_CHANNELS` order, config dtype."""
    if not 0.0 <= dt_i <= 1.0 + 1e-9:
        raise ValueError(f"dt_i must lie in [0, 1], got {dt_i}")
    s = config.param_scaling
    scalars = (
        dt_i * s[0],
        params.c1 * s[1],
        params.k0 * s[2],
        params.kappa * s[3],
        params.c_pb * s[4],
    )
    shape = omega.shape
    planes = [omega, phi, n] + [np.full(shape, v) for v in scalars]
    return np.stack(planes).astype(config.dtype)


def assemble_input(
    state: PlasmaState, dt_i: float, params: HwParams, config: FiConvConfig
) -> Tensor:
    """Single-sample (1, 8, n, n) input tensor for `forward`."""
    stack = assemble_input_array(
        state.omega.values, state.phi.values, state.n.values, dt_i, params,
        config,
    )
    return Tensor(stack[None])


def apply_hard_constraint(raw: Tensor, x: Tensor, dt: Tensor) -> Tensor:
    """Turn raw output into the constrained prediction (Omega, n).

    Args:
        raw: (N, 2, n, n) network output.
        x: the (N, 8, n, n) input stack (only the Omega/n channels are read).
        dt: (N, 1, 1, 1) unscaled dt_i values, same dtype.

    At dt = 0 the result equals the input channels bitwise.
    """
    raw_omega = slice_channels(raw, 0, 1)
    raw_n = slice_channels(raw, 1, 2)
    in_omega = slice_channels(x, 0, 1)
    in_n = slice_channels(x, 2, 3)
    pred_omega = add(scale(mul(raw_omega, dt), OMEGA_SCALE), in_omega)
    pred_n = add(scale(mul(raw_n, dt), N_SCALE), in_n)
    return concat([pred_omega, pred_n], axis=1)


def predict(
    model: Model, state: PlasmaState, dt_i: float, params: HwParams
) -> PlasmaState:
    """One constrained network step from `state` to t + dt_i.

    The predicted (Omega, n) are lifted back to float64 and phi re-solved
    spectrally, so the result is a valid solver state.
    """
    x = assemble_input(state, dt_i, params, model.config)
    dt = Tensor(
        np.full((1, 1, 1, 1), dt_i, dtype=model.config.dtype)
    )
    pred = apply_hard_constraint(forward(model, x), x, dt)
    omega = pred.values[0, 0].astype(np.float64)
    n = pred.values[0, 1].astype(np.float64)
    if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(n))):
        raise FloatingPointError("non-finite prediction")
    return make_state(state.grid, omega, n, t=state.t + dt_i)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def weight_checksum(model: Model) -> str:
    """SHA-256 over names, shapes and raw weight bytes (order-sensitive)."""
    h = hashlib.sha256()
    for name, t in model.weights.items():
        h.update(name.encode())
        h.update(np.asarray(t.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(t.values).tobytes())
    return h.hexdigest()


def save_model(model: Model, path):
    save_checkpoint(
        path,
        {name: t.values for name, t in model.weights.items()},
        model.config.to_dict(),
    )


def load_model(path) -> Model:
    tensors, config_dict = load_checkpoint(path)
    config = FiConvConfig.from_dict(config_dict)
    expected = dict(_weight_shapes(config))
    if set(tensors) != set(expected):
        raise ValueError("checkpoint weight names do not match architecture")
    weights = {}
    for name, shape in expected.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(
                f"weight {name!r} has shape {arr.shape}, expected {shape}"
            )
        if arr.dtype != np.dtype(config.dtype):
            raise ValueError(f"weight {name!r} dtype mismatch")
        weights[name] = Tensor(arr, requires_grad=True)
    return Model(config, weights)
