"""Tests for the convolutional surrogate: architecture, constraint, I/O."""

import numpy as np
import pytest

from hwlab.autodiff import Tensor, backward, save_checkpoint
from hwlab.autodiff.ops import sum_all
from hwlab.ficonv import (
    INPUT_CHANNELS,
    N_SCALE,
    OMEGA_SCALE,
    FiConvConfig,
    Model,
    apply_hard_constraint,
    assemble_input,
    assemble_input_array,
    count_params,
    desk_config,
    forward,
    full_scale_config,
    init_model,
    load_model,
    predict,
    save_model,
    weight_checksum,
    _weight_shapes,
)
from hwlab.hwsim import HwParams, make_state
from hwlab.numerics import Grid, spectral_poisson_solve

PARAMS = HwParams(c1=1.0, k0=0.15, kappa=1.0, c_pb=1.0)


def tiny_config(grid_n: int = 32) -> FiConvConfig:
    """Narrow model so forward passes stay cheap in unit tests."""
    return FiConvConfig(grid_n=grid_n, base_width=4)


def rand_input(rng, config: FiConvConfig, batch: int = 1) -> Tensor:
    shape = (batch, len(INPUT_CHANNELS), config.grid_n, config.grid_n)
    return Tensor(rng.standard_normal(shape).astype(config.dtype))


class TestConfig:
    def test_grid_must_be_multiple_of_16(self):
        for n in (16, 32, 48, 128):
            assert FiConvConfig(grid_n=n).grid_n == n
        for n in (8, 24, 33, 0):
            with pytest.raises(ValueError, match="multiple of 16"):
                FiConvConfig(grid_n=n)

    def test_width_doubles_per_level(self):
        cfg = FiConvConfig(grid_n=32, base_width=16)
        assert [cfg.width(l) for l in (1, 2, 3, 4)] == [16, 32, 64, 128]

    def test_validation(self):
        with pytest.raises(ValueError):
            FiConvConfig(grid_n=32, base_width=0)
        with pytest.raises(ValueError):
            FiConvConfig(grid_n=32, blocks_per_level=(1, 1, 1))
        with pytest.raises(ValueError):
            FiConvConfig(grid_n=32, blocks_per_level=(1, 0, 1, 1))
        with pytest.raises(ValueError):
            FiConvConfig(grid_n=32, param_scaling=(1.0, 1.0))
        with pytest.raises(ValueError):
            FiConvConfig(grid_n=32, dtype="float16")

    def test_dict_round_trip(self):
        cfg = FiConvConfig(
            grid_n=64,
            base_width=8,
            blocks_per_level=(2, 1, 3, 1),
            param_scaling=(0.5, 1.0, 2.0, 1.0, 4.0),
            dtype="float64",
        )
        assert FiConvConfig.from_dict(cfg.to_dict()) == cfg

    def test_presets(self):
        desk = desk_config()
        assert (desk.grid_n, desk.base_width) == (32, 16)
        assert desk.blocks_per_level == (1, 1, 1, 1)
        full = full_scale_config()
        assert (full.grid_n, full.base_width) == (128, 64)
        assert full.blocks_per_level == (2, 3, 3, 8)


class TestParamCount:
    """The closed form must agree with the enumerated weight shapes."""

    def test_desk_count(self):
        assert count_params(desk_config()) == 931_682

    def test_full_scale_count(self):
        assert count_params(full_scale_config()) == 31_004_354

    @pytest.mark.parametrize(
        "config",
        [
            desk_config(),
            full_scale_config(),
            FiConvConfig(grid_n=32, base_width=8, blocks_per_level=(2, 1, 3, 1)),
            tiny_config(),
        ],
        ids=["desk", "full", "uneven", "tiny"],
    )
    def test_matches_shape_enumeration(self, config):
        total = sum(
            int(np.prod(shape)) for _, shape in _weight_shapes(config)
        )
        assert count_params(config) == total

    def test_matches_initialized_model(self):
        model = init_model(desk_config(), seed=0)
        assert model.n_params() == 931_682


class TestInit:
    def test_deterministic_per_seed(self):
        a = init_model(tiny_config(), seed=3)
        b = init_model(tiny_config(), seed=3)
        c = init_model(tiny_config(), seed=4)
        for name in a.weights:
            assert np.array_equal(a.weights[name].values, b.weights[name].values)
        assert weight_checksum(a) != weight_checksum(c)

    def test_norm_and_bias_conventions(self):
        model = init_model(tiny_config(), seed=0)
        for name, t in model.weights.items():
            if name.endswith("ln.g"):
                assert np.all(t.values == 1.0)
            elif name.endswith(".b") or name.endswith("grn.g"):
                assert np.all(t.values == 0.0)

    def test_truncated_normal_weights(self):
        # redraw beyond 2 sigma clips the support at +-0.04 and shrinks
        # the sample std below the nominal 0.02
        model = init_model(desk_config(), seed=1)
        w = model.weights["enc4.block0.pw1.w"].values
        assert np.abs(w).max() <= 0.04 + 1e-12
        assert 0.012 < w.std() < 0.022
        assert np.abs(w.mean()) < 0.003

    def test_dtype_and_grad_flags(self):
        model = init_model(tiny_config(), seed=0)
        for t in model.weights.values():
            assert t.values.dtype == np.float32
            assert t.requires_grad
        model64 = init_model(
            FiConvConfig(grid_n=32, base_width=4, dtype="float64"), seed=0
        )
        assert model64.weights["stem.w"].values.dtype == np.float64


class TestForward:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        y = forward(model, rand_input(rng, cfg, batch=2))
        assert y.shape == (2, 2, 32, 32)
        assert y.values.dtype == np.float32
        assert np.all(np.isfinite(y.values))

    def test_grid_16_reaches_1x1_bottom(self):
        # deepest encoder level is 1x1 there; the 7x7 depthwise pad then
        # exceeds the extent, which circular padding must support
        rng = np.random.default_rng(1)
        cfg = tiny_config(grid_n=16)
        model = init_model(cfg, seed=0)
        y = forward(model, rand_input(rng, cfg))
        assert y.shape == (1, 2, 16, 16)
        assert np.all(np.isfinite(y.values))

    def test_input_validation(self):
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        with pytest.raises(ValueError, match="channels"):
            forward(model, Tensor(np.zeros((1, 7, 32, 32), dtype=np.float32)))
        with pytest.raises(ValueError, match="extent"):
            forward(model, Tensor(np.zeros((1, 8, 16, 16), dtype=np.float32)))

    def test_shift_equivariance(self):
        """Rolling the input by 16 cells rolls the output identically.

        16 = 2^4 is the total downsampling factor, so such shifts commute
        with every stride-2 stage; circular padding supplies the rest.
        """
        rng = np.random.default_rng(2)
        cfg = tiny_config()
        model = init_model(cfg, seed=5)
        x = rand_input(rng, cfg)
        rolled = Tensor(np.roll(x.values, (16, 16), axis=(2, 3)))
        y = forward(model, x).values
        y_rolled = forward(model, rolled).values
        np.testing.assert_allclose(
            y_rolled, np.roll(y, (16, 16), axis=(2, 3)), rtol=0, atol=1e-6
        )

    def test_batch_consistency(self):
        rng = np.random.default_rng(3)
        cfg = tiny_config()
        model = init_model(cfg, seed=0)
        x = rand_input(rng, cfg, batch=3)
        y_all = forward(model, x).values
        for i in range(3):
            y_one = forward(model, Tensor(x.values[i : i + 1])).values
            np.testing.assert_array_equal(y_all[i : i + 1], y_one)


class TestHardConstraint:
    def make_parts(self, seed, n=8, batch=2, dtype=np.float32):
        rng = np.random.default_rng(seed)
        raw = Tensor(rng.standard_normal((batch, 2, n, n)).astype(dtype))
        x = Tensor(rng.standard_normal((batch, 8, n, n)).astype(dtype))
        return raw, x

    def test_zero_dt_is_bitwise_identity(self):
        raw, x = self.make_parts(0)
        dt = Tensor(np.zeros((2, 1, 1, 1), dtype=np.float32))
        pred = apply_hard_constraint(raw, x, dt).values
        assert np.array_equal(pred[:, 0], x.values[:, 0])
        assert np.array_equal(pred[:, 1], x.values[:, 2])

    def test_linear_in_raw_output(self):
        raw, x = self.make_parts(1)
        dt_val = 0.37
        dt = Tensor(np.full((2, 1, 1, 1), dt_val, dtype=np.float32))
        pred = apply_hard_constraint(raw, x, dt).values
        expect_omega = (
            raw.values[:, :1] * np.float32(dt_val)
        ) * OMEGA_SCALE + x.values[:, :1]
        expect_n = (
            raw.values[:, 1:2] * np.float32(dt_val)
        ) * N_SCALE + x.values[:, 2:3]
        np.testing.assert_array_equal(pred[:, :1], expect_omega)
        np.testing.assert_array_equal(pred[:, 1:2], expect_n)

    def test_gradient_reaches_raw_with_dt_scaling(self):
        raw, x = self.make_parts(2)
        raw = Tensor(raw.values, requires_grad=True)
        dt = Tensor(np.full((2, 1, 1, 1), 0.25, dtype=np.float32))
        backward(sum_all(apply_hard_constraint(raw, x, dt)))
        g = raw.grad
        np.testing.assert_allclose(g[:, 0], 0.25 * OMEGA_SCALE, rtol=1e-6)
        np.testing.assert_allclose(g[:, 1], 0.25 * N_SCALE, rtol=1e-6)

    def test_per_sample_dt(self):
        raw, x = self.make_parts(3)
        dt = Tensor(
            np.array([0.0, 0.5], dtype=np.float32).reshape(2, 1, 1, 1)
        )
        pred = apply_hard_constraint(raw, x, dt).values
        assert np.array_equal(pred[0, 0], x.values[0, 0])
        assert not np.array_equal(pred[1, 0], x.values[1, 0])


class TestAssembleInput:
    def test_channel_layout(self):
        rng = np.random.default_rng(0)
        cfg = tiny_config(16)
        omega = rng.standard_normal((16, 16))
        phi = rng.standard_normal((16, 16))
        n = rng.standard_normal((16, 16))
        stack = assemble_input_array(omega, phi, n, 0.3, PARAMS, cfg)
        assert stack.shape == (8, 16, 16)
        assert stack.dtype == np.float32
        np.testing.assert_array_equal(stack[0], omega.astype(np.float32))
        np.testing.assert_array_equal(stack[1], phi.astype(np.float32))
        np.testing.assert_array_equal(stack[2], n.astype(np.float32))
        for idx, value in zip(
            range(3, 8),
            (0.3, PARAMS.c1, PARAMS.k0, PARAMS.kappa, PARAMS.c_pb),
        ):
            plane = stack[idx]
            assert plane.min() == plane.max() == np.float32(value)

    def test_param_scaling_applied(self):
        cfg = FiConvConfig(
            grid_n=16, base_width=4, param_scaling=(2.0, 3.0, 4.0, 5.0, 6.0)
        )
        zeros = np.zeros((16, 16))
        stack = assemble_input_array(zeros, zeros, zeros, 0.5, PARAMS, cfg)
        expect = (
            0.5 * 2.0,
            PARAMS.c1 * 3.0,
            PARAMS.k0 * 4.0,
            PARAMS.kappa * 5.0,
            PARAMS.c_pb * 6.0,
        )
        for idx, value in zip(range(3, 8), expect):
            assert stack[idx][0, 0] == np.float32(value)

    def test_dt_bounds(self):
        cfg = tiny_config(16)
        zeros = np.zeros((16, 16))
        for bad in (-0.1, 1.5):
            with pytest.raises(ValueError, match="dt_i"):
                assemble_input_array(zeros, zeros, zeros, bad, PARAMS, cfg)
        # endpoints are allowed
        assemble_input_array(zeros, zeros, zeros, 0.0, PARAMS, cfg)
        assemble_input_array(zeros, zeros, zeros, 1.0, PARAMS, cfg)

    def test_assemble_from_state(self):
        rng = np.random.default_rng(4)
        grid = Grid(16, 0.15)
        state = make_state(
            grid,
            rng.standard_normal((16, 16)),
            rng.standard_normal((16, 16)),
            t=2.0,
        )
        cfg = tiny_config(16)
        x = assemble_input(state, 0.1, PARAMS, cfg)
        assert isinstance(x, Tensor)
        assert x.shape == (1, 8, 16, 16)
        expect = assemble_input_array(
            state.omega.values, state.phi.values, state.n.values, 0.1,
            PARAMS, cfg,
        )
        np.testing.assert_array_equal(x.values[0], expect)

    def test_float64_config(self):
        cfg = FiConvConfig(grid_n=16, base_width=4, dtype="float64")
        zeros = np.zeros((16, 16))
        stack = assemble_input_array(zeros, zeros, zeros, 0.2, PARAMS, cfg)
        assert stack.dtype == np.float64


class TestPredict:
    def setup_method(self):
        self.grid = Grid(32, 0.15)
        rng = np.random.default_rng(7)
        self.state = make_state(
            self.grid,
            rng.standard_normal((32, 32)),
            rng.standard_normal((32, 32)),
            t=1.5,
        )
        self.model = init_model(tiny_config(), seed=0)

    def test_advances_time_and_stays_valid(self):
        out = predict(self.model, self.state, 0.2, PARAMS)
        assert out.t == pytest.approx(1.7)
        assert out.omega.values.dtype == np.float64
        # phi must satisfy the spectral Poisson solve of the new omega
        phi = spectral_poisson_solve(out.omega)
        np.testing.assert_array_equal(out.phi.values, phi.values)

    def test_zero_dt_round_trips_through_float32(self):
        out = predict(self.model, self.state, 0.0, PARAMS)
        expect = self.state.omega.values.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(out.omega.values, expect)
        expect_n = self.state.n.values.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(out.n.values, expect_n)
        assert out.t == self.state.t

    def test_non_finite_prediction_raises(self):
        broken = init_model(tiny_config(), seed=0)
        bad = broken.weights["head.b"].values.copy()
        bad[:] = np.nan
        broken.weights["head.b"] = Tensor(bad, requires_grad=True)
        with pytest.raises(FloatingPointError):
            predict(broken, self.state, 0.1, PARAMS)


class TestFreezeAndCast:
    def test_freeze_shares_values_without_grad(self):
        model = init_model(tiny_config(), seed=0)
        frozen = model.freeze()
        for name, t in frozen.weights.items():
            assert t.values is model.weights[name].values
            assert not t.requires_grad
        assert weight_checksum(frozen) == weight_checksum(model)

    def test_astype_round_trip(self):
        model = init_model(tiny_config(), seed=0)
        lifted = model.astype("float64")
        assert lifted.config.dtype == "float64"
        assert lifted.weights["stem.w"].values.dtype == np.float64
        back = lifted.astype("float32")
        for name, t in back.weights.items():
            np.testing.assert_array_equal(
                t.values, model.weights[name].values
            )


class TestChecksum:
    def test_stable_and_seed_sensitive(self):
        a = init_model(tiny_config(), seed=0)
        assert weight_checksum(a) == weight_checksum(a)
        assert len(weight_checksum(a)) == 64
        b = init_model(tiny_config(), seed=1)
        assert weight_checksum(a) != weight_checksum(b)

    def test_single_entry_change_detected(self):
        model = init_model(tiny_config(), seed=0)
        before = weight_checksum(model)
        values = model.weights["stem.w"].values.copy()
        values[0, 0, 0, 0] += np.float32(1e-3)
        model.weights["stem.w"] = Tensor(values, requires_grad=True)
        assert weight_checksum(model) != before

    def test_order_sensitive(self):
        model = init_model(tiny_config(), seed=0)
        reordered = Model(
            model.config, dict(reversed(list(model.weights.items())))
        )
        assert weight_checksum(reordered) != weight_checksum(model)


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "model.ficw"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        assert weight_checksum(loaded) == weight_checksum(model)
        for t in loaded.weights.values():
            assert t.requires_grad

    def test_rejects_renamed_weight(self, tmp_path):
        model = init_model(tiny_config(), seed=0)
        arrays = {name: t.values for name, t in model.weights.items()}
        arrays["not.a.weight"] = arrays.pop("head.b")
        path = tmp_path / "renamed.ficw"
        save_checkpoint(path, arrays, model.config.to_dict())
        with pytest.raises(ValueError, match="names"):
            load_model(path)

    def test_rejects_wrong_shape(self, tmp_path):
        model = init_model(tiny_config(), seed=0)
        arrays = {name: t.values for name, t in model.weights.items()}
        arrays["head.b"] = np.zeros((1, 3, 1, 1), dtype=np.float32)
        path = tmp_path / "reshaped.ficw"
        save_checkpoint(path, arrays, model.config.to_dict())
        with pytest.raises(ValueError, match="shape"):
            load_model(path)

    def test_rejects_wrong_dtype(self, tmp_path):
        model = init_model(tiny_config(), seed=0)
        arrays = {
            name: t.values.astype(np.float64)
            for name, t in model.weights.items()
        }
        path = tmp_path / "cast.ficw"
        save_checkpoint(path, arrays, model.config.to_dict())
        with pytest.raises(ValueError, match="dtype"):
            load_model(path)
