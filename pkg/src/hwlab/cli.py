"""Command-line pipeline: simulate -> dataset -> train -> eval / rollout /
invert, plus diagnostics.

Every command follows one grammar:

    hwlab <command> --config PATH [--set SECTION.KEY=VALUE]... --out DIR --seed N

The merged effective configuration (file + overrides) is echoed to
OUT/config.ini, and all randomness of a command flows from the root seed
through named substreams, so rerunning with the same config and seed
reproduces every output file bit for bit.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 blow-up.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics
from .autodiff.checkpoint import CheckpointError
from .dataset import (
    DataFormatError,
    DatasetManifest,
    InstanceMeta,
    TrajectoryWriter,
    extract_pairs,
    read_dataset,
    read_trajectory,
    reduced_config,
    split_instances,
    subsample_pairs,
    write_dataset,
)
from .ficonv import FiConvConfig, init_model, load_model
from .hwsim import (
    HwParams,
    SimConfig,
    SimulationBlowup,
    iter_simulate,
    sample_params,
)
from .learn import (
    InverseConfig,
    RolloutConfig,
    TrainConfig,
    center_params,
    evaluate,
    invert,
    mae,
    rollout,
    train,
)

log = logging.getLogger("hwlab")


class ConfigError(Exception):
    """Missing or invalid configuration."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

REFERENCE_CONFIG = """\
; hwlab reference configuration (all defaults, reference-scale physics)

[simulate]
grid_n = 128
dt = 0.005
n_steps = 40000
snapshot_every = 20
n_instances = 1
sample_params = false         ; true -> draw c1/k0/kappa/c_pb per instance
c1 = 1.0
k0 = 0.6
kappa = 1.0
c_pb = 1.0
nu = 5e-10
hyper_order = 3
grf_amplitude = 0.01
grf_corr_length =             ; empty -> 4 grid spacings
cross_hyperdiffusion = false

[dataset]
trajectory_dir =
t_cut = 100.0
max_dt = 1.0
pairs_per_instance = 500
train_fraction = 0.75
reduction = none              ; none | reduced_instances | reduced_sampling

[model]
base_width = 16
blocks_per_level = 1,1,1,1
param_scaling = 1,10,20,10,20  ; dt, then inverse half-range per scalar
dtype = float32

[train]
train_data =
test_data =
steps = 2000
batch_size = 30
lr = 3e-4
weight_decay = 0.01
log_every = 50
checkpoint_every = 0

[eval]
checkpoint =
data =

[rollout]
checkpoint =
trajectory =
t_start = 100.0
dt_step = 1.0
n_steps = 100

[invert]
checkpoint =
data =
instance = random             ; test-instance index, or "random"
n_pairs = 32
lr = 0.01
steps = 400
weight_decay = 0.0

[diagnose]
trajectory =
t_lo = 300.0
t_hi = 400.0
spectrum_snapshots = 5
fit_low_shells = 2,6          ; radial-shell range (units of k0) for the low-k slope
fit_high_shells = 10,30
"""


def _new_parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(inline_comment_prefixes=(";",))


def load_config(path: str, overrides: list[str]) -> configparser.ConfigParser:
    cp = _new_parser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key.strip()] = value.strip()
    return cp


def echo_config(cp: configparser.ConfigParser, out_dir: Path):
    with open(out_dir / "config.ini", "w") as fh:
        cp.write(fh)


_REQUIRED = object()


def _get(cp, section: str, key: str, convert, default=_REQUIRED):
    try:
        raw = cp[section][key]
    except KeyError:
        if default is _REQUIRED:
            raise ConfigError(f"missing config key [{section}] {key}")
        return default
    raw = raw.strip()
    if raw == "":
        if default is _REQUIRED:
            raise ConfigError(f"config key [{section}] {key} is empty")
        return default
    try:
        return convert(raw)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"bad value for [{section}] {key}: {err}") from err


def _to_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split(","))


def _to_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split(","))


def _substream(root_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(root_seed, spawn_key=key)
    )


def _substream_seed(root_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(root_seed, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


# named substream keys off the root seed
_SK_SIM = 0
_SK_DATASET = 1
_SK_MODEL = 2
_SK_TRAIN = 3
_SK_INVERT = 4


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cp, out_dir: Path, seed: int) -> int:
    sec = "simulate"
    n_instances = _get(cp, sec, "n_instances", int, 1)
    do_sample = _get(cp, sec, "sample_params", _to_bool, False)
    base = dict(
        nu=_get(cp, sec, "nu", float, 5e-10),
        hyper_order=_get(cp, sec, "hyper_order", int, 3),
    )
    params_rng = _substream(seed, _SK_SIM, 0)
    for i in range(n_instances):
        if do_sample:
            drawn = sample_params(params_rng)
            params = HwParams(
                c1=drawn.c1, k0=drawn.k0, kappa=drawn.kappa, c_pb=drawn.c_pb,
                **base,
            )
        else:
            params = HwParams(
                c1=_get(cp, sec, "c1", float, 1.0),
                k0=_get(cp, sec, "k0", float, 0.6),
                kappa=_get(cp, sec, "kappa", float, 1.0),
                c_pb=_get(cp, sec, "c_pb", float, 1.0),
                **base,
            )
        config = SimConfig(
            grid_n=_get(cp, sec, "grid_n", int),
            params=params,
            dt=_get(cp, sec, "dt", float, 0.005),
            n_steps=_get(cp, sec, "n_steps", int, 40000),
            snapshot_every=_get(cp, sec, "snapshot_every", int, 1),
            seed=_substream_seed(seed, _SK_SIM, 1, i),
            grf_amplitude=_get(cp, sec, "grf_amplitude", float, 0.01),
            grf_corr_length=_get(cp, sec, "grf_corr_length", float, None),
            cross_hyperdiffusion=_get(
                cp, sec, "cross_hyperdiffusion", _to_bool, False
            ),
        )
        traj_path = out_dir / f"traj_{i:04d}.hwtj"
        times, g_n, g_c = [], [], []
        log.info("instance %d/%d: params %s", i + 1, n_instances, params)
        with TrajectoryWriter(traj_path, config) as writer:
            for state in iter_simulate(config):
                writer.append(state)
                times.append(state.t)
                g_n.append(diagnostics.gamma_n(state))
                g_c.append(diagnostics.gamma_c(state, params))
        series = diagnostics.QoiSeries(
            np.asarray(times), np.asarray(g_n), np.asarray(g_c)
        )
        diagnostics.qoi_to_csv(series, out_dir / f"qoi_{i:04d}.csv")
    return 0


def cmd_dataset(cp, out_dir: Path, seed: int) -> int:
    sec = "dataset"
    traj_dir = Path(_get(cp, sec, "trajectory_dir", str))
    t_cut = _get(cp, sec, "t_cut", float, 100.0)
    max_dt = _get(cp, sec, "max_dt", float, 1.0)
    per_instance = _get(cp, sec, "pairs_per_instance", int, 500)
    fraction = _get(cp, sec, "train_fraction", float, 0.75)
    reduction = _get(cp, sec, "reduction", str, "none")
    files = sorted(traj_dir.glob("*.hwtj"))
    if len(files) < 2:
        raise DataFormatError(
            f"need >= 2 trajectories in {traj_dir}, found {len(files)}"
        )
    headers = [read_trajectory(f) for f in files]
    metas = [
        InstanceMeta(i, traj.params, traj.config.seed, pair_count=per_instance)
        for i, traj in enumerate(headers)
    ]
    split_instances(metas, fraction, _substream(seed, _SK_DATASET, 0))
    manifest = DatasetManifest(
        grid_n=headers[0].config.grid_n, t_cut=t_cut, max_dt=max_dt,
        instances=metas,
    )
    if reduction != "none":
        manifest = reduced_config(
            manifest, reduction, _substream(seed, _SK_DATASET, 1)
        )
    manifest.validate()
    kept = {m.instance_id: m for m in manifest.instances}
    train_pairs, test_pairs = [], []
    for i, traj in enumerate(headers):
        meta = kept.get(i)
        if meta is None:
            continue
        pairs = extract_pairs(
            traj, per_instance, _substream(seed, _SK_DATASET, 2, i),
            max_dt=max_dt, t_cut=t_cut, instance_id=i,
        )
        if meta.pair_count < len(pairs):
            pairs = subsample_pairs(
                pairs, meta.pair_count, _substream(seed, _SK_DATASET, 3, i)
            )
        (train_pairs if meta.split == "train" else test_pairs).extend(pairs)
    write_dataset(train_pairs, out_dir / "train.hwds")
    write_dataset(test_pairs, out_dir / "test.hwds")
    manifest.write(out_dir / "dataset.manifest")
    log.info(
        "wrote %d train / %d test pairs from %d instances",
        len(train_pairs), len(test_pairs), len(kept),
    )
    return 0


def _model_config(cp, grid_n: int) -> FiConvConfig:
    return FiConvConfig(
        grid_n=grid_n,
        base_width=_get(cp, "model", "base_width", int, 16),
        blocks_per_level=_get(cp, "model", "blocks_per_level", _to_ints,
                              (1, 1, 1, 1)),
        param_scaling=_get(cp, "model", "param_scaling", _to_floats,
                           (1.0, 10.0, 20.0, 10.0, 20.0)),
        dtype=_get(cp, "model", "dtype", str, "float32"),
    )


def cmd_train(cp, out_dir: Path, seed: int) -> int:
    train_pairs = read_dataset(_get(cp, "train", "train_data", str))
    test_pairs = read_dataset(_get(cp, "train", "test_data", str))
    grid_n = train_pairs[0].input.grid.n
    try:
        model_config = _model_config(cp, grid_n)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    model = init_model(model_config, seed=_substream_seed(seed, _SK_MODEL))
    config = TrainConfig(
        steps=_get(cp, "train", "steps", int, 2000),
        batch_size=_get(cp, "train", "batch_size", int, 30),
        lr=_get(cp, "train", "lr", float, 3e-4),
        weight_decay=_get(cp, "train", "weight_decay", float, 0.01),
        seed=_substream_seed(seed, _SK_TRAIN),
        log_every=_get(cp, "train", "log_every", int, 50),
        checkpoint_every=_get(cp, "train", "checkpoint_every", int, 0),
        out_dir=str(out_dir),
    )
    result = train(model, train_pairs, config)
    ev = evaluate(result.model, test_pairs)
    with open(out_dir / "eval.ini", "w") as fh:
        fh.write("[eval]\n")
        fh.write(f"model_mse = {ev.model_mse:.17g}\n")
        fh.write(f"persistence_mse = {ev.persistence_mse:.17g}\n")
        fh.write(f"n_pairs = {len(ev.per_pair)}\n")
    log.info(
        "final train loss %.3e, test mse %.3e (persistence %.3e)",
        result.loss_values[-1], ev.model_mse, ev.persistence_mse,
    )
    return 0


def cmd_eval(cp, out_dir: Path, seed: int) -> int:
    model = load_model(_get(cp, "eval", "checkpoint", str))
    pairs = read_dataset(_get(cp, "eval", "data", str))
    ev = evaluate(model, pairs)
    with open(out_dir / "eval.csv", "w") as fh:
        fh.write("dt_i,model_loss,persistence_loss\n")
        for dt_i, m, p in zip(ev.dt_i, ev.per_pair, ev.per_pair_persistence):
            fh.write(f"{dt_i:.17g},{m:.17g},{p:.17g}\n")
    print(
        f"model mse {ev.model_mse:.6e}  persistence {ev.persistence_mse:.6e}"
        f"  wins {ev.beats_persistence_fraction():.1%}"
    )
    return 0


def cmd_rollout(cp, out_dir: Path, seed: int) -> int:
    model = load_model(_get(cp, "rollout", "checkpoint", str))
    source = read_trajectory(_get(cp, "rollout", "trajectory", str))
    t_start = _get(cp, "rollout", "t_start", float, 100.0)
    config = RolloutConfig(
        dt_step=_get(cp, "rollout", "dt_step", float, 1.0),
        n_steps=_get(cp, "rollout", "n_steps", int, 100),
    )
    start_idx = int(np.searchsorted(source.times, t_start - 1e-9))
    if start_idx >= len(source.states):
        raise DataFormatError(
            f"no snapshot at or after t_start={t_start}"
        )
    initial = source.states[start_idx]
    # lift the stored f32 snapshot to a solver-consistent f64 state
    from .hwsim import make_state

    initial = make_state(
        initial.grid,
        initial.omega.values.astype(np.float64),
        initial.n.values.astype(np.float64),
        t=initial.t,
    )
    predicted = rollout(model, initial, source.params, config)
    from .dataset import write_trajectory

    write_trajectory(predicted, out_dir / "rollout.hwtj")
    series = diagnostics.qoi_series(predicted)
    diagnostics.qoi_to_csv(series, out_dir / "rollout_qoi.csv")
    return 0


def cmd_invert(cp, out_dir: Path, seed: int) -> int:
    model = load_model(_get(cp, "invert", "checkpoint", str))
    pairs = read_dataset(_get(cp, "invert", "data", str))
    n_pairs = _get(cp, "invert", "n_pairs", int, 32)
    instance_key = _get(cp, "invert", "instance", str, "random")
    groups: dict[tuple, list] = {}
    for p in pairs:
        groups.setdefault(tuple(p.params.free_values()), []).append(p)
    keys = sorted(groups)
    if instance_key == "random":
        rng = _substream(seed, _SK_INVERT, 0)
        key = keys[int(rng.integers(len(keys)))]
    else:
        idx = int(instance_key)
        if not 0 <= idx < len(keys):
            raise ConfigError(
                f"instance index {idx} out of range (have {len(keys)})"
            )
        key = keys[idx]
    candidates = groups[key]
    if len(candidates) > n_pairs:
        candidates = subsample_pairs(
            candidates, n_pairs, _substream(seed, _SK_INVERT, 1)
        )
    config = InverseConfig(
        lr=_get(cp, "invert", "lr", float, 0.01),
        steps=_get(cp, "invert", "steps", int, 400),
        weight_decay=_get(cp, "invert", "weight_decay", float, 0.0),
        init=center_params(),
    )
    result = invert(model, candidates, config)
    truth = candidates[0].params
    errors = mae(truth, result.estimate)
    with open(out_dir / "trace.csv", "w") as fh:
        fh.write("step,loss,c1,k0,kappa,c_pb\n")
        for i in range(len(result.loss_trace)):
            row = ",".join(f"{v:.17g}" for v in result.param_trace[i])
            fh.write(f"{i},{result.loss_trace[i]:.17g},{row}\n")
    with open(out_dir / "estimate.ini", "w") as fh:
        fh.write("[estimate]\n")
        for name, value, err in zip(
            ("c1", "k0", "kappa", "c_pb"), result.estimate, errors
        ):
            fh.write(f"{name} = {value:.17g}\n")
            fh.write(f"{name}_true = {getattr(truth, name):.17g}\n")
            fh.write(f"{name}_abs_error = {err:.17g}\n")
        fh.write(f"initial_loss = {result.loss_trace[0]:.17g}\n")
        fh.write(f"final_loss = {result.loss_trace[-1]:.17g}\n")
    print(
        "estimate:",
        ", ".join(
            f"{n}={v:.4f}" for n, v in zip(("c1", "k0", "kappa", "c_pb"),
                                           result.estimate)
        ),
    )
    return 0


def cmd_diagnose(cp, out_dir: Path, seed: int) -> int:
    traj = read_trajectory(_get(cp, "diagnose", "trajectory", str))
    t_lo = _get(cp, "diagnose", "t_lo", float, 300.0)
    t_hi = _get(cp, "diagnose", "t_hi", float, 400.0)
    n_spec = _get(cp, "diagnose", "spectrum_snapshots", int, 5)
    low_shells = _get(cp, "diagnose", "fit_low_shells", _to_ints, (2, 6))
    high_shells = _get(cp, "diagnose", "fit_high_shells", _to_ints, (10, 30))
    series = diagnostics.qoi_series(traj)
    diagnostics.qoi_to_csv(series, out_dir / "qoi.csv")
    stats = diagnostics.temporal_stats(series, t_lo, t_hi)
    spec_states = traj.states[-max(1, n_spec):]
    spectra = [diagnostics.grad_phi_spectrum(s) for s in spec_states]
    k_bins = spectra[0].k_bins
    power = np.mean([s.power for s in spectra], axis=0)
    spectrum = diagnostics.RadialSpectrum(k_bins, power)
    diagnostics.spectrum_to_csv(spectrum, out_dir / "spectrum.csv")
    k0 = traj.params.k0
    slopes = {}
    for label, (lo, hi) in (("low", low_shells), ("high", high_shells)):
        try:
            slopes[label] = diagnostics.fit_loglog_slope(
                spectrum, lo * k0, hi * k0
            )
        except ValueError as err:
            raise ConfigError(f"slope fit ({label}): {err}") from err
    fft = diagnostics.series_fft(series.window(t_lo, t_hi))
    diagnostics.series_spectrum_to_csv(fft, out_dir / "qoi_fft.csv")
    with open(out_dir / "diagnostics.ini", "w") as fh:
        fh.write("[qoi]\n")
        fh.write(f"gamma_n_mean = {stats.gamma_n_mean:.17g}\n")
        fh.write(f"gamma_n_std = {stats.gamma_n_std:.17g}\n")
        fh.write(f"gamma_c_mean = {stats.gamma_c_mean:.17g}\n")
        fh.write(f"gamma_c_std = {stats.gamma_c_std:.17g}\n")
        fh.write("[spectrum]\n")
        fh.write(f"slope_low_k = {slopes['low']:.17g}\n")
        fh.write(f"slope_high_k = {slopes['high']:.17g}\n")
    print(
        f"gamma_n {stats.gamma_n_mean:.3f}+-{stats.gamma_n_std:.3f}  "
        f"gamma_c {stats.gamma_c_mean:.3f}+-{stats.gamma_c_std:.3f}  "
        f"slopes {slopes['low']:.2f}/{slopes['high']:.2f}"
    )
    return 0


def cmd_reference_config(cp, out_dir: Path, seed: int) -> int:
    with open(out_dir / "reference.ini", "w") as fh:
        fh.write(REFERENCE_CONFIG)
    print(out_dir / "reference.ini")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "invert": cmd_invert,
    "diagnose": cmd_diagnose,
    "reference-config": cmd_reference_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hwlab",
        description="Hasegawa-Wakatani simulation and surrogate pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument(
            "--config",
            required=name != "reference-config",
            help="INI configuration file",
        )
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override a config value",
        )
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="root RNG seed")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cp = load_config(args.config, args.set)
        else:
            cp = _new_parser()
            cp.read_string(REFERENCE_CONFIG)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        echo_config(cp, out_dir)
        return COMMANDS[args.command](cp, out_dir, args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except SimulationBlowup as err:
        print(f"blow-up: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
