"""Snapshot-pair datasets: extraction, splits, and binary storage.

Training data is (input state, target state) pairs drawn from saturated
trajectories: the input is any snapshot past the transient cutoff, the
target lies 0 < dt_i <= 1 time units later, and the pair carries the four
physical parameters of its instance.  Splits are by *instance* (whole
simulations), never by pair, so held-out physics stays held out.

On-disk formats (little-endian, CRC32-checked records):

HWDS pair file:
    header: magic "HWDS", version u32, grid n u32, record count u64
    record: c1, k0, kappa, c_pb, dt_i as f64;
            input Omega, phi, n then target Omega, n as f32 row-major n*n;
            CRC32 (u32) of all preceding record bytes.

HWTJ trajectory file (internal interchange for the CLI pipeline):
    header: magic "HWTJ", version u32, grid n u32, snapshot count u64,
            c1, k0, kappa, c_pb, nu as f64, hyper_order u32, dt f64,
            n_steps u64, snapshot_every u32, seed u64, grf_amplitude f64,
            grf_corr_length f64 (NaN = default), cross_hyperdiffusion u32
    record: t f64; Omega, phi, n as f32 row-major; CRC32 as above.
"""

from __future__ import annotations

import configparser
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .hwsim import HwParams, PlasmaState, SimConfig, Trajectory, make_grid
from .numerics import Field, _poisson_phi

__all__ = [
    "DataFormatError",
    "SnapshotPair",
    "InstanceMeta",
    "DatasetManifest",
    "extract_pairs",
    "split_instances",
    "subsample_pairs",
    "reduced_config",
    "write_dataset",
    "read_dataset",
    "TrajectoryWriter",
    "write_trajectory",
    "read_trajectory",
]

HWDS_MAGIC = b"HWDS"
HWDS_VERSION = 1
HWTJ_MAGIC = b"HWTJ"
HWTJ_VERSION = 1


class DataFormatError(ValueError):
    """Corrupt or mismatched on-disk data (bad magic/version/CRC/shape)."""


@dataclass(frozen=True)
class SnapshotPair:
    """One training sample: input state, target dt_i later, parameters.

    `instance_id` tags provenance in memory for leakage audits; it is not
    part of the storage format.
    """

    input: PlasmaState
    target: PlasmaState
    dt_i: float
    params: HwParams
    instance_id: int = -1

    def __post_init__(self):
        if not (0.0 < self.dt_i <= 1.0 + 1e-9):
            raise ValueError(f"dt_i must lie in (0, 1], got {self.dt_i}")
        if self.input.grid != self.target.grid:
            raise ValueError("input/target grid mismatch")


@dataclass
class InstanceMeta:
    """Bookkeeping for one simulated instance inside a dataset."""

    instance_id: int
    params: HwParams
    seed: int
    split: str = ""
    pair_count: int = 0


@dataclass
class DatasetManifest:
    """Plain-text sidecar describing a dataset's instances and provenance."""

    grid_n: int
    t_cut: float
    max_dt: float
    instances: list[InstanceMeta] = field(default_factory=list)

    def subset(self, split: str) -> list[InstanceMeta]:
        return [m for m in self.instances if m.split == split]

    def validate(self):
        """Check the train/test labels partition the instances."""
        ids = [m.instance_id for m in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instance ids in manifest")
        bad = [m.instance_id for m in self.instances if m.split not in ("train", "test")]
        if bad:
            raise ValueError(f"instances without split label: {bad}")
        if not self.subset("train") or not self.subset("test"):
            raise ValueError("both splits must be non-empty")

    def write(self, path):
        cp = configparser.ConfigParser()
        cp["dataset"] = {
            "grid_n": str(self.grid_n),
            "t_cut": repr(self.t_cut),
            "max_dt": repr(self.max_dt),
        }
        for m in self.instances:
            cp[f"instance.{m.instance_id}"] = {
                "split": m.split,
                "seed": str(m.seed),
                "pair_count": str(m.pair_count),
                "c1": repr(m.params.c1),
                "k0": repr(m.params.k0),
                "kappa": repr(m.params.kappa),
                "c_pb": repr(m.params.c_pb),
                "nu": repr(m.params.nu),
                "hyper_order": str(m.params.hyper_order),
            }
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise DataFormatError(f"cannot read manifest {path}")
        try:
            ds = cp["dataset"]
            manifest = cls(
                grid_n=int(ds["grid_n"]),
                t_cut=float(ds["t_cut"]),
                max_dt=float(ds["max_dt"]),
            )
            for section in cp.sections():
                if not section.startswith("instance."):
                    continue
                s = cp[section]
                params = HwParams(
                    c1=float(s["c1"]),
                    k0=float(s["k0"]),
                    kappa=float(s["kappa"]),
                    c_pb=float(s["c_pb"]),
                    nu=float(s["nu"]),
                    hyper_order=int(s["hyper_order"]),
                )
                manifest.instances.append(
                    InstanceMeta(
                        instance_id=int(section.split(".", 1)[1]),
                        params=params,
                        seed=int(s["seed"]),
                        split=s["split"],
                        pair_count=int(s["pair_count"]),
                    )
                )
        except (KeyError, ValueError) as err:
            raise DataFormatError(f"malformed manifest {path}: {err}") from err
        return manifest


# ---------------------------------------------------------------------------
# pair extraction and splitting
# ---------------------------------------------------------------------------


def extract_pairs(
    trajectory: Trajectory,
    count: int,
    rng: np.random.Generator,
    max_dt: float = 1.0,
    t_cut: float = 100.0,
    instance_id: int = -1,
) -> list[SnapshotPair]:
    """Draw `count` snapshot pairs from one saturated trajectory.

    Inputs are snapshots with t >= t_cut; targets lie 1..M snapshot
    spacings later where M = floor(max_dt / spacing).  Pairs are drawn
    uniformly without replacement over all admissible (input, offset)
    combinations, so snapshots may be shared between pairs but no exact
    pair repeats.

    Raises:
        ValueError: if the trajectory is too short, not uniformly sampled,
            or cannot supply `count` distinct pairs.
    """
    if not 0.0 < max_dt <= 1.0 + 1e-9:
        raise ValueError(f"max_dt must lie in (0, 1], got {max_dt}")
    times = trajectory.times
    if len(times) < 2:
        raise ValueError("trajectory has fewer than 2 snapshots")
    spacing = float(times[1] - times[0])
    if spacing <= 0 or not np.allclose(np.diff(times), spacing, rtol=1e-9):
        raise ValueError("trajectory snapshots are not uniformly spaced")
    max_offset = int(np.floor(max_dt / spacing + 1e-9))
    if max_offset < 1:
        raise ValueError(
            f"snapshot spacing {spacing} exceeds max_dt {max_dt}"
        )
    last = len(times) - 1
    eligible = np.flatnonzero(times >= t_cut - 1e-9)
    eligible = eligible[eligible < last]
    if len(eligible) == 0:
        raise ValueError(f"no snapshots past t_cut={t_cut}")
    # flat enumeration of all (input index, offset) combinations
    per_input = np.minimum(max_offset, last - eligible)
    idx_flat = np.repeat(eligible, per_input)
    off_flat = np.concatenate([np.arange(1, m + 1) for m in per_input])
    total = len(idx_flat)
    if count > total:
        raise ValueError(f"requested {count} pairs but only {total} available")
    chosen = rng.choice(total, size=count, replace=False)
    pairs = []
    for flat in chosen:
        i = int(idx_flat[flat])
        j = i + int(off_flat[flat])
        pairs.append(
            SnapshotPair(
                input=trajectory.states[i],
                target=trajectory.states[j],
                dt_i=float(times[j] - times[i]),
                params=trajectory.params,
                instance_id=instance_id,
            )
        )
    return pairs


def split_instances(
    instances: list[InstanceMeta],
    train_fraction: float,
    rng: np.random.Generator,
) -> tuple[list[InstanceMeta], list[InstanceMeta]]:
    """Label instances train/test by a seeded shuffle.

    The train side gets round(train_fraction * len(instances)); both sides
    must end up non-empty.  Labels are written into the metas in place and
    the (train, test) lists are returned.
    """
    n = len(instances)
    if n < 2:
        raise ValueError(f"need >= 2 instances to split, got {n}")
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(
            f"train_fraction={train_fraction} leaves an empty split for n={n}"
        )
    order = rng.permutation(n)
    for rank, idx in enumerate(order):
        instances[idx].split = "train" if rank < n_train else "test"
    train = [m for m in instances if m.split == "train"]
    test = [m for m in instances if m.split == "test"]
    return train, test


def subsample_pairs(
    pairs: list[SnapshotPair], count: int, rng: np.random.Generator
) -> list[SnapshotPair]:
    """Keep a uniform random subset of `count` pairs (without replacement)."""
    if count > len(pairs):
        raise ValueError(f"cannot keep {count} of {len(pairs)} pairs")
    keep = np.sort(rng.choice(len(pairs), size=count, replace=False))
    return [pairs[i] for i in keep]


def reduced_config(
    manifest: DatasetManifest, mode: str, rng: np.random.Generator
) -> DatasetManifest:
    """Shrink a dataset along one axis for ablation studies.

    "reduced_instances" keeps a random third of the train instances at
    full sampling; "reduced_sampling" keeps all train instances at 30% of
    their pairs.  The test split is never touched.
    """
    train = manifest.subset("train")
    test = manifest.subset("test")
    if mode == "reduced_instances":
        n_keep = max(1, int(round(len(train) / 3)))
        keep_idx = set(
            int(i) for i in rng.choice(len(train), size=n_keep, replace=False)
        )
        kept = [m for i, m in enumerate(train) if i in keep_idx]
        instances = kept + test
    elif mode == "reduced_sampling":
        instances = []
        for m in train:
            reduced = replace_count(m, max(1, int(round(0.3 * m.pair_count))))
            instances.append(reduced)
        instances += test
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    out = DatasetManifest(manifest.grid_n, manifest.t_cut, manifest.max_dt)
    out.instances = instances
    return out


def replace_count(meta: InstanceMeta, count: int) -> InstanceMeta:
    return InstanceMeta(
        meta.instance_id, meta.params, meta.seed, meta.split, count
    )


# ---------------------------------------------------------------------------
# binary I/O helpers
# ---------------------------------------------------------------------------


def _read_exact(fh, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise DataFormatError(f"truncated file while reading {what}")
    return buf


def _checked_record(fh, payload_size: int, what: str) -> bytes:
    payload = _read_exact(fh, payload_size, what)
    (crc,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} CRC"))
    if crc != zlib.crc32(payload):
        raise DataFormatError(f"CRC mismatch in {what}")
    return payload


def _f32_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# HWDS pair files
# ---------------------------------------------------------------------------


def write_dataset(pairs: list[SnapshotPair], path):
    """Write pairs to an HWDS file (f32 fields, CRC-per-record)."""
    if not pairs:
        raise ValueError("refusing to write an empty dataset")
    n = pairs[0].input.grid.n
    with open(path, "wb") as fh:
        fh.write(HWDS_MAGIC)
        fh.write(struct.pack("<IIQ", HWDS_VERSION, n, len(pairs)))
        for pair in pairs:
            if pair.input.grid.n != n:
                raise ValueError("mixed grid sizes in one dataset")
            p = pair.params
            payload = struct.pack(
                "<5d", p.c1, p.k0, p.kappa, p.c_pb, pair.dt_i
            )
            payload += _f32_bytes(pair.input.omega.values)
            payload += _f32_bytes(pair.input.phi.values)
            payload += _f32_bytes(pair.input.n.values)
            payload += _f32_bytes(pair.target.omega.values)
            payload += _f32_bytes(pair.target.n.values)
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_dataset(path) -> list[SnapshotPair]:
    """Read an HWDS file back into pairs.

    Stored pairs carry no absolute time: inputs come back at t = 0 and
    targets at t = dt_i.  The target phi is re-derived from the stored
    vorticity (it is not part of the format).
    """
    pairs = []
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != HWDS_MAGIC:
            raise DataFormatError(f"{path} is not an HWDS file")
        version, n, count = struct.unpack(
            "<IIQ", _read_exact(fh, 16, "header")
        )
        if version != HWDS_VERSION:
            raise DataFormatError(f"unsupported HWDS version {version}")
        grid = None
        plane = n * n * 4
        payload_size = 5 * 8 + 5 * plane
        for _ in range(count):
            payload = _checked_record(fh, payload_size, "pair record")
            c1, k0, kappa, c_pb, dt_i = struct.unpack_from("<5d", payload, 0)
            if grid is None:
                grid = make_grid(n, k0)
            elif grid.k0 != k0:
                grid = make_grid(n, k0)
            fields = []
            offset = 40
            for _i in range(5):
                arr = np.frombuffer(
                    payload, dtype="<f4", count=n * n, offset=offset
                ).reshape(n, n).astype(np.float32)
                fields.append(arr)
                offset += plane
            in_w, in_phi, in_n, tg_w, tg_n = fields
            params = HwParams(c1=c1, k0=k0, kappa=kappa, c_pb=c_pb)
            tg_phi = _poisson_phi(tg_w.astype(np.float64), grid).astype(
                np.float32
            )
            pairs.append(
                SnapshotPair(
                    input=PlasmaState(
                        Field(grid, in_w), Field(grid, in_phi),
                        Field(grid, in_n), 0.0,
                    ),
                    target=PlasmaState(
                        Field(grid, tg_w), Field(grid, tg_phi),
                        Field(grid, tg_n), dt_i,
                    ),
                    dt_i=dt_i,
                    params=params,
                )
            )
        if fh.read(1):
            raise DataFormatError(f"trailing bytes after {count} records")
    return pairs


# ---------------------------------------------------------------------------
# HWTJ trajectory files
# ---------------------------------------------------------------------------

_HWTJ_HEADER = "<IIQ5dIdQIQddI"  # after the 4-byte magic


class TrajectoryWriter:
    """Streaming writer: snapshots are appended as they are produced.

    The record count is patched into the header on close, so interrupted
    writes are detectable (count mismatch -> truncated-file error).
    """

    def __init__(self, path, config: SimConfig):
        self.config = config
        self.count = 0
        self._fh = open(path, "wb")
        corr = config.grf_corr_length
        self._fh.write(HWTJ_MAGIC)
        self._fh.write(
            struct.pack(
                _HWTJ_HEADER,
                HWTJ_VERSION,
                config.grid_n,
                0,  # patched on close
                config.params.c1,
                config.params.k0,
                config.params.kappa,
                config.params.c_pb,
                config.params.nu,
                config.params.hyper_order,
                config.dt,
                config.n_steps,
                config.snapshot_every,
                config.seed,
                config.grf_amplitude,
                np.nan if corr is None else corr,
                int(config.cross_hyperdiffusion),
            )
        )

    def append(self, state: PlasmaState):
        if state.grid.n != self.config.grid_n:
            raise ValueError("state grid does not match writer config")
        payload = struct.pack("<d", state.t)
        payload += _f32_bytes(state.omega.values)
        payload += _f32_bytes(state.phi.values)
        payload += _f32_bytes(state.n.values)
        self._fh.write(payload)
        self._fh.write(struct.pack("<I", zlib.crc32(payload)))
        self.count += 1

    def close(self):
        self._fh.seek(4 + 8)  # magic + version/grid_n
        self._fh.write(struct.pack("<Q", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trajectory(trajectory: Trajectory, path):
    with TrajectoryWriter(path, trajectory.config) as writer:
        for state in trajectory.states:
            writer.append(state)


def read_trajectory(path) -> Trajectory:
    """Load an HWTJ file; fields come back as f32, timing is not stored."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != HWTJ_MAGIC:
            raise DataFormatError(f"{path} is not an HWTJ file")
        header = _read_exact(fh, struct.calcsize(_HWTJ_HEADER), "header")
        (
            version, grid_n, count, c1, k0, kappa, c_pb, nu, hyper_order,
            dt, n_steps, snapshot_every, seed, amplitude, corr, cross,
        ) = struct.unpack(_HWTJ_HEADER, header)
        if version != HWTJ_VERSION:
            raise DataFormatError(f"unsupported HWTJ version {version}")
        params = HwParams(
            c1=c1, k0=k0, kappa=kappa, c_pb=c_pb, nu=nu,
            hyper_order=int(hyper_order),
        )
        config = SimConfig(
            grid_n=int(grid_n),
            params=params,
            dt=dt,
            n_steps=int(n_steps),
            snapshot_every=int(snapshot_every),
            seed=int(seed),
            grf_amplitude=amplitude,
            grf_corr_length=None if np.isnan(corr) else corr,
            cross_hyperdiffusion=bool(cross),
        )
        grid = make_grid(int(grid_n), k0)
        plane = grid.n * grid.n * 4
        states = []
        for _ in range(count):
            payload = _checked_record(fh, 8 + 3 * plane, "snapshot record")
            (t,) = struct.unpack_from("<d", payload, 0)
            arrs = [
                np.frombuffer(payload, dtype="<f4", count=grid.n**2,
                              offset=8 + i * plane)
                .reshape(grid.shape).astype(np.float32)
                for i in range(3)
            ]
            states.append(
                PlasmaState(
                    Field(grid, arrs[0]), Field(grid, arrs[1]),
                    Field(grid, arrs[2]), t,
                )
            )
        if fh.read(1):
            raise DataFormatError(f"trailing bytes after {count} records")
    return Trajectory(states, config)
