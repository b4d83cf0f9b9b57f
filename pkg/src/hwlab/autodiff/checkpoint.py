"""Named-tensor checkpoint files ("FICW").

Layout (little-endian):

    magic "FICW" | version u32 | header_len u32 | header JSON (utf-8)
    then per tensor, in insertion order:
    name_len u32 | name utf-8 | 4 x u32 extents | raw payload

The JSON header carries the model configuration and the global payload
dtype ("float32"/"float64").  Round trips are bitwise exact, which is
what lets training hand a frozen model to the inverse solver with a
verifiable checksum.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"FICW"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Corrupt or unsupported checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict):
    """Write named arrays plus a JSON-serializable config dict."""
    if not tensors:
        raise ValueError("refusing to write an empty checkpoint")
    dtypes = {a.dtype for a in tensors.values()}
    if len(dtypes) != 1:
        raise ValueError(f"tensors must share one dtype, got {dtypes}")
    dtype_name = next(iter(dtypes)).name
    if dtype_name not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype_name}")
    header = {
        "config": config,
        "dtype": dtype_name,
        "tensor_count": len(tensors),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            if arr.ndim != 4:
                raise ValueError(f"tensor {name!r} is not 4-D")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, config); tensor order is file order."""

    def read_exact(fh, size, what):
        buf = fh.read(size)
        if len(buf) != size:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, blob_len = struct.unpack("<II", read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(read_exact(fh, blob_len, "header JSON"))
            dtype = _DTYPES[header["dtype"]]
            count = int(header["tensor_count"])
        except (ValueError, KeyError) as err:
            raise CheckpointError(f"malformed checkpoint header: {err}") from err
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read_exact(fh, 4, "name length"))
            name = read_exact(fh, name_len, "name").decode()
            shape = struct.unpack("<4I", read_exact(fh, 16, "extents"))
            nbytes = int(np.prod(shape)) * int(dtype[-1])
            payload = read_exact(fh, nbytes, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(header["dtype"], copy=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return tensors, header["config"]
