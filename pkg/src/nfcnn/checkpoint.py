"""Binary checkpoint container.

Layout (all integers little-endian):

    magic           4 bytes  b"NFCK"
    version         u32      currently 1
    config length   u32      followed by that many bytes of config JSON
    tensor count    u32
    tensor entry    name_len u16, name utf-8, dtype u8 (0=f32, 1=f64),
                    rank u8, dims u32 * rank, raw values little-endian
    optimizer flag  u8       0 = absent
    [step u64, moment-tensor count u32, entries "m.<name>" / "v.<name>"]

Round trips are bitwise lossless; unknown magic or version is rejected.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .model import ModelConfig, Parameters
from .tensor import Tensor

MAGIC = b"NFCK"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

STATE_SUFFIXES = (".run_mean", ".run_var")


class CheckpointError(ValueError):
    """Malformed, truncated, or unsupported checkpoint data."""


def _write_tensor(buf, name, arr):
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("="), None)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_tensor(buf):
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(buf, 2))
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    raw = _read_exact(buf, count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return name, arr.astype(arr.dtype.newbyteorder("="))


def _config_to_json(config):
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def _config_from_json(raw):
    fields = json.loads(raw.decode("utf-8"))
    fields["branch_widths"] = tuple(fields["branch_widths"])
    return ModelConfig(**fields)


def save_checkpoint(path, config, params, adam=None):
    """Write config, every parameter and BN statistic, and optionally the
    optimizer state."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = _config_to_json(config)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)

    entries = [(n, v.data if isinstance(v, Tensor) else v)
               for n, v in params.items()]
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _write_tensor(buf, name, arr)

    if adam is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", adam.step))
        moments = [("m." + n, a) for n, a in adam.m.items()]
        moments += [("v." + n, a) for n, a in adam.v.items()]
        buf.write(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _write_tensor(buf, name, arr)

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read (config, params, adam-or-None) back from ``save_checkpoint``."""
    from .training import AdamState

    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())

    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", _read_exact(buf, 4))
    config = _config_from_json(_read_exact(buf, cfg_len))

    params = Parameters()
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    for _ in range(count):
        name, arr = _read_tensor(buf)
        if name.endswith(STATE_SUFFIXES):
            params.add(name, arr.copy())
        else:
            params.add(name, Tensor(arr.copy(), requires_grad=True))

    (flag,) = struct.unpack("<B", _read_exact(buf, 1))
    adam = None
    if flag:
        (step,) = struct.unpack("<Q", _read_exact(buf, 8))
        (n_moments,) = struct.unpack("<I", _read_exact(buf, 4))
        m = {}
        v = {}
        for _ in range(n_moments):
            name, arr = _read_tensor(buf)
            if name.startswith("m."):
                m[name[2:]] = arr.copy()
            elif name.startswith("v."):
                v[name[2:]] = arr.copy()
            else:
                raise CheckpointError(f"unexpected moment entry {name!r}")
        adam = AdamState(m=m, v=v, step=step)
    return config, params, adam
