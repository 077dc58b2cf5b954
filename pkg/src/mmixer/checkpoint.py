"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic   b"MMX1"
    u32     format version (currently 1)
    u8      precision flag: 0 = float32, 1 = float64
    u8      optimizer-state flag: 0 = absent, 1 = present
    u32     tensor count
    entry   u16 name length, name (utf-8), u8 ndim, u32 * ndim dims
    ...     one entry per tensor (the manifest)
    data    flat little-endian arrays, manifest order
    [u64    optimizer step count]
    [data   first-moment arrays, manifest order]
    [data   second-moment arrays, manifest order]

Round-trips are bit-exact: bytes written are the raw array buffers.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MMX1"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_FLAGS = {"float32": 0, "float64": 1}


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    precision: str
    params: dict = field(default_factory=dict)  # name -> ndarray, manifest order
    opt_step: int | None = None
    opt_m: list | None = None
    opt_v: list | None = None


def save(path, named_params, precision, optimizer_state=None):
    """Write (name, array) pairs and optional Adam state (t, m, v) to path."""
    flag = _FLAGS[precision]
    dtype = _DTYPES[flag]
    arrays = [(name, np.ascontiguousarray(a, dtype=dtype)) for name, a in named_params]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBBI", FORMAT_VERSION, flag,
                            0 if optimizer_state is None else 1, len(arrays)))
        for name, a in arrays:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        for _, a in arrays:
            f.write(a.tobytes())
        if optimizer_state is not None:
            t, m, v = optimizer_state
            f.write(struct.pack("<Q", t))
            for group in (m, v):
                for (_, ref), a in zip(arrays, group):
                    a = np.ascontiguousarray(a, dtype=dtype)
                    if a.shape != ref.shape:
                        raise CheckpointError(
                            f"optimizer moment shape {a.shape} does not "
                            f"mirror parameter shape {ref.shape}"
                        )
                    f.write(a.tobytes())


def _read(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load(path):
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        version, flag, has_opt, count = struct.unpack(
            "<IBBI", _read(f, 10, "header")
        )
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        if flag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown precision flag {flag}")
        dtype = _DTYPES[flag]
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
            name = _read(f, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, "dims"))
            manifest.append((name, shape))

        def read_block():
            out = []
            for name, shape in manifest:
                n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                arr = np.frombuffer(_read(f, n, name), dtype=dtype).reshape(shape)
                out.append(arr.copy())
            return out

        params = dict(zip([n for n, _ in manifest], read_block()))
        ckpt = Checkpoint(
            precision="float64" if flag else "float32", params=params
        )
        if has_opt:
            (ckpt.opt_step,) = struct.unpack("<Q", _read(f, 8, "optimizer step"))
            ckpt.opt_m = read_block()
            ckpt.opt_v = read_block()
    return ckpt
