"""Synthetic multi-modal sequence-classification tasks.

Every sample is a set of per-modality feature volumes (d_f, T, h, w) of
Gaussian noise plus one temporally localized bump: a single frame gets a
constant offset on every channel and location, with the offset's sign
carrying one latent bit. The bump lands at an independent uniformly
random timestep per modality, so solving a task means finding and
remembering a signed event in time.

Task kinds:
  xor            two modalities, each carrying its own bit; the label is
                 the XOR, so either modality alone holds zero label
                 information.
  redundant      every modality carries the same bit; the label is that
                 bit (control condition).
  single         one modality, label = its bit.

Generation is a pure function of the TaskSpec; split seeds derive from
the root seed via splitmix, so reruns are byte-identical.
"""

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .util import ConfigError, derive_seed, make_rng

BUMP_AMPLITUDE = 1.0

_CACHE_MAGIC = b"MMXD"
_CACHE_VERSION = 1
_DT_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1,
             np.dtype("<i8"): 2, np.dtype("i1"): 3}
_DT_BY_CODE = {v: k for k, v in _DT_CODES.items()}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "xor"
    n_modalities: int = 2
    seq_len: int = 16
    feat_channels: int = 8
    grid_h: int = 2
    grid_w: int = 2
    n_classes: int = 2
    noise: float = 0.5
    n_train: int = 4000
    n_test: int = 1000
    seed: int = 0

    def validate(self):
        if self.kind not in ("xor", "redundant", "single"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "xor" and self.n_modalities != 2:
            raise ConfigError("xor task requires exactly 2 modalities")
        if self.kind in ("xor", "redundant", "single") and self.n_classes != 2:
            raise ConfigError(f"{self.kind} task requires 2 classes")
        if self.kind == "single" and self.n_modalities != 1:
            raise ConfigError("single task requires exactly 1 modality")
        if self.kind == "redundant" and self.n_modalities < 2:
            raise ConfigError("redundant task requires >=2 modalities")
        if min(self.seq_len, self.feat_channels, self.grid_h, self.grid_w) < 1:
            raise ConfigError("sequence/feature dimensions must be positive")
        return self


@dataclass
class EpisodeBatch:
    """Per-modality feature volumes (B, d_f, T, h, w) + integer labels.

    `bits` keeps the latent bit per modality for synthetic tasks (shape
    (B, N)); it is diagnostic metadata, never model input.
    """

    modalities: list
    labels: np.ndarray
    bits: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return EpisodeBatch(
            [m[idx] for m in self.modalities],
            self.labels[idx],
            None if self.bits is None else self.bits[idx],
        )


def _gen_split(spec, n, seed):
    rng = make_rng(seed)
    n_mod = spec.n_modalities
    if spec.kind == "xor":
        bits = rng.integers(0, 2, size=(n, 2), dtype=np.int8)
        labels = (bits[:, 0] ^ bits[:, 1]).astype(np.int64)
    else:  # redundant / single: one shared bit
        shared = rng.integers(0, 2, size=(n, 1), dtype=np.int8)
        bits = np.repeat(shared, n_mod, axis=1)
        labels = shared[:, 0].astype(np.int64)
    bump_t = rng.integers(0, spec.seq_len, size=(n, n_mod))
    mods = []
    for i in range(n_mod):
        vol = rng.normal(0.0, spec.noise,
                         size=(n, spec.feat_channels, spec.seq_len,
                               spec.grid_h, spec.grid_w))
        sign = (2.0 * bits[:, i] - 1.0) * BUMP_AMPLITUDE
        vol[np.arange(n), :, bump_t[:, i]] += sign[:, None, None, None]
        mods.append(vol.astype(np.float32))
    return EpisodeBatch(mods, labels, bits)


def generate(spec):
    """(train, test) EpisodeBatches fully determined by the spec."""
    spec.validate()
    train = _gen_split(spec, spec.n_train, derive_seed(spec.seed, "train"))
    test = _gen_split(spec, spec.n_test, derive_seed(spec.seed, "test"))
    return train, test


def gen_xor_task(spec):
    if spec.kind != "xor":
        raise ConfigError(f"expected an xor spec, got kind {spec.kind!r}")
    return generate(spec)


def gen_redundant_task(spec):
    if spec.kind != "redundant":
        raise ConfigError(f"expected a redundant spec, got kind {spec.kind!r}")
    return generate(spec)


def split(batch, fractions, seed):
    """Disjoint, label-stratified, seed-deterministic partition."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    rng = make_rng(seed)
    buckets = [[] for _ in fractions]
    for cls in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        counts = [int(np.floor(f * len(idx))) for f in fractions]
        # largest-remainder rounding keeps every split within +-1 of target
        order = sorted(range(len(fractions)),
                       key=lambda k: (counts[k] - fractions[k] * len(idx), k))
        for k in order[: len(idx) - sum(counts)]:
            counts[k] += 1
        start = 0
        for bucket, c in zip(buckets, counts):
            bucket.extend(idx[start : start + c].tolist())
            start += c
    return [batch.take(np.array(sorted(b), dtype=np.int64)) for b in buckets]


# -- on-disk cache ---------------------------------------------------------


def spec_hash(spec):
    canon = ";".join(f"{k}={v}" for k, v in sorted(vars(spec).items()))
    canon += f";amplitude={BUMP_AMPLITUDE}"
    return hashlib.blake2b(canon.encode(), digest_size=16).digest()


def _write_array(f, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DT_CODES:
        arr = arr.astype(np.float32)
    f.write(struct.pack("<BB", _DT_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_array(f):
    code, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    dtype = _DT_BY_CODE[code]
    n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    return np.frombuffer(f.read(n), dtype=dtype).reshape(shape).copy()


def save_cache(path, spec, train, test):
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", _CACHE_VERSION))
        f.write(spec_hash(spec))
        for batch in (train, test):
            f.write(struct.pack("<I", len(batch.modalities)))
            for m in batch.modalities:
                _write_array(f, m)
            _write_array(f, batch.labels.astype(np.int64))
            _write_array(f, batch.bits.astype(np.int8))


def load_cache(path, spec):
    """Cached (train, test), or None when the header hash mismatches."""
    with open(path, "rb") as f:
        if f.read(4) != _CACHE_MAGIC:
            return None
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CACHE_VERSION or f.read(16) != spec_hash(spec):
            return None
        out = []
        for _ in range(2):
            (n_mod,) = struct.unpack("<I", f.read(4))
            mods = [_read_array(f) for _ in range(n_mod)]
            labels = _read_array(f)
            bits = _read_array(f)
            out.append(EpisodeBatch(mods, labels, bits))
    return tuple(out)


def with_seed(spec, seed):
    return replace(spec, seed=seed)
