"""Supervised (pump powers -> measured profile) dataset: generation, split, persistence."""

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError, CorruptionError, FormatError, RamanShapeError
from .seeding import STREAM_DATASET, STREAM_SPLIT, child_rng, child_seed

MAGIC = b"RDS1"
VERSION = 1
SEED_MIX = ("splitmix64: z = (master + 0x9E3779B97F4A7C15*(i+1)) mod 2^64; "
            "z = (z^(z>>30))*0xBF58476D1CE4E5B9; z = (z^(z>>27))*0x94D049BB133111EB; z ^= z>>31; "
            "streams remix master as splitmix64(master ^ splitmix64(0x9E3779B97F4A7C15*stream))")
# sample i: powers from default_rng(child_seed(master, i, 0)); noise from child_seed(master, i, 5)
STREAM_NOISE = 5


class SampleError(RamanShapeError):
    def __init__(self, index, cause):
        super().__init__(f"sample {index}: {cause}")
        self.index = index
        self.__cause__ = cause


@dataclass
class Dataset:
    powers: np.ndarray                     # [n x pumps], W
    profiles: np.ndarray                   # [n x channels x z], dBm
    freq_grid: np.ndarray
    z_grid: np.ndarray
    master_seed: int
    provenance: dict
    split: dict = field(default_factory=lambda: {"train": np.zeros(0, int),
                                                 "test": np.zeros(0, int),
                                                 "val": np.zeros(0, int)})

    def __len__(self):
        return self.powers.shape[0]

    @property
    def samples(self):
        from .traces import PowerProfile2D
        return [(self.powers[i], PowerProfile2D(self.profiles[i], self.freq_grid, self.z_grid))
                for i in range(len(self))]

    def profile(self, i):
        from .traces import PowerProfile2D
        return PowerProfile2D(self.profiles[i], self.freq_grid, self.z_grid)

    def subset(self, name):
        idx = self.split[name]
        return self.powers[idx], self.profiles[idx]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.powers, other.powers)
                and np.array_equal(self.profiles, other.profiles)
                and np.array_equal(self.freq_grid, other.freq_grid)
                and np.array_equal(self.z_grid, other.z_grid)
                and self.master_seed == other.master_seed
                and self.provenance == other.provenance
                and self.split.keys() == other.split.keys()
                and all(np.array_equal(self.split[k], other.split[k]) for k in self.split))


def sample_pumps(rng, p_max):
    """Independent uniform draw of each pump power on [0, p_max]."""
    p_max = np.asarray(p_max, dtype=float)
    return rng.uniform(0.0, 1.0, size=p_max.shape) * p_max


def _one(plant, master_seed, i, noisy, powers=None):
    try:
        if powers is None:
            powers = sample_pumps(child_rng(master_seed, i, STREAM_DATASET), plant.p_max)
        noise = child_seed(master_seed, i, STREAM_NOISE) if noisy else None
        return powers, plant.apply(powers, noise_seed=noise).values
    except RamanShapeError as exc:
        raise SampleError(i, exc) from exc


def generate(n, master_seed, plant, noisy=True, workers=1, powers=None):
    """Probe ``plant`` with ``n`` random pump settings.

    Each sample depends only on ``(master_seed, i)``, so the result does not
    depend on ``workers``.  ``powers`` (an [n x pumps] array) overrides the
    random draw, e.g. to build targets from known settings.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    fixed = None if powers is None else np.asarray(powers, dtype=float)

    def job(i):
        return _one(plant, master_seed, i, noisy, None if fixed is None else fixed[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n)))
    else:
        results = [job(i) for i in range(n)]
    P = np.array([r[0] for r in results])
    V = np.array([r[1] for r in results])
    from .traces import profile_grid
    provenance = {
        "plant": plant.cfg.to_dict(),
        "pipeline": plant.pcfg.to_dict(),
        "noisy": bool(noisy and not plant.noiseless),
    }
    return Dataset(P, V, np.asarray(plant.cfg.channel_freqs, float),
                   profile_grid(plant.cfg.fiber_length, plant.pcfg.target_resolution),
                   int(master_seed), provenance)


def split(ds, sizes, seed):
    """Seeded permutation, then contiguous train / test / val blocks (in that order)."""
    n_train, n_test, n_val = (int(s) for s in sizes)
    if min(n_train, n_test, n_val) < 0 or n_train + n_test + n_val > len(ds):
        raise ConfigError(f"split sizes {sizes} exceed {len(ds)} samples")
    perm = child_rng(seed, 0, STREAM_SPLIT).permutation(len(ds))
    out = Dataset(ds.powers, ds.profiles, ds.freq_grid, ds.z_grid, ds.master_seed, ds.provenance)
    out.split = {
        "train": perm[:n_train],
        "test": perm[n_train:n_train + n_test],
        "val": perm[n_train + n_test:n_train + n_test + n_val],
    }
    return out


def truncate_train(ds, size):
    """Keep the first ``size`` training indices; test and val are untouched."""
    if size > len(ds.split["train"]):
        raise ConfigError(f"train size {size} exceeds {len(ds.split['train'])}")
    out = Dataset(ds.powers, ds.profiles, ds.freq_grid, ds.z_grid, ds.master_seed, ds.provenance)
    out.split = dict(ds.split, train=ds.split["train"][:size])
    return out


# -- persistence -------------------------------------------------------------
#
# "RDS1" | u16 version | u32 n | u16 pumps | u16 channels | u16 z points |
# u64 master seed | u32 len + YAML provenance | 3 x (u32 len + u32 indices)
# (train, test, val) | f64 freq grid | f64 z grid | n x (pumps + ch*z) f64 records.
# All little-endian.

def to_bytes(ds):
    n, n_p = ds.powers.shape
    nf, nz = ds.freq_grid.size, ds.z_grid.size
    text = yaml.safe_dump({"seed_mix": SEED_MIX, **ds.provenance}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HIHHHQ", VERSION, n, n_p, nf, nz, ds.master_seed))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name in ("train", "test", "val"):
        idx = np.asarray(ds.split.get(name, []), dtype="<u4")
        buf.write(struct.pack("<I", idx.size))
        buf.write(idx.tobytes())
    buf.write(ds.freq_grid.astype("<f8").tobytes())
    buf.write(ds.z_grid.astype("<f8").tobytes())
    rec = np.concatenate([ds.powers, ds.profiles.reshape(n, -1)], axis=1)
    buf.write(rec.astype("<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.data):
            raise CorruptionError(f"dataset file truncated at byte {len(self.data)}")
        out = self.data[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data):
    r = _Reader(bytes(data))
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, n, n_p, nf, nz, seed = r.unpack("<HIHHHQ")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    (tlen,) = r.unpack("<I")
    try:
        meta = yaml.safe_load(r.take(tlen).decode())
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise CorruptionError(f"unreadable provenance block: {exc}") from exc
    meta.pop("seed_mix", None)
    split_ = {}
    for name in ("train", "test", "val"):
        (k,) = r.unpack("<I")
        split_[name] = np.frombuffer(r.take(4 * k), dtype="<u4").astype(int)
    freq = np.frombuffer(r.take(8 * nf), dtype="<f8").astype(float)
    z = np.frombuffer(r.take(8 * nz), dtype="<f8").astype(float)
    rec = np.frombuffer(r.take(8 * n * (n_p + nf * nz)), dtype="<f8").astype(float).reshape(n, -1)
    if r.pos != len(r.data):
        raise CorruptionError(f"{len(r.data) - r.pos} trailing bytes after dataset records")
    if any(np.any(idx >= n) for idx in split_.values()):
        raise CorruptionError("split index out of range")
    ds = Dataset(rec[:, :n_p].copy(), rec[:, n_p:].reshape(n, nf, nz).copy(), freq, z, int(seed), meta)
    ds.split = split_
    return ds


def save(ds, path):
    data = to_bytes(ds)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
