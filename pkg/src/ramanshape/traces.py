"""OTDR measurement chain and the profile error metric.

fine-grid signal -> 8.2 m traces (+ optional noise) -> Savitzky-Golay
smoothing along distance -> linear interpolation onto the 500 m grid.
"""

import csv
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.signal import savgol_coeffs, savgol_filter

from .errors import ConfigError, CorruptionError, FormatError, ResolutionError, ShapeError

OTDR_RESOLUTION = 8.2
PROFILE_MAGIC = b"RPP2"
PROFILE_VERSION = 1


@dataclass
class PipelineConfig:
    sg_window: int = 19
    sg_order: int = 2
    target_resolution: float = 500.0
    noise_sigma0: float = 0.05
    noise_slope: float = 0.004
    resolution: float = OTDR_RESOLUTION

    def __post_init__(self):
        if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order or self.sg_order < 0:
            raise ConfigError("sg_window must be odd and greater than sg_order")
        if self.target_resolution <= self.resolution:
            raise ConfigError("target_resolution must exceed the trace resolution")
        if self.noise_sigma0 < 0 or self.noise_slope < 0:
            raise ConfigError("noise parameters must be non-negative")

    def sigma(self, z_m):
        """Per-sample noise standard deviation in dB at distance ``z_m`` (m)."""
        return self.noise_sigma0 + self.noise_slope * np.asarray(z_m) / 1000.0

    def to_dict(self):
        return dict(sg_window=self.sg_window, sg_order=self.sg_order,
                    target_resolution=self.target_resolution, noise_sigma0=self.noise_sigma0,
                    noise_slope=self.noise_slope, resolution=self.resolution)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TraceSet:
    values: np.ndarray
    resolution: float = OTDR_RESOLUTION

    @property
    def z(self):
        return np.arange(self.values.shape[1]) * self.resolution


@dataclass
class PowerProfile2D:
    values: np.ndarray
    freq_grid: np.ndarray
    z_grid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.freq_grid = np.asarray(self.freq_grid, dtype=float)
        self.z_grid = np.asarray(self.z_grid, dtype=float)
        if self.values.shape != (self.freq_grid.size, self.z_grid.size):
            raise ShapeError(f"values shape {self.values.shape} does not match grids "
                             f"({self.freq_grid.size}, {self.z_grid.size})")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("profile contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, PowerProfile2D):
            return NotImplemented
        return (np.array_equal(self.values, other.values)
                and np.array_equal(self.freq_grid, other.freq_grid)
                and np.array_equal(self.z_grid, other.z_grid))


def trace_grid(fiber_length_km, resolution=OTDR_RESOLUTION):
    n = int(np.floor(fiber_length_km * 1000.0 / resolution + 1e-9)) + 1
    return np.arange(n) * resolution


def profile_grid(fiber_length_km, target_resolution=500.0):
    n = int(round(fiber_length_km * 1000.0 / target_resolution)) + 1
    return np.arange(n) * target_resolution


def _interp_rows(x_new, x, Y, extrapolate=0.0):
    """Linear interpolation of every row of ``Y`` from ``x`` onto ``x_new``.

    Points up to ``extrapolate`` beyond either end use the end segment.
    """
    if x_new[0] < x[0] - extrapolate - 1e-9 or x_new[-1] > x[-1] + extrapolate + 1e-9:
        raise ResolutionError("target grid extends beyond the trace span")
    idx = np.clip(np.searchsorted(x, x_new, side="right") - 1, 0, x.size - 2)
    w = (x_new - x[idx]) / (x[idx + 1] - x[idx])
    return (1.0 - w) * Y[:, idx] + w * Y[:, idx + 1]


def emulate_traces(fine_signal_matrix, pcfg, seed=None, z_fine=None, fiber_length=50.0):
    """Sample the fine-grid signal onto the OTDR grid and add measurement noise.

    Noise is Gaussian in dB, independent per sample, with standard deviation
    ``noise_sigma0 + noise_slope * z[km]``; ``seed=None`` is noiseless.
    """
    fine = np.atleast_2d(np.asarray(fine_signal_matrix, dtype=float))
    if z_fine is None:
        z_fine = np.linspace(0.0, fiber_length * 1000.0, fine.shape[1])
    z_fine = np.asarray(z_fine, dtype=float)
    if np.max(np.diff(z_fine)) > pcfg.resolution + 1e-9:
        raise ResolutionError(f"input grid spacing {np.max(np.diff(z_fine))} m is coarser "
                              f"than the {pcfg.resolution} m trace resolution")
    z_t = trace_grid(z_fine[-1] / 1000.0, pcfg.resolution)
    values = _interp_rows(z_t, z_fine, fine)
    if seed is not None:
        rng = np.random.default_rng(seed)
        # drawn distance-major so measure_fast can consume the same stream
        values = values + (rng.standard_normal(values.shape[::-1]) * pcfg.sigma(z_t)[:, None]).T
    return TraceSet(values=values, resolution=pcfg.resolution)


def savgol_smooth(trace, window, order):
    """Savitzky-Golay smoothing along the last axis.

    The first and last ``window // 2`` samples are taken from the polynomial
    fitted to the first/last full window, so the output keeps its length.
    """
    trace = np.asarray(trace, dtype=float)
    if window % 2 != 1 or window <= order or order < 0:
        raise ValueError("window must be odd and greater than order")
    if trace.shape[-1] < window:
        raise ValueError(f"series length {trace.shape[-1]} shorter than window {window}")
    return savgol_filter(trace, window, order, axis=-1, mode="interp")


def downsample(traces, target_resolution=500.0, fiber_length=50.0):
    """Interpolate the trace set onto the ``0:target_resolution:L`` grid.

    The last OTDR sample can fall short of the fiber end (50 km is not a
    multiple of 8.2 m); the final segment is extended over that gap.
    """
    z_t = traces.z
    z_out = profile_grid(fiber_length, target_resolution)
    return _interp_rows(z_out, z_t, traces.values, extrapolate=traces.resolution)


def measure(fine_signal_matrix, pcfg, seed=None, z_fine=None, freq_grid=None, fiber_length=50.0):
    """Full measurement chain: traces, smoothing, downsampling."""
    fine = np.atleast_2d(np.asarray(fine_signal_matrix, dtype=float))
    if z_fine is not None:
        fiber_length = float(z_fine[-1]) / 1000.0
    ts = emulate_traces(fine, pcfg, seed, z_fine=z_fine, fiber_length=fiber_length)
    ts = TraceSet(values=savgol_smooth(ts.values, pcfg.sg_window, pcfg.sg_order),
                  resolution=ts.resolution)
    values = downsample(ts, pcfg.target_resolution, fiber_length)
    if freq_grid is None:
        freq_grid = np.arange(fine.shape[0], dtype=float)
    return PowerProfile2D(values, freq_grid, profile_grid(fiber_length, pcfg.target_resolution))


def _interp_matrix(x_new, x, extrapolate=0.0):
    """Sparse matrix M with ``M @ y == _interp_rows(x_new, x, y[None])[0]``."""
    idx = np.clip(np.searchsorted(x, x_new, side="right") - 1, 0, x.size - 2)
    w = (x_new - x[idx]) / (x[idx + 1] - x[idx])
    rows = np.repeat(np.arange(x_new.size), 2)
    cols = np.stack([idx, idx + 1], axis=1).ravel()
    vals = np.stack([1.0 - w, w], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(x_new.size, x.size))


def _savgol_matrix(n, window, order):
    m = window // 2
    coeffs = savgol_coeffs(window, order, use="dot")
    edge = savgol_filter(np.eye(window), window, order, axis=0, mode="interp")
    S = sparse.lil_matrix((n, n))
    for t in range(m, n - m):
        S[t, t - m:t + m + 1] = coeffs
    S[:m, :window] = edge[:m]
    S[n - m:, n - window:] = edge[window - m:]
    return S.tocsr()


@lru_cache(maxsize=8)
def _operator(n_fine, fine_length_m, sg_window, sg_order, resolution, target_resolution):
    z_fine = np.linspace(0.0, fine_length_m, n_fine)
    z_t = trace_grid(fine_length_m / 1000.0, resolution)
    z_out = profile_grid(fine_length_m / 1000.0, target_resolution)
    D = _interp_matrix(z_out, z_t)
    B = (D @ _savgol_matrix(z_t.size, sg_window, sg_order)).tocsr()
    A = (B @ _interp_matrix(z_t, z_fine)).tocsc()
    support = np.flatnonzero(np.diff(A.indptr))
    Bc = B.tocsc()
    noise_support = np.flatnonzero(np.diff(Bc.indptr))
    return A[:, support].tocsr(), support, Bc[:, noise_support].tocsr(), noise_support, z_t, z_out


def measure_operator(n_fine, fiber_length, pcfg):
    """The noiseless chain as sparse matrices.

    Returns ``(A, support, B, noise_support, z_trace, z_out)``: for a
    fine-grid row ``x`` on a uniform grid and a trace-grid noise row ``e``::

        measure(x) == A @ x[support] + B @ e[noise_support]

    up to floating-point reassociation.  The supports list the columns that
    reach the output at all.
    """
    return _operator(int(n_fine), float(fiber_length) * 1000.0, pcfg.sg_window, pcfg.sg_order,
                     pcfg.resolution, pcfg.target_resolution)


def measure_fast(fine_by_z, pcfg, seed=None, fiber_length=50.0, freq_grid=None, to_db=None):
    """:func:`measure` via the precomputed operator; ``fine_by_z`` is [z x channels].

    ``to_db``, if given, converts the rows of ``fine_by_z`` to dB lazily so
    only the rows inside the operator support are converted.
    """
    A, support, B, noise_support, z_t, z_out = measure_operator(fine_by_z.shape[0], fiber_length, pcfg)
    rows = fine_by_z[support]
    out = A @ (to_db(rows) if to_db else rows)
    if seed is not None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((z_t.size, fine_by_z.shape[1]))[noise_support]
        out = out + B @ (noise * pcfg.sigma(z_t[noise_support])[:, None])
    if freq_grid is None:
        freq_grid = np.arange(fine_by_z.shape[1], dtype=float)
    return PowerProfile2D(out.T, freq_grid, z_out)


def mae(a, b):
    """Maximum absolute error in dB over the whole frequency x distance grid."""
    if isinstance(a, PowerProfile2D) and isinstance(b, PowerProfile2D):
        if not (np.array_equal(a.freq_grid, b.freq_grid) and np.array_equal(a.z_grid, b.z_grid)):
            raise ShapeError("profiles are on different grids")
    va = a.values if isinstance(a, PowerProfile2D) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, PowerProfile2D) else np.asarray(b, dtype=float)
    if va.shape != vb.shape:
        raise ShapeError(f"shape mismatch {va.shape} vs {vb.shape}")
    return float(np.max(np.abs(va - vb)))


# -- serialization -----------------------------------------------------------

def profile_to_bytes(p):
    nf, nz = p.values.shape
    head = PROFILE_MAGIC + struct.pack("<HHH", PROFILE_VERSION, nf, nz)
    body = np.concatenate([p.freq_grid, p.z_grid, p.values.ravel()]).astype("<f8").tobytes()
    return head + body


def profile_from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < 10:
        raise CorruptionError("profile block shorter than its header")
    if buf[:4] != PROFILE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {PROFILE_MAGIC!r}")
    version, nf, nz = struct.unpack("<HHH", buf[4:10])
    if version != PROFILE_VERSION:
        raise FormatError(f"unsupported profile version {version}")
    n = nf + nz + nf * nz
    if len(buf) != 10 + 8 * n:
        raise CorruptionError(f"profile block has {len(buf)} bytes, expected {10 + 8 * n}")
    data = np.frombuffer(buf, dtype="<f8", offset=10).astype(float)
    return PowerProfile2D(data[nf + nz:].reshape(nf, nz), data[:nf], data[nf:nf + nz])


def save_profile(p, path):
    with open(path, "wb") as fh:
        fh.write(profile_to_bytes(p))


def load_profile(path):
    with open(path, "rb") as fh:
        return profile_from_bytes(fh.read())


def save_profile_csv(p, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_THz\\z_m"] + [repr(float(z)) for z in p.z_grid])
        for f, row in zip(p.freq_grid, p.values):
            w.writerow([repr(float(f))] + [repr(float(v)) for v in row])


def load_profile_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    z = np.array([float(v) for v in rows[0][1:]])
    f = np.array([float(r[0]) for r in rows[1:]])
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return PowerProfile2D(vals, f, z)
