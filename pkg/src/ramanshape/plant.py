"""Frequency-resolved Raman plant: a 50 km SMF span with four counter-propagating pumps.

The plant maps a pump setting to the measured 2D signal power profile
``P(f, z)``.  Pumps are solved first (pump-pump Raman coupling, undepleted
by the weak OTDR probe), then every channel is propagated independently
through the resulting pump field, and finally the OTDR measurement chain
in :mod:`ramanshape.traces` turns the fine-grid signal into a profile on
the 500 m grid.

Units: frequencies in THz, distances in km inside the solvers (m on the
public grids), powers in W (dBm for signal matrices), Raman gain in
1/(W km), attenuation in dB/km on the public surface.
"""

from dataclasses import dataclass, field, asdict

import numba
import numpy as np

from .errors import ConfigError, DomainError, NumericalBlowupError
from . import traces

SIGNAL_BAND = (191.8, 196.2)
PUMP_BAND = (203.9, 211.1)
CHANNEL_SPACING = 0.1
DB_TO_NEPER = np.log(10.0) / 10.0


def default_channel_freqs():
    return [round(SIGNAL_BAND[0] + CHANNEL_SPACING * k, 10) for k in range(44)]


@dataclass
class PlantConfig:
    fiber_length: float = 50.0
    channel_freqs: list = field(default_factory=default_channel_freqs)
    probe_power: float = -16.0
    attenuation_curve: dict = field(default_factory=lambda: {193.4: 0.20, 207.0: 0.25})
    raman_peak_gain: float = 0.39
    raman_peak_shift: float = 13.2
    raman_cutoff_shift: float = 15.0
    integration_step: float = 5.0
    pump_frequencies: list = field(default_factory=lambda: [210.2, 208.8, 206.9, 204.6])
    pump_p_max: list = field(default_factory=lambda: [0.3, 0.3, 0.3, 0.3])
    pump_pump_coupling: bool = True
    frequency_ratio_depletion: bool = True

    def __post_init__(self):
        self.channel_freqs = [float(f) for f in self.channel_freqs]
        self.pump_frequencies = [float(f) for f in self.pump_frequencies]
        self.pump_p_max = [float(p) for p in self.pump_p_max]
        self.attenuation_curve = {float(k): float(v) for k, v in self.attenuation_curve.items()}
        self.validate()

    def validate(self):
        ch = np.asarray(self.channel_freqs)
        if ch.size == 0:
            raise ConfigError("channel_freqs is empty")
        if np.any(np.diff(ch) <= 0):
            raise ConfigError("channel_freqs must be strictly ascending")
        if ch[0] < SIGNAL_BAND[0] - 1e-9 or ch[-1] > SIGNAL_BAND[1] + 1e-9:
            raise ConfigError(f"channel_freqs must lie in {SIGNAL_BAND} THz")
        slots = (ch - ch[0]) / CHANNEL_SPACING
        if np.any(np.abs(slots - np.round(slots)) > 1e-6):
            raise ConfigError("channel_freqs must sit on the 100 GHz grid")
        n_steps = self.fiber_length * 1000.0 / self.integration_step
        if self.fiber_length <= 0 or self.integration_step <= 0 or abs(n_steps - round(n_steps)) > 1e-9:
            raise ConfigError("integration_step must divide fiber_length*1000 evenly")
        if len(self.attenuation_curve) < 2:
            raise ConfigError("attenuation_curve needs at least two anchors")
        if any(v <= 0 for v in self.attenuation_curve.values()):
            raise ConfigError("attenuation_curve values must be strictly positive")
        pf = np.asarray(self.pump_frequencies)
        if pf.size != len(self.pump_p_max):
            raise ConfigError("pump_frequencies and pump_p_max differ in length")
        d = np.diff(pf)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigError("pump_frequencies must be strictly monotone")
        if pf.min() < PUMP_BAND[0] or pf.max() > PUMP_BAND[1]:
            raise ConfigError(f"pump_frequencies must lie in {PUMP_BAND} THz")
        if any(p <= 0 for p in self.pump_p_max):
            raise ConfigError("pump_p_max must be positive")
        if not 0 < self.raman_peak_shift < self.raman_cutoff_shift:
            raise ConfigError("need 0 < raman_peak_shift < raman_cutoff_shift")

    @property
    def n_steps(self):
        return int(round(self.fiber_length * 1000.0 / self.integration_step))

    @property
    def z_fine(self):
        """Integration grid in m."""
        return np.linspace(0.0, self.fiber_length * 1000.0, self.n_steps + 1)

    def to_dict(self):
        d = asdict(self)
        d["attenuation_curve"] = {float(k): float(v) for k, v in sorted(self.attenuation_curve.items())}
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def setting(self, powers):
        return PumpSetting(powers, self.pump_frequencies, self.pump_p_max)


@dataclass
class PumpSetting:
    powers: np.ndarray
    frequencies: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        self.powers = np.asarray(self.powers, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.p_max = np.asarray(self.p_max, dtype=float)
        if not (self.powers.shape == self.frequencies.shape == self.p_max.shape):
            raise ConfigError("powers, frequencies and p_max must have equal shapes")
        if np.any(self.powers < 0) or np.any(self.powers > self.p_max) or not np.all(np.isfinite(self.powers)):
            raise ConfigError(f"pump powers {self.powers} outside [0, p_max]")


@dataclass
class PumpField:
    grid: np.ndarray
    powers: np.ndarray


def raman_gain(delta_f, pump_freq, cfg):
    """Triangular Raman gain coefficient in 1/(W km).

    Rises linearly from 0 at zero shift to the peak at ``raman_peak_shift``,
    falls back to 0 at ``raman_cutoff_shift``.  The peak scales with
    ``pump_freq`` relative to the highest configured pump frequency.
    """
    delta_f = np.asarray(delta_f, dtype=float)
    peak = cfg.raman_peak_gain * np.asarray(pump_freq, dtype=float) / max(cfg.pump_frequencies)
    s, c = cfg.raman_peak_shift, cfg.raman_cutoff_shift
    shape = np.where(
        delta_f <= s,
        delta_f / s,
        (c - delta_f) / (c - s),
    )
    shape = np.clip(shape, 0.0, None)
    shape = np.where((delta_f <= 0) | (delta_f >= c), 0.0, shape)
    out = peak * shape
    return out if out.ndim else float(out)


def attenuation_domain(cfg):
    lo = min(SIGNAL_BAND[0], min(cfg.channel_freqs), min(cfg.attenuation_curve))
    hi = max(PUMP_BAND[1], max(cfg.pump_frequencies), max(cfg.attenuation_curve))
    return lo, hi


def attenuation(freq, cfg):
    """Fiber loss in dB/km, piecewise linear through the anchors of ``attenuation_curve``.

    The outer segments are extended linearly to cover the signal and pump
    bands; anything further out raises :class:`DomainError`.
    """
    freq = np.asarray(freq, dtype=float)
    lo, hi = attenuation_domain(cfg)
    if np.any(freq < lo - 1e-9) or np.any(freq > hi + 1e-9):
        raise DomainError(f"frequency outside attenuation domain [{lo}, {hi}] THz")
    xs = np.array(sorted(cfg.attenuation_curve))
    ys = np.array([cfg.attenuation_curve[x] for x in xs])
    out = np.interp(freq, xs, ys)
    left = freq < xs[0]
    right = freq > xs[-1]
    out = np.where(left, ys[0] + (freq - xs[0]) * (ys[1] - ys[0]) / (xs[1] - xs[0]), out)
    out = np.where(right, ys[-1] + (freq - xs[-1]) * (ys[-1] - ys[-2]) / (xs[-1] - xs[-2]), out)
    if np.any(out <= 0):
        raise DomainError("attenuation extrapolates to a non-positive value")
    return out if out.ndim else float(out)


def pump_coupling_matrix(cfg):
    """Matrix ``C`` with ``dP_j/du = P_j (-alpha_j + sum_k C[j, k] P_k)``."""
    f = np.asarray(cfg.pump_frequencies)
    n = f.size
    C = np.zeros((n, n))
    if not cfg.pump_pump_coupling:
        return C
    for j in range(n):
        for k in range(n):
            if f[k] > f[j]:
                C[j, k] = raman_gain(f[k] - f[j], f[k], cfg)
            elif f[k] < f[j]:
                ratio = f[j] / f[k] if cfg.frequency_ratio_depletion else 1.0
                C[j, k] = -ratio * raman_gain(f[j] - f[k], f[j], cfg)
    return C


def signal_gain_matrix(cfg):
    """Matrix ``G`` [channels x pumps] of pump-to-signal gain coefficients."""
    fs = np.asarray(cfg.channel_freqs)[:, None]
    fp = np.asarray(cfg.pump_frequencies)[None, :]
    return raman_gain(fp - fs, np.broadcast_to(fp, (fs.size, fp.size)), cfg)


@numba.njit(cache=True, nogil=True)
def _pump_rhs(y, alpha, C, out):
    n = y.size
    for j in range(n):
        acc = -alpha[j]
        for k in range(n):
            acc += C[j, k] * y[k]
        out[j] = y[j] * acc


@numba.njit(cache=True, nogil=True)
def _rk4_pumps(p0, alpha, C, h, n_steps):
    n = p0.size
    out = np.empty((n_steps + 1, n))
    out[0] = p0
    y = p0.copy()
    tmp = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    for s in range(n_steps):
        _pump_rhs(y, alpha, C, k1)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * h * k1[j]
        _pump_rhs(tmp, alpha, C, k2)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * h * k2[j]
        _pump_rhs(tmp, alpha, C, k3)
        for j in range(n):
            tmp[j] = y[j] + h * k3[j]
        _pump_rhs(tmp, alpha, C, k4)
        for j in range(n):
            y[j] += (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if not np.isfinite(y[j]):
                return out, s + 1
            if y[j] < 0.0:
                y[j] = 0.0
            out[s + 1, j] = y[j]
    return out, -1


@numba.njit(cache=True, nogil=True)
def _rk4_signal(P, alpha_p, C, G, alpha_s, h):
    """Per-channel linear gain y(z)/y(0) from RK4 on y' = (-alpha_s + G P(z)) y.

    P is the pump field [N x pumps] on the ascending z grid.  Mid-step pump
    powers come from cubic Hermite interpolation with dP/dz = -dP/du taken
    from the pump ODE.  Returns ``(Y [N x channels], failing step or -1)``.
    """
    N, n_p = P.shape
    n_s = alpha_s.size
    Y = np.empty((N, n_s))
    d0 = np.empty(n_p)
    d1 = np.empty(n_p)
    pm = np.empty(n_p)
    r0 = np.empty(n_s)
    for i in range(n_s):
        Y[0, i] = 1.0
        acc = -alpha_s[i]
        for j in range(n_p):
            acc += G[i, j] * P[0, j]
        r0[i] = acc
    _pump_rhs(P[0], alpha_p, C, d0)
    for s in range(N - 1):
        _pump_rhs(P[s + 1], alpha_p, C, d1)
        for j in range(n_p):
            pm[j] = 0.5 * (P[s, j] + P[s + 1, j]) - (h / 8.0) * (d0[j] - d1[j])
            d0[j] = d1[j]
        for i in range(n_s):
            rm = -alpha_s[i]
            r1 = -alpha_s[i]
            for j in range(n_p):
                rm += G[i, j] * pm[j]
                r1 += G[i, j] * P[s + 1, j]
            a2 = 1.0 + 0.5 * h * r0[i]
            a3 = 1.0 + 0.5 * h * rm * a2
            a4 = 1.0 + h * rm * a3
            g = 1.0 + (h / 6.0) * (r0[i] + 2.0 * rm * a2 + 2.0 * rm * a3 + r1 * a4)
            if not (g > 0.0 and g < np.inf):
                return Y, s + 1
            Y[s + 1, i] = Y[s, i] * g
            r0[i] = r1
    return Y, -1


def _check_setting(setting, cfg):
    if not isinstance(setting, PumpSetting):
        setting = cfg.setting(setting)
    if not np.allclose(setting.frequencies, cfg.pump_frequencies):
        raise ConfigError("setting frequencies do not match the plant's pump frequencies")
    return setting


def solve_pump_evolution(setting, cfg, _cache=None):
    """Integrate the counter-propagating pumps from z = L back to z = 0 with RK4.

    Returns a :class:`PumpField` on the ascending integration grid (m); the
    last column equals the injected powers exactly.
    """
    setting = _check_setting(setting, cfg)
    if _cache is None:
        alpha = attenuation(np.asarray(cfg.pump_frequencies), cfg) * DB_TO_NEPER
        C = pump_coupling_matrix(cfg)
    else:
        alpha, C = _cache
    h = cfg.integration_step / 1000.0
    out, bad = _rk4_pumps(setting.powers.copy(), np.asarray(alpha, float), C, h, cfg.n_steps)
    if bad >= 0:
        raise NumericalBlowupError(f"non-finite pump power at integration step {bad}", step=bad)
    return PumpField(grid=cfg.z_fine, powers=out[::-1].T.copy())


def _signal_gain(pump_powers, cfg, alpha_s, alpha_p, C, G):
    """Linear signal gain relative to launch, laid out [z x channels]."""
    P = np.ascontiguousarray(pump_powers.T)
    Y, bad = _rk4_signal(P, np.asarray(alpha_p, float), C, G, np.asarray(alpha_s, float),
                         cfg.integration_step / 1000.0)
    if bad >= 0:
        raise NumericalBlowupError(f"signal integration failed at step {bad}", step=bad)
    return Y


def _to_dbm(Y, cfg):
    return cfg.probe_power + np.log(Y) / DB_TO_NEPER


def solve_signal_profile(setting, cfg):
    """Fine-grid signal power in dBm, shape [channels x integration grid].

    Each channel starts at ``probe_power`` at z = 0 and is integrated forward
    with RK4 through the pump field.  Pump values between grid nodes come
    from cubic Hermite interpolation using the pump ODE right-hand side.
    """
    setting = _check_setting(setting, cfg)
    alpha_p = attenuation(np.asarray(cfg.pump_frequencies), cfg) * DB_TO_NEPER
    C = pump_coupling_matrix(cfg)
    pump = solve_pump_evolution(setting, cfg, _cache=(alpha_p, C))
    alpha_s = attenuation(np.asarray(cfg.channel_freqs), cfg) * DB_TO_NEPER
    return _to_dbm(_signal_gain(pump.powers, cfg, alpha_s, alpha_p, C, signal_gain_matrix(cfg)), cfg).T


def apply(setting, cfg, noise_seed=None, pcfg=None):
    """Apply a pump setting to the simulated testbed and return the measured profile."""
    pcfg = pcfg or traces.PipelineConfig()
    fine = solve_signal_profile(setting, cfg)
    return traces.measure(fine, pcfg, noise_seed, z_fine=cfg.z_fine,
                          freq_grid=cfg.channel_freqs, fiber_length=cfg.fiber_length)


class Plant:
    """The simulated testbed: pump powers in, measured PowerProfile2D out.

    Caches the coefficient matrices so repeated calls (dataset generation,
    DE cost evaluations) only pay for the integration.  Instances are
    immutable after construction and safe to share between threads.
    """

    def __init__(self, cfg=None, pcfg=None, noiseless=False):
        self.cfg = cfg or PlantConfig()
        self.pcfg = pcfg or traces.PipelineConfig()
        self.noiseless = noiseless
        self._alpha_p = attenuation(np.asarray(self.cfg.pump_frequencies), self.cfg) * DB_TO_NEPER
        self._alpha_s = attenuation(np.asarray(self.cfg.channel_freqs), self.cfg) * DB_TO_NEPER
        self._C = pump_coupling_matrix(self.cfg)
        self._G = signal_gain_matrix(self.cfg)
        self.evaluations = 0

    @property
    def p_max(self):
        return np.asarray(self.cfg.pump_p_max)

    def signal(self, powers):
        """Fine-grid signal in dBm, laid out [z x channels]."""
        setting = _check_setting(powers, self.cfg)
        return _to_dbm(self._gain(setting), self.cfg)

    def _gain(self, setting):
        pump = solve_pump_evolution(setting, self.cfg, _cache=(self._alpha_p, self._C))
        return _signal_gain(pump.powers, self.cfg, self._alpha_s, self._alpha_p, self._C, self._G)

    def apply(self, powers, noise_seed=None):
        self.evaluations += 1
        if self.noiseless:
            noise_seed = None
        Y = self._gain(_check_setting(powers, self.cfg))
        return traces.measure_fast(Y, self.pcfg, noise_seed, fiber_length=self.cfg.fiber_length,
                                   freq_grid=self.cfg.channel_freqs, to_db=lambda y: _to_dbm(y, self.cfg))
