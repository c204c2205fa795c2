"""Differential-evolution fine-tuning of pump powers against the plant.

The optimizer is DE/rand/1/bin with clipping to the box ``[0, p_max]``.
The cost of a candidate is the MAE (max absolute dB error) between the
target profile and what the plant measures for that candidate.  Each plant
call gets its own noise seed, derived from the run seed and the running
evaluation number, so the selection decisions do not depend on how many
workers evaluate a generation.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import ConfigError, RamanShapeError
from .seeding import STREAM_DE, child_rng, child_seed
from . import traces

log = logging.getLogger(__name__)

INIT_MODES = ("cnn-assisted", "random")


@dataclass
class DeConfig:
    population_size: int = 20
    F: float = 0.7
    CR: float = 0.9
    max_iterations: int = 100
    mae_stop: float = 0.2
    init_sigma_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 4:
            raise ConfigError("population_size must be >= 4")
        if not 0 < self.F <= 2:
            raise ConfigError("F must lie in (0, 2]")
        if not 0 <= self.CR <= 1:
            raise ConfigError("CR must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.init_sigma_frac < 0:
            raise ConfigError("init_sigma_frac must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["mae_stop"] = float(d["mae_stop"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DeRun:
    best_powers: np.ndarray
    best_mae: float                  # noiseless re-evaluation of best_powers
    history: list                    # best cost after init, then after each generation
    evaluations: int
    init_mode: str
    best_cost: float = float("nan")  # the (noisy) cost that made best_powers the best
    log_lines: list = field(default_factory=list)

    def to_dict(self):
        return {
            "best_powers": [float(p) for p in self.best_powers],
            "best_mae": float(self.best_mae),
            "best_cost": float(self.best_cost),
            "history": [float(h) for h in self.history],
            "evaluations": int(self.evaluations),
            "init_mode": self.init_mode,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class DeAbortedError(RamanShapeError):
    """A plant call failed mid-run; ``run`` holds the partial history."""

    def __init__(self, cause, run):
        super().__init__(f"DE aborted after {run.evaluations} evaluations: {cause}")
        self.run = run


def _bounds(bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ConfigError("bounds must be (lower, upper) with lower <= upper")
    return lo, hi


def init_population(mode, cnn_pred, bounds, NP, sigma_frac, rng):
    """Initial NP x D population.

    ``"cnn-assisted"``: member 0 is ``cnn_pred`` itself, the rest are
    ``cnn_pred`` plus Gaussian noise of std ``sigma_frac * upper`` per
    coordinate, clipped to the bounds.  ``"random"``: i.i.d. uniform draws.
    """
    lo, hi = _bounds(bounds)
    if NP < 4:
        raise ConfigError("population size must be >= 4")
    if mode == "random":
        return lo + rng.random((NP, lo.size)) * (hi - lo)
    if mode != "cnn-assisted":
        raise ConfigError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    if cnn_pred is None:
        raise ConfigError("cnn-assisted initialization needs cnn_pred")
    x0 = np.asarray(cnn_pred, dtype=float)
    if x0.shape != lo.shape or np.any(x0 < lo) or np.any(x0 > hi):
        raise ConfigError(f"cnn_pred {x0} outside the bounds")
    pop = x0 + rng.standard_normal((NP, lo.size)) * (sigma_frac * hi)
    pop = np.clip(pop, lo, hi)
    pop[0] = x0
    return pop


def de_step(population, costs, cfg, rng, cost_fn, bounds=None):
    """One DE/rand/1/bin generation with greedy selection.

    ``cost_fn`` maps an (NP x D) matrix of trial vectors to their NP costs,
    so the caller decides how the evaluations are scheduled.  ``bounds``
    defaults to ``[0, 1]`` in every coordinate.
    """
    pop = np.asarray(population, dtype=float)
    costs = np.asarray(costs, dtype=float)
    NP, D = pop.shape
    if NP < 4:
        raise ConfigError("population size must be >= 4")
    if costs.shape != (NP,):
        raise ConfigError("costs not aligned with population")
    lo, hi = _bounds(bounds) if bounds is not None else (np.zeros(D), np.ones(D))

    trials = np.empty_like(pop)
    for i in range(NP):
        others = np.delete(np.arange(NP), i)
        r1, r2, r3 = rng.choice(others, 3, replace=False)
        mutant = pop[r1] + cfg.F * (pop[r2] - pop[r3])
        cross = rng.random(D) < cfg.CR
        cross[rng.integers(D)] = True
        trials[i] = np.clip(np.where(cross, mutant, pop[i]), lo, hi)

    trial_costs = np.asarray(cost_fn(trials), dtype=float)
    keep = trial_costs <= costs
    new_pop = np.where(keep[:, None], trials, pop)
    new_costs = np.where(keep, trial_costs, costs)
    return new_pop, new_costs


def finetune(target, plant, cfg=None, init_mode="cnn-assisted", cnn_pred=None, workers=1,
             log_fn=None):
    """Search pump powers whose measured profile matches ``target``.

    Stops after ``max_iterations`` generations or once the best cost drops
    to ``mae_stop`` (checked after each generation).  The best-ever
    candidate is re-measured without noise for the reported ``best_mae``.
    """
    cfg = cfg or DeConfig()
    target = target.values if isinstance(target, traces.PowerProfile2D) else np.asarray(target, float)
    p_max = np.asarray(plant.p_max, dtype=float)
    bounds = (np.zeros_like(p_max), p_max)
    rng = child_rng(cfg.seed, 0, STREAM_DE)
    emit = log_fn or log.info
    state = {"n": 0}
    run = DeRun(np.full(p_max.size, np.nan), float("inf"), [], 0, init_mode)

    def cost_one(args):
        k, x = args
        got = plant.apply(x, noise_seed=child_seed(cfg.seed, k + 1, STREAM_DE))
        return traces.mae(target, got.values)

    def cost_fn(X):
        jobs = [(state["n"] + i, x) for i, x in enumerate(X)]
        state["n"] += len(X)
        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    out = list(pool.map(cost_one, jobs))
            else:
                out = [cost_one(j) for j in jobs]
        except RamanShapeError as exc:
            run.evaluations = state["n"]
            raise DeAbortedError(exc, run) from exc
        return np.array(out)

    def record(it, pop, costs):
        b = int(np.argmin(costs))
        run.history.append(float(costs[b]))
        run.best_powers, run.best_cost = pop[b].copy(), float(costs[b])
        line = (f"iteration={it} best_mae_db={costs[b]:.6f} "
                f"best_powers_w={','.join(f'{p:.6f}' for p in pop[b])}")
        run.log_lines.append(line)
        emit(line)

    pop = init_population(init_mode, cnn_pred, bounds, cfg.population_size, cfg.init_sigma_frac, rng)
    costs = cost_fn(pop)
    record(0, pop, costs)
    for it in range(1, cfg.max_iterations + 1):
        pop, costs = de_step(pop, costs, cfg, rng, cost_fn, bounds)
        record(it, pop, costs)
        if run.history[-1] <= cfg.mae_stop:
            break
    run.evaluations = state["n"]
    run.best_mae = traces.mae(target, plant.apply(run.best_powers, noise_seed=None).values)
    return run
