"""The full experiment as a chain of commands sharing one output directory.

    gen-dataset -> train -> evaluate -> finetune -> report

Every command reads the artifacts of the previous ones from ``out_dir`` and
writes its own there; nothing is carried in memory between commands.  All
tables are CSV with a header row, summary records are JSON.

Artifacts (names relative to ``out_dir``)::

    dataset.rds                      gen-dataset
    model.rnn, history.csv           train (sweep: model_n{size}.rnn, history_n{size}.csv, sweep.csv)
    evaluate/{r2,mae,mae_hist,hard_cases}.csv, evaluate/summary.json
    finetune/fig4.csv, finetune/runs.json, finetune/de_log.txt,
    finetune/profiles/{target,achieved}_{i}.{csv,rpp2}
    report/report.json + copies of the tables
"""

import copy
import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import yaml

from . import cnn, dataset, evolve, traces
from .errors import ConfigError, MissingArtifactError
from .plant import Plant, PlantConfig
from .seeding import STREAM_DE, child_seed
from .traces import PipelineConfig

log = logging.getLogger(__name__)

SCALES = {
    "desk": {"n": 2000, "n_train": 1500, "n_test": 300, "n_val": 200, "train_size": None},
    "paper": {"n": 4900, "n_train": 4100, "n_test": 500, "n_val": 300, "train_size": 3700},
}
PAPER_SWEEP = (1500, 2500, 3700)


@dataclass
class ExperimentConfig:
    out_dir: str = "run"
    dataset_file: str = "dataset.rds"
    checkpoint_file: str = "model.rnn"
    report_dir: str = "report"
    scale: str = "desk"
    n: int = 2000
    n_train: int = 1500
    n_test: int = 300
    n_val: int = 200
    train_size: int = None          # final training subset; None uses the whole train split
    hard_threshold: float = 1.0     # dB
    min_hard_cases: int = 0         # fewer hard cases than this -> take the worst decile instead
    hist_bin_width: float = 0.05    # dB
    master_seed: int = 0
    noiseless: bool = False
    workers: int = 1                # not part of the snapshot: results do not depend on it
    plant: PlantConfig = field(default_factory=PlantConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: cnn.TrainConfig = field(default_factory=cnn.TrainConfig)
    de: evolve.DeConfig = field(default_factory=evolve.DeConfig)

    def __post_init__(self):
        if self.hard_threshold <= 0:
            raise ConfigError("hard_threshold must be > 0")
        if self.hist_bin_width <= 0:
            raise ConfigError("hist_bin_width must be > 0")
        if min(self.n_train, self.n_test, self.n_val) < 1:
            raise ConfigError("train, test and val sizes must be >= 1")
        if self.n_train + self.n_test + self.n_val > self.n:
            raise ConfigError(f"split sizes exceed n = {self.n}")
        if self.train_size is not None and not 1 <= self.train_size <= self.n_train:
            raise ConfigError("train_size must lie in [1, n_train]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}")

    @classmethod
    def default(cls, scale="desk", **kw):
        if scale not in SCALES:
            raise ConfigError(f"unknown scale {scale!r}; expected one of {sorted(SCALES)}")
        return cls(scale=scale, **{**SCALES[scale], **kw})

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    @property
    def sizes(self):
        return self.n_train, self.n_test, self.n_val

    def with_seed(self, seed):
        """Copy with ``seed`` as master seed and as the training and DE seeds."""
        out = copy.deepcopy(self)
        out.master_seed = int(seed)
        out.train.seed = int(seed)
        out.de.seed = int(seed)
        return out

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("plant", "pipeline", "train", "de")}
        d.update(plant=self.plant.to_dict(), pipeline=self.pipeline.to_dict(),
                 train=self.train.to_dict(), de=self.de.to_dict())
        return d

    def snapshot(self):
        """Everything that can change a result (paths and worker count left out)."""
        d = self.to_dict()
        for k in ("out_dir", "workers"):
            d.pop(k)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {
            "plant": PlantConfig.from_dict(d.pop("plant", {})),
            "pipeline": PipelineConfig.from_dict(d.pop("pipeline", {})),
            "train": cnn.TrainConfig(**d.pop("train", {})),
            "de": evolve.DeConfig.from_dict(d.pop("de", {})),
        }
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d, **sub)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text, base=None):
        """Parse YAML, filling anything it leaves out from ``base`` (default config)."""
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        merged = _merge((base or cls()).to_dict(), data)
        return cls.from_dict(merged)


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "attenuation_curve":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path, base=None):
    with open(path) as fh:
        return ExperimentConfig.from_yaml(fh.read(), base)


# -- small io helpers ------------------------------------------------------------

def _need(path, producer):
    if not os.path.exists(path):
        raise MissingArtifactError(f"{path} not found; run `{producer}` first")
    return path


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def make_plant(cfg):
    return Plant(cfg.plant, cfg.pipeline, noiseless=cfg.noiseless)


def load_dataset(cfg):
    return dataset.load(_need(cfg.path(cfg.dataset_file), "gen-dataset"))


def load_model(cfg):
    return cnn.load(_need(cfg.path(cfg.checkpoint_file), "train"))


# -- commands --------------------------------------------------------------------

def cmd_gen_dataset(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    ds = dataset.generate(cfg.n, cfg.master_seed, make_plant(cfg), noisy=not cfg.noiseless,
                          workers=cfg.workers)
    ds = dataset.split(ds, cfg.sizes, cfg.master_seed)
    path = cfg.path(cfg.dataset_file)
    dataset.save(ds, path)
    log.info("wrote %s (%d samples)", path, len(ds))
    return path


def _history_rows(history):
    return [(h["epoch"], h["train_loss"], h["val_loss"], h["best_val_loss"]) for h in history]


def _train_one(cfg, ds, size):
    d = dataset.truncate_train(ds, size)
    model = cnn.NetworkModel(input_shape=(ds.freq_grid.size, ds.z_grid.size),
                             p_max=cfg.plant.pump_p_max, seed=cfg.train.seed)
    model, history = cnn.train(model, d, cfg.train)
    va = ds.split["val"]
    val_mae = float(np.mean(np.abs(model.predict(ds.profiles[va]) - ds.powers[va])))
    return model, history, val_mae


def cmd_train(cfg, train_sizes=None):
    """Train the final model, or one model per size when ``train_sizes`` is given.

    With a sweep, every size gets ``model_n{size}.rnn`` / ``history_n{size}.csv``
    plus a row in ``sweep.csv``; the final checkpoint is the one trained on
    ``train_size`` if it is part of the sweep, else the largest size.
    """
    ds = load_dataset(cfg)
    final_size = cfg.train_size or len(ds.split["train"])
    hist_header = ("epoch", "train_loss", "val_loss", "best_val_loss")
    if not train_sizes:
        model, history, _ = _train_one(cfg, ds, final_size)
        cnn.save(model, cfg.path(cfg.checkpoint_file))
        _write_csv(cfg.path("history.csv"), hist_header, _history_rows(history))
        return cfg.path(cfg.checkpoint_file)
    sizes = sorted(set(int(s) for s in train_sizes))
    keep = final_size if final_size in sizes else sizes[-1]
    rows = []
    for size in sizes:
        model, history, val_mae = _train_one(cfg, ds, size)
        cnn.save(model, cfg.path(f"model_n{size}.rnn"))
        _write_csv(cfg.path(f"history_n{size}.csv"), hist_header, _history_rows(history))
        rows.append((size, len(history), min(h["val_loss"] for h in history), val_mae))
        if size == keep:
            cnn.save(model, cfg.path(cfg.checkpoint_file))
            _write_csv(cfg.path("history.csv"), hist_header, _history_rows(history))
    _write_csv(cfg.path("sweep.csv"), ("train_size", "epochs", "best_val_mse", "val_mae_w"), rows)
    return cfg.path(cfg.checkpoint_file)


def histogram(values, width):
    """Counts on bins ``[k*width, (k+1)*width)`` covering ``[0, max(values)]``."""
    values = np.asarray(values, dtype=float)
    n_bins = max(1, int(math.ceil(values.max() / width - 1e-12)))
    if n_bins * width < values.max():
        n_bins += 1
    edges = width * np.arange(n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts


def select_hard_cases(maes, threshold, min_cases=0):
    """Positions of MAE values above ``threshold``.

    If that leaves fewer than ``min_cases``, the worst decile (at least
    ``min_cases``) is taken instead.  Returns ``(positions, threshold used)``.
    """
    maes = np.asarray(maes, dtype=float)
    pos = np.flatnonzero(maes > threshold)
    if len(pos) >= min_cases:
        return pos, float(threshold)
    k = min(len(maes), max(min_cases, int(math.ceil(0.1 * len(maes)))))
    order = np.lexsort((np.arange(len(maes)), -maes))[:k]
    return np.sort(order), float(maes[order].min())


def cmd_evaluate(cfg):
    ds, model = load_dataset(cfg), load_model(cfg)
    rep = cnn.evaluate(model, ds, make_plant(cfg), seed=cfg.master_seed, workers=cfg.workers)
    ev = cfg.path("evaluate")
    freqs = cfg.plant.pump_frequencies
    _write_csv(os.path.join(ev, "r2.csv"), ("pump", "frequency_thz", "r2"),
               [(k + 1, float(freqs[k]), float(rep.r2[k])) for k in range(len(rep.r2))])
    n_p = rep.predicted.shape[1]
    header = (("test_index", "mae_db") + tuple(f"pred_p{k + 1}_w" for k in range(n_p))
              + tuple(f"true_p{k + 1}_w" for k in range(n_p)))
    _write_csv(os.path.join(ev, "mae.csv"), header,
               [(int(i), float(m), *map(float, p), *map(float, t))
                for i, m, p, t in zip(rep.indices, rep.mae, rep.predicted, rep.truth)])
    edges, counts = histogram(rep.mae, cfg.hist_bin_width)
    density = counts / (counts.sum() * cfg.hist_bin_width)
    _write_csv(os.path.join(ev, "mae_hist.csv"), ("bin_lo_db", "bin_hi_db", "count", "density"),
               [(float(edges[k]), float(edges[k + 1]), int(counts[k]), float(density[k]))
                for k in range(len(counts))])
    pos, used = select_hard_cases(rep.mae, cfg.hard_threshold, cfg.min_hard_cases)
    _write_csv(os.path.join(ev, "hard_cases.csv"), ("test_index", "cnn_mae_db"),
               [(int(rep.indices[p]), float(rep.mae[p])) for p in pos])
    summary = {"mu_db": rep.mu, "sigma_db": rep.sigma, "n_test": int(len(rep.mae)),
               "r2": [float(v) for v in rep.r2], "hard_threshold_db": used,
               "n_hard": int(len(pos)), "hist_bin_width_db": cfg.hist_bin_width,
               "noise_seed_master": int(cfg.master_seed)}
    _write_json(os.path.join(ev, "summary.json"), summary)
    return rep, pos


def _fig4_rows(records):
    return [(r["test_index"], r["cnn_mae_db"], r["cnn_assisted"]["best_mae"], r["random"]["best_mae"],
             r["cnn_assisted"]["best_cost"], r["random"]["best_cost"], r["cnn_assisted"]["evaluations"],
             r["random"]["evaluations"]) for r in records]


FIG4_HEADER = ("test_index", "cnn_mae_db", "cnn_assisted_de_mae_db", "random_init_de_mae_db",
               "cnn_assisted_best_cost_db", "random_init_best_cost_db",
               "cnn_assisted_evaluations", "random_init_evaluations")


def cmd_finetune(cfg, limit=None):
    """CNN-assisted and random-init DE, at equal budget, on every hard case.

    Both runs of a case share the DE seed, so they see identical noise
    draws for equal evaluation numbers.  The tables are rewritten after
    each case, so an abort leaves a consistent partial report behind.
    """
    ds, model = load_dataset(cfg), load_model(cfg)
    hard = _read_csv(_need(cfg.path("evaluate", "hard_cases.csv"), "evaluate"))
    if limit is not None:
        hard = hard[:limit]
    plant = make_plant(cfg)
    fd = cfg.path("finetune")
    os.makedirs(os.path.join(fd, "profiles"), exist_ok=True)
    records, lines = [], []

    def flush():
        _write_csv(os.path.join(fd, "fig4.csv"), FIG4_HEADER, _fig4_rows(records))
        _write_json(os.path.join(fd, "runs.json"), records)
        with open(os.path.join(fd, "de_log.txt"), "w") as fh:
            fh.write("".join(l + "\n" for l in lines))

    flush()
    for row in hard:
        i = int(row["test_index"])
        target = ds.profile(i)
        pred = model.predict(target.values)[0]
        de_cfg = evolve.DeConfig(**{**cfg.de.to_dict(), "seed": child_seed(cfg.de.seed, i, STREAM_DE)})
        rec = {"test_index": i, "cnn_mae_db": float(row["cnn_mae_db"]),
               "cnn_powers": [float(p) for p in pred]}
        for mode, key in (("cnn-assisted", "cnn_assisted"), ("random", "random")):
            tag = f"case={i} mode={mode} "
            try:
                run = evolve.finetune(target, plant, de_cfg, mode, pred, workers=cfg.workers,
                                      log_fn=lambda l, tag=tag: lines.append(tag + l))
            except evolve.DeAbortedError as exc:
                rec[key] = exc.run.to_dict()
                records.append(rec)
                flush()
                raise
            rec[key] = run.to_dict()
            if mode == "cnn-assisted":
                achieved = plant.apply(run.best_powers, noise_seed=None)
        names = {}
        for kind, prof in (("target", target), ("achieved", achieved)):
            stem = os.path.join("profiles", f"{kind}_{i}")
            traces.save_profile_csv(prof, os.path.join(fd, stem + ".csv"))
            traces.save_profile(prof, os.path.join(fd, stem + ".rpp2"))
            names[kind] = "finetune/" + stem
        rec["profiles"] = names
        records.append(rec)
        flush()
    return records


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "seeds", "evaluation", "hard_cases", "training", "tables"],
    "properties": {
        "config": {"type": "object"},
        "seeds": {
            "type": "object",
            "required": ["master", "train", "de"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("master", "train", "de")},
        },
        "evaluation": {
            "type": "object",
            "required": ["r2", "mu_db", "sigma_db", "mae_db", "histogram"],
            "properties": {
                "r2": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "mu_db": {"type": "number"},
                "sigma_db": {"type": "number", "minimum": 0},
                "mae_db": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "histogram": {
                    "type": "object",
                    "required": ["edges_db", "counts"],
                    "properties": {
                        "edges_db": {"type": "array", "items": {"type": "number"}},
                        "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    },
                },
            },
        },
        "hard_cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["test_index", "cnn_mae_db", "cnn_assisted_de_mae_db",
                             "random_init_de_mae_db", "profiles"],
                "properties": {
                    "test_index": {"type": "integer", "minimum": 0},
                    "cnn_mae_db": {"type": "number", "minimum": 0},
                    "cnn_assisted_de_mae_db": {"type": "number", "minimum": 0},
                    "random_init_de_mae_db": {"type": "number", "minimum": 0},
                    "profiles": {
                        "type": "object",
                        "required": ["target", "achieved"],
                        "properties": {"target": {"type": "string"}, "achieved": {"type": "string"}},
                    },
                },
            },
        },
        "training": {"type": "object", "required": ["history"]},
        "tables": {"type": "array", "items": {"type": "string"}},
    },
}

_TABLES = ("history.csv", "evaluate/r2.csv", "evaluate/mae.csv", "evaluate/mae_hist.csv",
           "evaluate/hard_cases.csv", "finetune/fig4.csv")


def cmd_report(cfg):
    """Consolidate every artifact into ``report/report.json`` plus CSV copies."""
    import jsonschema

    summary = _read_json(_need(cfg.path("evaluate", "summary.json"), "evaluate"))
    mae_rows = _read_csv(_need(cfg.path("evaluate", "mae.csv"), "evaluate"))
    hist_rows = _read_csv(_need(cfg.path("evaluate", "mae_hist.csv"), "evaluate"))
    runs = _read_json(_need(cfg.path("finetune", "runs.json"), "finetune"))
    history = _read_csv(_need(cfg.path("history.csv"), "train"))
    _need(cfg.path(cfg.checkpoint_file), "train")
    for r in runs:
        for stem in r["profiles"].values():
            for ext in (".csv", ".rpp2"):
                _need(cfg.path(stem + ext), "finetune")

    edges = [float(hist_rows[0]["bin_lo_db"])] + [float(r["bin_hi_db"]) for r in hist_rows]
    report = {
        "config": cfg.snapshot(),
        "seeds": {"master": cfg.master_seed, "train": cfg.train.seed, "de": cfg.de.seed},
        "evaluation": {
            "r2": summary["r2"], "mu_db": summary["mu_db"], "sigma_db": summary["sigma_db"],
            "mae_db": [float(r["mae_db"]) for r in mae_rows],
            "test_index": [int(r["test_index"]) for r in mae_rows],
            "hard_threshold_db": summary["hard_threshold_db"],
            "histogram": {"edges_db": edges, "counts": [int(r["count"]) for r in hist_rows]},
        },
        "hard_cases": [{
            "test_index": r["test_index"], "cnn_mae_db": r["cnn_mae_db"],
            "cnn_assisted_de_mae_db": r["cnn_assisted"]["best_mae"],
            "random_init_de_mae_db": r["random"]["best_mae"],
            "cnn_powers_w": r["cnn_powers"],
            "cnn_assisted_de_powers_w": r["cnn_assisted"]["best_powers"],
            "random_init_de_powers_w": r["random"]["best_powers"],
            "cnn_assisted_history_db": r["cnn_assisted"]["history"],
            "random_init_history_db": r["random"]["history"],
            "profiles": {k: v + ".csv" for k, v in r["profiles"].items()},
        } for r in runs],
        "training": {"history": [{k: float(v) for k, v in h.items()} for h in history]},
        "tables": [os.path.basename(t) for t in _TABLES],
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    rd = cfg.path(cfg.report_dir)
    os.makedirs(rd, exist_ok=True)
    _write_json(os.path.join(rd, "report.json"), report)
    for t in _TABLES:
        with open(_need(cfg.path(t), "the producing command"), "rb") as src:
            data = src.read()
        with open(os.path.join(rd, os.path.basename(t)), "wb") as dst:
            dst.write(data)
    return os.path.join(rd, "report.json")
