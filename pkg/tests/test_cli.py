import hashlib
import json
import os

import numpy as np
import pytest
import yaml

from ramanshape import cli, experiment
from ramanshape.experiment import ExperimentConfig

TINY = {
    "n": 36, "n_train": 20, "n_test": 10, "n_val": 6,
    "hard_threshold": 1.0, "min_hard_cases": 2,
    "train": {"max_epochs": 3, "patience": 2, "batch_size": 8},
    "de": {"population_size": 5, "max_iterations": 2},
}


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run(argv, capsys=None):
    code = cli.main(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    path = d / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def _chain(cfg_path, out, extra=()):
    for cmd in ("gen-dataset", "train", "evaluate", "finetune", "report"):
        assert cli.main([cmd, "--config", cfg_path, "--out", str(out), "--seed", "5", *extra]) == 0, cmd


@pytest.fixture(scope="module")
def noiseless_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("noiseless")
    _chain(tiny_cfg, out, ["--noiseless"])
    return out


@pytest.fixture(scope="module")
def noisy_run(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("noisy")
    _chain(tiny_cfg, out)
    return out


def _cfg(tiny_cfg, out, noiseless=False):
    base = ExperimentConfig.default("desk")
    cfg = experiment.load_config(tiny_cfg, base).with_seed(5)
    d = cfg.to_dict()
    d.update(out_dir=str(out), noiseless=noiseless)
    return ExperimentConfig.from_dict(d)


# -- configuration -------------------------------------------------------------

def test_default_config_roundtrip(capsys):
    code, out = run(["default-config"], capsys)
    assert code == 0
    cfg = ExperimentConfig.from_yaml(out.out)
    assert cfg.to_dict() == ExperimentConfig.default("desk").to_dict()
    assert (cfg.n, cfg.sizes) == (2000, (1500, 300, 200))


def test_paper_scale_preset(capsys):
    code, out = run(["default-config", "--scale", "paper", "--seed", "9"], capsys)
    cfg = ExperimentConfig.from_yaml(out.out)
    assert (cfg.n, cfg.sizes, cfg.train_size) == (4900, (4100, 500, 300), 3700)
    assert cfg.master_seed == cfg.train.seed == cfg.de.seed == 9


def test_snapshot_lists_every_tunable():
    snap = ExperimentConfig().snapshot()
    for section, obj in (("plant", ExperimentConfig().plant), ("pipeline", ExperimentConfig().pipeline),
                         ("train", ExperimentConfig().train), ("de", ExperimentConfig().de)):
        assert set(snap[section]) == set(obj.__dataclass_fields__)
    assert "workers" not in snap


@pytest.mark.parametrize("bad", [{"hard_threshold": 0}, {"n": 10}, {"bogus_key": 1},
                                 {"de": {"population_size": 2}}, {"plant": {"integration_step": 7}}])
def test_bad_config_reports_json_error(tmp_path, capsys, bad):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(bad))
    code, out = run(["default-config", "--config", str(p)], capsys)
    assert code != 0
    err = json.loads(out.err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"


def test_missing_artifact_names_producer(tmp_path, capsys):
    for cmd, producer in (("train", "gen-dataset"), ("evaluate", "gen-dataset"),
                          ("finetune", "gen-dataset"), ("report", "evaluate")):
        code, out = run([cmd, "--out", str(tmp_path)], capsys)
        assert code != 0
        err = json.loads(out.err.strip())
        assert err["error"] == "MissingArtifactError" and producer in err["message"]


# -- helpers ---------------------------------------------------------------------

def test_histogram_covers_range():
    vals = np.array([0.0, 0.049, 0.05, 0.31, 1.2])
    edges, counts = experiment.histogram(vals, 0.05)
    assert edges[0] == 0 and edges[-1] >= vals.max() and edges[-2] < vals.max()
    assert np.allclose(np.diff(edges), 0.05)
    assert counts.sum() == vals.size


def test_select_hard_cases():
    m = np.array([0.5, 1.2, 0.9, 1.01, 3.0])
    pos, thr = experiment.select_hard_cases(m, 1.0)
    assert pos.tolist() == [1, 3, 4] and thr == 1.0
    pos, thr = experiment.select_hard_cases(np.linspace(0, 0.9, 30), 1.0, min_cases=5)
    assert len(pos) == 5 and thr == pytest.approx(np.linspace(0, 0.9, 30)[25])


# -- the command chain -----------------------------------------------------------------

def test_gen_dataset_repeatable(noisy_run, tiny_cfg, tmp_path):
    assert cli.main(["gen-dataset", "--config", tiny_cfg, "--out", str(tmp_path), "--seed", "5"]) == 0
    assert sha(tmp_path / "dataset.rds") == sha(noisy_run / "dataset.rds")


def test_train_repeatable(noisy_run, tiny_cfg):
    cfg = _cfg(tiny_cfg, noisy_run)
    before = sha(noisy_run / "model.rnn")
    experiment.cmd_train(cfg)
    assert sha(noisy_run / "model.rnn") == before


def test_train_size_sweep(tiny_cfg, noisy_run, tmp_path):
    import shutil
    shutil.copy(noisy_run / "dataset.rds", tmp_path / "dataset.rds")
    code = cli.main(["train", "--config", tiny_cfg, "--out", str(tmp_path), "--seed", "5",
                     "--train-size", "10", "15", "20"])
    assert code == 0
    for n in (10, 15, 20):
        assert (tmp_path / f"history_n{n}.csv").exists() and (tmp_path / f"model_n{n}.rnn").exists()
    rows = experiment._read_csv(tmp_path / "sweep.csv")
    assert [int(r["train_size"]) for r in rows] == [10, 15, 20]
    assert sha(tmp_path / "model.rnn") == sha(tmp_path / "model_n20.rnn")


def test_evaluate_outputs(noisy_run, tiny_cfg):
    ev = noisy_run / "evaluate"
    summary = json.loads((ev / "summary.json").read_text())
    maes = np.array([float(r["mae_db"]) for r in experiment._read_csv(ev / "mae.csv")])
    assert abs(np.mean(maes) - summary["mu_db"]) < 1e-12
    assert abs(np.std(maes) - summary["sigma_db"]) < 1e-12
    assert len(summary["r2"]) == 4
    hist = experiment._read_csv(ev / "mae_hist.csv")
    lo = np.array([float(r["bin_lo_db"]) for r in hist])
    hi = np.array([float(r["bin_hi_db"]) for r in hist])
    assert lo[0] == 0 and hi[-1] >= maes.max() and np.allclose(hi - lo, 0.05)
    assert sum(int(r["count"]) for r in hist) == maes.size
    hard = experiment._read_csv(ev / "hard_cases.csv")
    above = sorted(i for i, m in zip(
        [int(r["test_index"]) for r in experiment._read_csv(ev / "mae.csv")], maes) if m > 1.0)
    if len(above) >= 2:
        assert sorted(int(r["test_index"]) for r in hard) == above
    else:
        assert len(hard) == 2


def test_finetune_never_worse_than_cnn_noiseless(noiseless_run):
    rows = experiment._read_csv(noiseless_run / "finetune" / "fig4.csv")
    assert rows
    for r in rows:
        assert float(r["cnn_assisted_de_mae_db"]) <= float(r["cnn_mae_db"]) + 1e-12
        assert int(r["cnn_assisted_evaluations"]) == int(r["random_init_evaluations"])


def test_report_bundle(noisy_run, tiny_cfg):
    import jsonschema
    rep = json.loads((noisy_run / "report" / "report.json").read_text())
    jsonschema.validate(rep, experiment.REPORT_SCHEMA)
    assert len(rep["evaluation"]["r2"]) == 4
    assert rep["seeds"]["master"] == 5
    for case in rep["hard_cases"]:
        for rel in case["profiles"].values():
            assert os.path.exists(noisy_run / rel)
    for t in rep["tables"]:
        assert (noisy_run / "report" / t).exists()
    before = sha(noisy_run / "report" / "report.json")
    experiment.cmd_report(_cfg(tiny_cfg, noisy_run))
    assert sha(noisy_run / "report" / "report.json") == before


def test_report_regenerates_from_dataset(noisy_run, tiny_cfg, tmp_path):
    import shutil
    shutil.copy(noisy_run / "dataset.rds", tmp_path / "dataset.rds")
    for cmd in ("train", "evaluate", "finetune", "report"):
        assert cli.main([cmd, "--config", tiny_cfg, "--out", str(tmp_path), "--seed", "5"]) == 0
    assert sha(tmp_path / "report" / "report.json") == sha(noisy_run / "report" / "report.json")
