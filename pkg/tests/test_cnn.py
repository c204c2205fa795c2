import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ramanshape import cnn, dataset, traces
from ramanshape.errors import (ConfigError, CorruptionError, DivergenceError, FormatError,
                               ShapeError, UndefinedMetricError)

SMALL_ARCH = [
    {"type": "conv", "filters": 3, "kernel": 3}, {"type": "relu"}, {"type": "maxpool", "size": 2},
    {"type": "flatten"}, {"type": "dense", "units": 8}, {"type": "relu"},
    {"type": "dense", "units": 4}, {"type": "sigmoid"},
]


def _tiny_ds(n=40, seed=0, shape=(8, 12), holdout=5):
    r = np.random.default_rng(seed)
    powers = r.uniform(0, 0.3, (n, 4))
    base = r.normal(size=(4,) + shape)
    profiles = np.einsum("nk,kij->nij", powers, base) + 0.01 * r.normal(size=(n,) + shape)
    ds = dataset.Dataset(powers, profiles, np.arange(shape[0], dtype=float),
                         np.arange(shape[1], dtype=float), seed, {})
    return dataset.split(ds, (n - 2 * holdout, holdout, holdout), seed)


@pytest.fixture(scope="module")
def model():
    m = cnn.NetworkModel(seed=0)
    m.fit_normalization(np.random.default_rng(0).normal(-14, 3, size=(8, 44, 101)))
    return m


def test_weight_count_matches_architecture(model):
    expected = (9 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 23 * 32 * 128 + 128) + (128 * 4 + 4)
    assert model.n_weights == expected
    assert model.weights.size == expected


def test_forward_bounds_and_repeatability(model):
    x = np.random.default_rng(1).normal(-14, 3, size=(44, 101))
    a, b = model.forward(x), model.forward(x.copy())
    assert a.shape == (4,) and np.array_equal(a, b)
    assert np.all(np.isfinite(a)) and np.all((a >= 0) & (a <= 0.3))
    prof = traces.PowerProfile2D(x, np.arange(44.0), np.arange(101.0))
    assert np.array_equal(model.forward(prof), a)


def test_forward_shape_error(model):
    with pytest.raises(ShapeError):
        model.forward(np.zeros((44, 100)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3))
def test_output_always_bounded(seed, scale):
    r = np.random.default_rng(seed)
    m = cnn.NetworkModel(SMALL_ARCH, (8, 12), p_max=[0.1, 0.2, 0.3, 0.4], seed=seed)
    m.weights[...] = r.normal(size=m.n_weights) * scale
    out = m.predict(r.normal(size=(3, 8, 12)) * scale)
    assert np.all(out >= 0) and np.all(out <= m.output_scale)


def test_normalization_roundtrip(model):
    x = np.random.default_rng(2).normal(-14, 3, size=(2, 44, 101))
    assert np.max(np.abs(model.denormalize(model.normalize(x)) - x)) < 1e-12
    p = np.array([[0.1, 0.2, 0.0, 0.3]])
    assert np.max(np.abs(model.denormalize_powers(model.normalize_powers(p)) - p)) < 1e-12


# -- gradient check ---------------------------------------------------------------

def test_grad_check_default_architecture(model):
    x = np.random.default_rng(3).normal(-14, 3, size=(44, 101))
    worst, idx = cnn.grad_check(model, x, n_weights=200, seed=0)
    assert len(idx) >= 200
    assert worst < 1e-4
    # every parametric layer (conv, dense) contributes weights and biases
    for layer, sl in zip(model.layers, model.layer_slices):
        if sl.stop > sl.start:
            assert np.any((idx >= sl.start) & (idx < sl.stop))


@pytest.mark.parametrize("seed", [1, 2])
def test_grad_check_other_probes(model, seed):
    x = np.random.default_rng(10 + seed).normal(-14, 3, size=(44, 101))
    worst, idx = cnn.grad_check(model, x, n_weights=200, seed=seed)
    assert worst < 1e-4


def test_grad_check_zero_input(model):
    worst, _ = cnn.grad_check(model, np.zeros((44, 101)), n_weights=40)
    assert np.all(np.isfinite(model.grads))
    assert worst < 1e-4


def test_grad_check_small_architecture_full_sweep():
    m = cnn.NetworkModel(SMALL_ARCH, (8, 12), seed=4)
    worst, idx = cnn.grad_check(m, np.random.default_rng(4).normal(size=(8, 12)), n_weights=m.n_weights)
    assert worst < 1e-4 and len(idx) > 0.8 * m.n_weights


# -- r2 --------------------------------------------------------------------------------

def test_r2_examples():
    t = np.array([[1.0, 5.0], [2.0, 6.0], [3.0, 9.0]])
    assert np.allclose(cnn.r2_score(t, t), 1.0)
    mean = np.broadcast_to(t.mean(0), t.shape)
    assert np.allclose(cnn.r2_score(mean, t), 0.0)
    r2 = cnn.r2_score([1.1, 2.0, 2.9], [1.0, 2.0, 3.0])
    assert r2[0] == pytest.approx(0.99, abs=1e-12)


def test_r2_errors():
    with pytest.raises(UndefinedMetricError):
        cnn.r2_score([[1.0], [2.0]], [[1.0], [1.0]])
    with pytest.raises(ShapeError):
        cnn.r2_score([[1.0]], [[1.0]])


def test_r2_can_be_negative():
    assert cnn.r2_score([3.0, 2.0, 1.0], [1.0, 2.0, 3.0])[0] == pytest.approx(-3.0)


# -- training -----------------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        cnn.TrainConfig(patience=10, max_epochs=10)
    with pytest.raises(ConfigError):
        cnn.TrainConfig(learning_rate=0)


def test_memorizes_single_sample(noisy_plant):
    one = dataset.generate(1, 5, noisy_plant)
    reps = dataset.Dataset(np.repeat(one.powers, 10, 0), np.repeat(one.profiles, 10, 0),
                           one.freq_grid, one.z_grid, 0, {})
    reps.split = {"train": np.arange(10), "test": np.arange(10), "val": np.arange(10)}
    # identical samples make every Adam step coherent; 1e-3 overshoots into sigmoid saturation
    tc = cnn.TrainConfig(learning_rate=1e-4, max_epochs=200, patience=199, batch_size=10)
    m, hist = cnn.train(cnn.NetworkModel(seed=0), reps, tc)
    assert min(h["train_loss"] for h in hist) < 1e-4


def test_training_is_seeded_and_keeps_best():
    ds = _tiny_ds()
    tc = cnn.TrainConfig(max_epochs=15, patience=5, seed=3)
    a, ha = cnn.train(cnn.NetworkModel(SMALL_ARCH, (8, 12), seed=1), ds, tc)
    b, hb = cnn.train(cnn.NetworkModel(SMALL_ARCH, (8, 12), seed=1), ds, tc)
    assert np.array_equal(a.weights, b.weights) and ha == hb
    best = [h["best_val_loss"] for h in ha]
    assert all(x >= y for x, y in zip(best, best[1:]))
    # returned weights are the best-validation ones
    xv = a.normalize(ds.profiles[ds.split["val"]])
    yv = a.normalize_powers(ds.powers[ds.split["val"]])
    assert a.loss(xv, yv) == pytest.approx(best[-1], rel=1e-12)


def test_training_learns_tiny_problem():
    # profiles linear in the powers: the network must beat the mean predictor by far
    ds = _tiny_ds(400, seed=5, holdout=50)
    arch = [dict(s) for s in SMALL_ARCH]
    arch[0]["filters"], arch[4]["units"] = 8, 32
    m, hist = cnn.train(cnn.NetworkModel(arch, (8, 12), seed=0), ds,
                        cnn.TrainConfig(max_epochs=200, patience=30, learning_rate=3e-3))
    te, tr = ds.split["test"], ds.split["train"]
    baseline = np.mean(np.abs(ds.powers[te] - ds.powers[tr].mean(0)))
    assert hist[-1]["best_val_loss"] < hist[0]["val_loss"] / 5
    assert np.mean(np.abs(m.predict(ds.profiles[te]) - ds.powers[te])) < baseline / 4


def test_divergence_error():
    ds = _tiny_ds()
    ds.profiles[ds.split["train"][3], 0, 0] = np.inf
    with pytest.raises(DivergenceError) as err:
        cnn.train(cnn.NetworkModel(SMALL_ARCH, (8, 12)), ds, cnn.TrainConfig(max_epochs=5, patience=2))
    assert err.value.epoch == 0


def test_train_needs_val():
    ds = _tiny_ds()
    ds.split["val"] = np.zeros(0, int)
    with pytest.raises(ConfigError):
        cnn.train(cnn.NetworkModel(SMALL_ARCH, (8, 12)), ds, cnn.TrainConfig(max_epochs=5, patience=2))


# -- evaluation -------------------------------------------------------------------------------

class _Oracle:
    """Stands in for a perfect inverse model: looks the truth up by profile."""

    def __init__(self, ds):
        self.table = {ds.profiles[i].tobytes(): ds.powers[i] for i in range(len(ds))}

    def predict(self, profiles):
        return np.array([self.table[p.tobytes()] for p in profiles])


def test_perfect_model_on_noiseless_plant(clean_plant):
    ds = dataset.split(dataset.generate(12, 3, clean_plant, noisy=False), (6, 4, 2), 0)
    rep = cnn.evaluate(_Oracle(ds), ds, clean_plant)
    assert np.all(rep.mae < 0.01)
    assert np.allclose(rep.r2, 1.0)
    assert rep.mu == pytest.approx(np.mean(rep.mae), abs=1e-12)
    assert rep.sigma == pytest.approx(np.std(rep.mae), abs=1e-12)


def test_evaluate_independent_of_workers(noisy_plant):
    ds = dataset.split(dataset.generate(12, 3, noisy_plant), (6, 4, 2), 0)
    m = cnn.NetworkModel(seed=0)
    m.fit_normalization(ds.profiles)
    a = cnn.evaluate(m, ds, noisy_plant, seed=1, workers=1)
    b = cnn.evaluate(m, ds, noisy_plant, seed=1, workers=4)
    assert np.array_equal(a.mae, b.mae)
    assert np.all(a.mae >= 0)


# -- checkpoints --------------------------------------------------------------------------------

def test_checkpoint_roundtrip(model, tmp_path):
    cnn.save(model, tmp_path / "m.rnn")
    back = cnn.load(tmp_path / "m.rnn", architecture=cnn.DEFAULT_ARCHITECTURE)
    assert np.array_equal(back.weights, model.weights)
    assert back.input_norm == model.input_norm
    assert cnn.to_bytes(back) == cnn.to_bytes(model)
    data = cnn.to_bytes(model)
    assert data[:4] == b"RNN1"
    assert data[-8 * model.n_weights:] == model.weights.astype("<f8").tobytes()


def test_checkpoint_errors(model):
    data = cnn.to_bytes(model)
    with pytest.raises(FormatError):
        cnn.from_bytes(b"XNN1" + data[4:])
    with pytest.raises(CorruptionError):
        cnn.from_bytes(data[:-1])
    with pytest.raises(ShapeError):
        cnn.from_bytes(data, architecture=SMALL_ARCH)
