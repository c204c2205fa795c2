"""Convolutional inverse model: 2D power profile -> pump powers.

Plain numpy, float64 throughout, hand-written backprop.  Activations are
kept channels-last ``(batch, height, width, channels)``; the profile enters
as a single channel of shape ``(channels=44, distance=101)``.

All trainable parameters live in one flat vector (``NetworkModel.weights``)
and every layer holds views into it, so the optimizer, checkpoints and the
gradient check all work on a single array.
"""

import json
import logging
import struct
from dataclasses import dataclass, asdict

import numba
import numpy as np

from .errors import (ConfigError, CorruptionError, DivergenceError, FormatError, ShapeError,
                     UndefinedMetricError)
from .seeding import STREAM_EVALUATE, STREAM_TRAIN, child_rng, child_seed
from . import traces

log = logging.getLogger(__name__)

MAGIC = b"RNN1"
VERSION = 1

DEFAULT_ARCHITECTURE = [
    {"type": "conv", "filters": 16, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool", "size": 2},
    {"type": "conv", "filters": 32, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool", "size": 2},
    {"type": "flatten"},
    {"type": "dense", "units": 128},
    {"type": "relu"},
    {"type": "dense", "units": 4},
    {"type": "sigmoid"},
]


# -- layers --------------------------------------------------------------------

@numba.njit(cache=True)
def _im2col(x, k, out):
    """(B, h, w, c) -> rows (B*ho*wo, k*k*c) ordered (ki, kj, c), written into ``out``."""
    B, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    r = 0
    for b in range(B):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for di in range(k):
                    for dj in range(k):
                        for ch in range(c):
                            out[r, q] = x[b, i + di, j + dj, ch]
                            q += 1
                r += 1
    return out


@numba.njit(cache=True)
def _col2im(cols, B, h, w, c, k):
    ho, wo = h - k + 1, w - k + 1
    dx = np.zeros((B, h, w, c))
    r = 0
    for b in range(B):
        for i in range(ho):
            for j in range(wo):
                q = 0
                for di in range(k):
                    for dj in range(k):
                        for ch in range(c):
                            dx[b, i + di, j + dj, ch] += cols[r, q]
                            q += 1
                r += 1
    return dx


class Conv2D:
    """'valid' convolution, stride 1, weights stored as (k*k*c_in, filters)."""

    def __init__(self, in_shape, filters, kernel):
        h, w, c = in_shape
        self.k, self.c, self.f = kernel, c, filters
        self.in_shape = in_shape
        self.out_shape = (h - kernel + 1, w - kernel + 1, filters)
        self.param_shapes = [(kernel * kernel * c, filters), (filters,)]
        self.fan_in = c * kernel * kernel
        self.input_grad = True

    def forward(self, x):
        ho, wo, _ = self.out_shape
        rows = x.shape[0] * ho * wo
        if getattr(self, "_buf", None) is None or self._buf.shape[0] < rows:
            self._buf = np.empty((rows, self.k * self.k * self.c))
        self._cols = self._buf[:rows]
        _im2col(np.ascontiguousarray(x), self.k, self._cols)
        return (self._cols @ self.W + self.b).reshape(x.shape[0], ho, wo, self.f)

    def backward(self, dout):
        d2 = dout.reshape(-1, self.f)
        self.dW[...] = self._cols.T @ d2
        self.db[...] = d2.sum(axis=0)
        if not self.input_grad:
            return None
        h, w, c = self.in_shape
        return _col2im(d2 @ self.W.T, dout.shape[0], h, w, c, self.k)

    def bind(self, params, grads):
        self.W, self.b = params
        self.dW, self.db = grads


class Dense:
    def __init__(self, in_shape, units):
        (d,) = in_shape
        self.out_shape = (units,)
        self.param_shapes = [(d, units), (units,)]
        self.fan_in = d

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW[...] = self._x.T @ dout
        self.db[...] = dout.sum(axis=0)
        return dout @ self.W.T

    def bind(self, params, grads):
        self.W, self.b = params
        self.dW, self.db = grads


class ReLU:
    param_shapes = []

    def __init__(self, in_shape):
        self.out_shape = in_shape

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        dout *= self._mask
        return dout


class Sigmoid:
    param_shapes = []

    def __init__(self, in_shape):
        self.out_shape = in_shape

    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, dout):
        return dout * self._y * (1.0 - self._y)


class MaxPool2D:
    """Non-overlapping 2x2 pooling; a trailing odd row/column is dropped.

    Ties route the gradient to the first maximal element (row-major).
    """

    param_shapes = []

    def __init__(self, in_shape, size):
        if size != 2:
            raise ConfigError("only 2x2 pooling is supported")
        h, w, c = in_shape
        self.in_shape = in_shape
        self.out_shape = (h // 2, w // 2, c)

    def forward(self, x):
        ho, wo, _ = self.out_shape
        q = [x[:, i:2 * ho:2, j:2 * wo:2, :] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        taken = np.zeros(out.shape, dtype=bool)
        self._masks = []
        for part in q:
            m = (part == out) & ~taken
            taken |= m
            self._masks.append(m)
        return out

    def backward(self, dout):
        ho, wo, _ = self.out_shape
        dx = np.zeros((dout.shape[0],) + self.in_shape)
        k = 0
        for i in (0, 1):
            for j in (0, 1):
                dx[:, i:2 * ho:2, j:2 * wo:2, :] = np.where(self._masks[k], dout, 0.0)
                k += 1
        return dx


class Flatten:
    param_shapes = []

    def __init__(self, in_shape):
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape((dout.shape[0],) + self.in_shape)


def _build(spec, in_shape):
    t = spec["type"]
    if t == "conv":
        return Conv2D(in_shape, spec["filters"], spec["kernel"])
    if t == "dense":
        return Dense(in_shape, spec["units"])
    if t == "relu":
        return ReLU(in_shape)
    if t == "sigmoid":
        return Sigmoid(in_shape)
    if t == "maxpool":
        return MaxPool2D(in_shape, spec["size"])
    if t == "flatten":
        return Flatten(in_shape)
    raise ConfigError(f"unknown layer type {t!r}")


# -- model ---------------------------------------------------------------------

class NetworkModel:
    """CNN with a bounded output head: ``sigmoid(.) * p_max``.

    Parameters
    ----------
    architecture : list of dict
        Ordered layer descriptors (see ``DEFAULT_ARCHITECTURE``).
    input_shape : tuple
        ``(channels, distance points)`` of the profiles.
    p_max : array_like
        Per-pump upper bound; scales the sigmoid outputs to watts.
    seed : int
        Seeds the He-normal weight initialisation.
    """

    def __init__(self, architecture=None, input_shape=(44, 101), p_max=(0.3, 0.3, 0.3, 0.3), seed=0):
        self.architecture = [dict(s) for s in (architecture or DEFAULT_ARCHITECTURE)]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.output_scale = np.asarray(p_max, dtype=float)
        self.input_norm = (0.0, 1.0)
        shape = self.input_shape + (1,)
        self.layers = []
        for spec in self.architecture:
            layer = _build(spec, shape)
            self.layers.append(layer)
            shape = layer.out_shape
        if hasattr(self.layers[0], "input_grad"):
            self.layers[0].input_grad = False
        if shape != (self.output_scale.size,):
            raise ConfigError(f"network output {shape} does not match {self.output_scale.size} pumps")
        sizes = [int(np.prod(s)) for layer in self.layers for s in layer.param_shapes]
        self.n_weights = sum(sizes)
        self.weights = np.zeros(self.n_weights)
        self.grads = np.zeros(self.n_weights)
        self.layer_slices = []
        off = 0
        for layer in self.layers:
            params, grads, start = [], [], off
            for s in layer.param_shapes:
                k = int(np.prod(s))
                params.append(self.weights[off:off + k].reshape(s))
                grads.append(self.grads[off:off + k].reshape(s))
                off += k
            if params:
                layer.bind(params, grads)
            self.layer_slices.append(slice(start, off))
        self.init_weights(seed)

    def init_weights(self, seed):
        rng = np.random.default_rng(seed)
        for layer, sl in zip(self.layers, self.layer_slices):
            if sl.stop > sl.start:
                layer.W[...] = rng.standard_normal(layer.W.shape) * np.sqrt(2.0 / layer.fan_in)
                layer.b[...] = 0.0

    # normalization -----------------------------------------------------------
    def fit_normalization(self, profiles):
        profiles = np.asarray(profiles, dtype=float)
        self.input_norm = (float(profiles.mean()), float(profiles.std()))

    def normalize(self, profiles):
        m, s = self.input_norm
        return (np.asarray(profiles, dtype=float) - m) / s

    def denormalize(self, x):
        m, s = self.input_norm
        return np.asarray(x) * s + m

    def normalize_powers(self, powers):
        return np.asarray(powers, dtype=float) / self.output_scale

    def denormalize_powers(self, y):
        return np.asarray(y) * self.output_scale

    # forward / backward ------------------------------------------------------
    def _as_batch(self, profiles):
        if isinstance(profiles, traces.PowerProfile2D):
            profiles = profiles.values
        x = np.asarray(profiles, dtype=float)
        if x.shape == self.input_shape:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"profile shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x

    def forward_normalized(self, x):
        """Sigmoid outputs in [0, 1] for a normalized batch (B, ch, z)."""
        out = x[..., None]
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, dout):
        self.grads[...] = 0.0
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def loss_and_grad(self, x, y):
        """Mean squared error on normalized powers; fills ``self.grads``."""
        out = self.forward_normalized(x)
        diff = out - y
        loss = float(np.mean(diff ** 2))
        self.backward(2.0 * diff / diff.size)
        return loss

    def loss(self, x, y):
        return float(np.mean((self.forward_normalized(x) - y) ** 2))

    def predict(self, profiles, batch_size=256):
        x = self.normalize(self._as_batch(profiles))
        out = np.concatenate([self.forward_normalized(x[i:i + batch_size])
                              for i in range(0, x.shape[0], batch_size)])
        return self.denormalize_powers(np.clip(out, 0.0, 1.0))

    def forward(self, profile):
        """Pump powers in W for a single profile (or a batch)."""
        out = self.predict(profile)
        return out[0] if np.ndim(getattr(profile, "values", profile)) == 2 else out

    def copy(self):
        m = NetworkModel(self.architecture, self.input_shape, self.output_scale, seed=0)
        m.weights[...] = self.weights
        m.input_norm = self.input_norm
        return m


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_metric: str = "mse"

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ConfigError("training hyperparameters must be positive")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.validation_metric != "mse":
            raise ConfigError("only the 'mse' validation metric is supported")

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, w, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(model, ds, tc, callback=None):
    """Fit ``model`` on ``ds``'s train split with Adam, early-stopping on val MSE.

    Returns ``(model, history)``; the model carries the best-validation
    weights and ``history`` is a list of per-epoch dicts.
    """
    tr, va = ds.split["train"], ds.split["val"]
    if len(tr) == 0 or len(va) == 0:
        raise ConfigError("training needs non-empty train and val splits")
    model.fit_normalization(ds.profiles[tr])
    xt, yt = model.normalize(ds.profiles[tr]), model.normalize_powers(ds.powers[tr])
    xv, yv = model.normalize(ds.profiles[va]), model.normalize_powers(ds.powers[va])
    rng = child_rng(tc.seed, 0, STREAM_TRAIN)
    opt = Adam(model.n_weights, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    best_val, best_w, best_epoch, history = np.inf, model.weights.copy(), -1, []
    for epoch in range(tc.max_epochs):
        order = rng.permutation(len(tr))
        total = 0.0
        for i in range(0, len(order), tc.batch_size):
            b = order[i:i + tc.batch_size]
            loss = model.loss_and_grad(xt[b], yt[b])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            opt.step(model.weights, model.grads)
            total += loss * len(b)
        train_loss = total / len(order)
        val_loss = _batched_loss(model, xv, yv)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        if val_loss < best_val:
            best_val, best_w, best_epoch = val_loss, model.weights.copy(), epoch
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "best_val_loss": best_val})
        log.info("epoch %d train %.3e val %.3e", epoch, train_loss, val_loss)
        if callback:
            callback(history[-1])
        if epoch - best_epoch >= tc.patience:
            break
    model.weights[...] = best_w
    return model, history


def _batched_loss(model, x, y, batch_size=256):
    total = 0.0
    for i in range(0, x.shape[0], batch_size):
        out = model.forward_normalized(x[i:i + batch_size])
        total += float(np.sum((out - y[i:i + batch_size]) ** 2))
    return total / y.size


def _switch_state(model):
    """Which ReLU units are active and which pool inputs won, as one bool vector."""
    parts = []
    for layer in model.layers:
        if isinstance(layer, ReLU):
            parts.append(layer._mask.ravel())
        elif isinstance(layer, MaxPool2D):
            parts += [m.ravel() for m in layer._masks]
    return np.concatenate(parts) if parts else np.zeros(0, bool)


def grad_check(model, sample, epsilon=1e-5, n_weights=200, seed=0, target=None):
    """Max relative error between backprop and central finite differences.

    Probes ``n_weights`` weights spread over all parametric layers (weights
    and biases of each, a layer's biases all probed if there are few), stepping ``epsilon`` times the layer's
    weight RMS.  A probe whose step flips a ReLU or max-pool decision is
    not differentiable over the interval; its step is shrunk tenfold (up to
    three times) and otherwise another weight is drawn.  ``sample`` is a
    profile array; the loss is the training MSE against ``target``
    (mid-range powers by default).

    Returns ``(max_relative_error, probed_indices)``.
    """
    x = model.normalize(model._as_batch(sample))
    y = np.full((1, model.output_scale.size), 0.5) if target is None else np.atleast_2d(target)
    model.loss_and_grad(x, y)
    analytic = model.grads.copy()
    base_state = _switch_state(model)
    rng = np.random.default_rng(seed)
    groups = []
    for layer, sl in zip(model.layers, model.layer_slices):
        if sl.stop > sl.start:
            w_size = int(np.prod(layer.param_shapes[0]))
            scale = float(np.sqrt(np.mean(model.weights[sl.start:sl.start + w_size] ** 2))) or 1.0
            groups += [(np.arange(sl.start, sl.start + w_size), scale),
                       (np.arange(sl.start + w_size, sl.stop), scale)]
    # small groups (biases) are probed in full, the remainder spread over the rest
    groups.sort(key=lambda g: g[0].size)
    worst, probed = 0.0, []
    for gi, (candidates, scale) in enumerate(groups):
        per = int(np.ceil((n_weights - len(probed)) / (len(groups) - gi)))
        order = rng.permutation(candidates)
        taken = 0
        for k in order:
            if taken == per:
                break
            w0 = model.weights[k]
            h = epsilon * scale
            for _ in range(4):
                model.weights[k] = w0 + h
                lp = model.loss(x, y)
                ok = np.array_equal(_switch_state(model), base_state)
                model.weights[k] = w0 - h
                lm = model.loss(x, y)
                ok = ok and np.array_equal(_switch_state(model), base_state)
                model.weights[k] = w0
                if ok:
                    break
                h /= 10.0
            if not ok:
                continue
            numeric = (lp - lm) / (2 * h)
            a = analytic[k]
            denom = max(abs(a), abs(numeric), 1e-10)
            worst = max(worst, abs(a - numeric) / denom)
            probed.append(k)
            taken += 1
    return worst, np.array(probed)


# -- metrics -------------------------------------------------------------------

def r2_score(predicted, truth):
    """Per-column coefficient of determination ``1 - SS_res / SS_tot``."""
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.shape[0] < 2:
        raise ShapeError("need equal-length prediction and truth with at least two rows")
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise UndefinedMetricError("truth has zero variance for at least one output")
    return 1.0 - np.sum((t - p) ** 2, axis=0) / ss_tot


@dataclass
class EvalReport:
    r2: np.ndarray
    mae: np.ndarray
    mu: float
    sigma: float
    indices: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray

    def to_dict(self):
        return {"r2": [float(v) for v in self.r2], "mae": [float(v) for v in self.mae],
                "mu": self.mu, "sigma": self.sigma, "indices": [int(i) for i in self.indices]}


def evaluate(model, ds, plant, seed=None, workers=1):
    """R2 on the test split, then plant-verified MAE of each prediction.

    Each predicted setting is applied to ``plant`` with a noise seed derived
    from ``(seed, test index)``; ``seed`` defaults to the dataset master seed.
    """
    idx = ds.split["test"]
    if len(idx) == 0:
        raise ConfigError("test split is empty")
    seed = ds.master_seed if seed is None else seed
    pred = model.predict(ds.profiles[idx])
    truth = ds.powers[idx]
    r2 = r2_score(pred, truth)

    def one(k):
        achieved = plant.apply(pred[k], noise_seed=child_seed(seed, int(idx[k]), STREAM_EVALUATE))
        return traces.mae(ds.profiles[idx[k]], achieved.values)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maes = np.array(list(pool.map(one, range(len(idx)))))
    else:
        maes = np.array([one(k) for k in range(len(idx))])
    return EvalReport(r2=r2, mae=maes, mu=float(np.mean(maes)), sigma=float(np.std(maes)),
                      indices=np.asarray(idx), predicted=pred, truth=truth)


# -- checkpoints -----------------------------------------------------------------
#
# "RNN1" | u16 version | u32 len + JSON header (architecture, input shape,
# input_norm, output_scale, n_weights) | n_weights little-endian f64.

def to_bytes(model):
    head = json.dumps({
        "architecture": model.architecture,
        "input_shape": list(model.input_shape),
        "input_norm": [repr(v) for v in model.input_norm],
        "output_scale": [repr(float(v)) for v in model.output_scale],
        "n_weights": model.n_weights,
    }, sort_keys=True).encode()
    return (MAGIC + struct.pack("<HI", VERSION, len(head)) + head
            + model.weights.astype("<f8").tobytes())


def from_bytes(data, architecture=None):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 10:
        raise CorruptionError("checkpoint truncated in header")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        head = json.loads(data[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from exc
    if architecture is not None and [dict(s) for s in architecture] != head["architecture"]:
        raise ShapeError("checkpoint architecture does not match the requested one")
    model = NetworkModel(head["architecture"], head["input_shape"],
                         [float(v) for v in head["output_scale"]], seed=0)
    if head["n_weights"] != model.n_weights:
        raise ShapeError(f"checkpoint holds {head['n_weights']} weights, architecture needs {model.n_weights}")
    body = data[10 + hlen:]
    if len(body) != 8 * model.n_weights:
        raise CorruptionError(f"checkpoint has {len(body)} weight bytes, expected {8 * model.n_weights}")
    model.weights[...] = np.frombuffer(body, dtype="<f8")
    model.input_norm = tuple(float(v) for v in head["input_norm"])
    return model


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path, architecture=None):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), architecture)
