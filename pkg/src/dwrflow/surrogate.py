"""
Per-element neural surrogate for the dual solution.

A residual feed-forward network maps 13 per-element features (location,
flow configuration, area, state, residual) to the four dual components.
Forward and reverse passes, Adam and k-fold cross-validation are written
directly in numpy.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dual import DualField
from .parallel import get_engine

log = logging.getLogger(__name__)

FEATURES = ("x", "y", "mach", "alpha", "area", "u0", "u1", "u2", "u3", "r0", "r1", "r2", "r3")
TARGETS = ("z0", "z1", "z2", "z3")
HEADER = FEATURES + TARGETS
MAGIC = "DWRSURROGATE v1"
LEAKY_SLOPE = 0.01


class SchemaError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------- features
def extract_features(mesh, u, R, cfg):
    """Feature rows ``(x, y, Ma, alpha[deg], area, u0..u3, r0..r3)``."""
    u = np.asarray(u, dtype=float)
    R = np.asarray(R, dtype=float)
    n = mesh.n_active
    if u.shape != (n, 4) or R.shape != (n, 4):
        raise ValueError(f"expected state and residual of shape ({n}, 4), got {u.shape} and {R.shape}")
    X = np.empty((n, len(FEATURES)))
    X[:, 0:2] = mesh.barycenter
    X[:, 2] = cfg.mach
    X[:, 3] = cfg.alpha
    X[:, 4] = mesh.area
    X[:, 5:9] = u
    X[:, 9:13] = R
    return X


def build_dataset(runs, path):
    """Write ``runs = [(mesh, u, R, z, cfg), ...]`` as one CSV training set.

    The first line is a ``#`` comment naming each source run.
    """
    blocks, sources = [], []
    for k, (mesh, u, R, z, cfg) in enumerate(runs):
        X = extract_features(mesh, u, R, cfg)
        z = np.asarray(z.z if isinstance(z, DualField) else z, dtype=float)
        if z.shape != (mesh.n_active, 4):
            raise ValueError(f"run {k}: dual field has shape {z.shape}, expected ({mesh.n_active}, 4)")
        blocks.append(np.hstack([X, z]))
        sources.append(f"run{k}:mach={cfg.mach!r},alpha={cfg.alpha!r},elements={mesh.n_active},"
                       f"mesh={mesh.checksum()}")
    data = np.vstack(blocks) if blocks else np.empty((0, len(HEADER)))
    if data.shape[1] != len(HEADER):
        raise ValueError(f"dataset has {data.shape[1]} columns, expected {len(HEADER)}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# sources: " + "; ".join(sources) + "\n")
        w = csv.writer(fh)
        w.writerow(HEADER)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    return path


def load_dataset(path):
    """Return ``(features, targets, sources)`` from a dataset CSV."""
    sources = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            sources.append(ln[1:].strip())
        elif ln.strip():
            body.append(ln)
    rows = list(csv.reader(body))
    if not rows or tuple(rows[0]) != HEADER:
        raise SchemaError(f"{path}: header must be {','.join(HEADER)}")
    bad = [i for i, r in enumerate(rows[1:], start=2) if len(r) != len(HEADER)]
    if bad:
        raise SchemaError(f"{path}: row {bad[0]} has the wrong number of columns")
    data = np.array(rows[1:], dtype=float).reshape(-1, len(HEADER))
    return data[:, :13], data[:, 13:], sources


def target_statistics(z):
    a = np.abs(np.asarray(z, dtype=float))
    return {"max_abs": float(a.max()), "median_abs": float(np.median(a)),
            "fraction_below_0.01": float(np.mean(a < 0.01))}


# ---------------------------------------------------------------- model
def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


@dataclass
class SurrogateModel:
    """Residual MLP: ``len(hidden)`` ELU layers and a linear 4-output head.

    Layer ``i >= 2`` with ``i`` even adds the activation of layer ``i - 2``
    (an identity skip over a two-layer block) when the widths match.
    """

    mean: np.ndarray
    std: np.ndarray
    weights: list
    biases: list
    dropout: float = 0.1
    zero_variance: tuple = ()

    @property
    def hidden(self):
        return [w.shape[1] for w in self.weights[:-1]]

    @property
    def layers(self):
        return len(self.weights)

    def skip(self, i):
        return i >= 2 and i % 2 == 0 and self.weights[i].shape[1] == self.weights[i - 2].shape[1]

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self):
        return SurrogateModel(self.mean.copy(), self.std.copy(), [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.dropout, tuple(self.zero_variance))

    def __call__(self, features):
        return forward(self, features, training=False)


def init_weights(hidden=(128, 128, 128, 128), seed=0, n_in=13, n_out=4, dropout=0.1):
    """He-normal weights for a leaky-ReLU gain (slope 0.01); zero biases."""
    rng = np.random.default_rng(seed)
    dims = [n_in, *hidden, n_out]
    W, b = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
        W.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    return SurrogateModel(np.zeros(n_in), np.ones(n_in), W, b, dropout)


def set_normalization(model, X):
    X = np.asarray(X, dtype=float)
    model.mean = X.mean(axis=0)
    std = X.std(axis=0)
    zero = np.nonzero(~(std > 1e-12 * np.maximum(np.abs(model.mean), 1.0)))[0]
    std[zero] = 1.0
    model.std = std
    model.zero_variance = tuple(FEATURES[i] if len(std) == len(FEATURES) else str(i) for i in zero)
    return model


def _check_features(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.mean):
        raise SchemaError(f"model expects {len(model.mean)} features ({', '.join(FEATURES)}), "
                          f"got {X.shape[1]}")
    return X


def _forward(model, X, training=False, rng=None):
    x = (X - model.mean) / model.std
    cache = {"a": [x], "pre": [], "mask": []}
    a = x
    L = model.layers
    for i in range(L - 1):
        h = a @ model.weights[i] + model.biases[i]
        act = elu(h)
        if model.skip(i):
            act = act + cache["a"][i - 1]
        mask = None
        if training and model.dropout > 0:
            keep = 1.0 - model.dropout
            mask = (rng.random(act.shape) < keep) / keep
            act = act * mask
        if not np.all(np.isfinite(act)):
            raise NonFiniteError(f"non-finite activation in hidden layer {i}")
        cache["pre"].append(h)
        cache["mask"].append(mask)
        cache["a"].append(act)
        a = act
    out = a @ model.weights[-1] + model.biases[-1]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite value in output heads")
    return out, cache


def forward(model, features, training=False, rng=None):
    """Predict duals for one feature vector ``(13,)`` or a batch ``(n, 13)``."""
    X = _check_features(model, features)
    if training and rng is None:
        rng = np.random.default_rng()
    out, _ = _forward(model, X, training, rng)
    return out[0] if np.ndim(features) == 1 else out


def loss(pred, target, loss_epsilon=1e-6):
    """Summed relative error ``sum_i |p_i - t_i| / (|t_i| + eps)`` (per row for batches)."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    return np.sum(np.abs(p - t) / (np.abs(t) + loss_epsilon), axis=-1)


def loss_and_grad(model, X, T, loss_epsilon=1e-6, training=False, rng=None):
    """Mean loss over rows and its gradient for every parameter, by reverse accumulation."""
    X = _check_features(model, X)
    out, cache = _forward(model, X, training, rng)
    n = len(X)
    w = 1.0 / (np.abs(T) + loss_epsilon)
    value = float(np.sum(np.abs(out - T) * w) / n)
    g = np.sign(out - T) * w / n
    L = model.layers
    gW = [None] * L
    gb = [None] * L
    gW[-1] = cache["a"][-1].T @ g
    gb[-1] = g.sum(axis=0)
    ga = g @ model.weights[-1].T
    skip_grad = [None] * (L + 1)
    for i in range(L - 2, -1, -1):
        if skip_grad[i + 1] is not None:
            ga = ga + skip_grad[i + 1]
        if cache["mask"][i] is not None:
            ga = ga * cache["mask"][i]
        if model.skip(i):
            skip_grad[i - 1] = ga if skip_grad[i - 1] is None else skip_grad[i - 1] + ga
        gh = ga * elu_grad(cache["pre"][i])
        gW[i] = cache["a"][i].T @ gh
        gb[i] = gh.sum(axis=0)
        ga = gh @ model.weights[i].T
    return value, gW, gb


# ---------------------------------------------------------------- training
@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 50
    k_folds: int = 5
    dropout: float = 0.1
    loss_epsilon: float = 1e-6
    seed: int = 0
    hidden: tuple = (128, 128, 128, 128)
    lr_final: float = 1.0

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        for name in ("learning_rate", "eps", "batch_size", "epochs", "loss_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class Adam:
    """Adam with an optional cosine decay of the step to ``lr_final`` times its start value."""

    def __init__(self, params, cfg, total_steps=None):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.total = total_steps

    def rate(self):
        c = self.cfg
        if not self.total or c.lr_final == 1.0:
            return c.learning_rate
        frac = min(self.t / self.total, 1.0)
        return c.learning_rate * (c.lr_final + (1.0 - c.lr_final) * 0.5 * (1.0 + np.cos(np.pi * frac)))

    def step(self, params, grads):
        c = self.cfg
        lr = self.rate()
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


@dataclass
class FoldReport:
    fold: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    status: str = "ok"


def _fit(model, X, T, cfg, rng, Xval=None, Tval=None, report=None):
    n = len(X)
    opt = Adam(model.parameters(), cfg, cfg.epochs * -(-n // cfg.batch_size))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            value, gW, gb = loss_and_grad(model, X[idx], T[idx], cfg.loss_epsilon, training=True, rng=rng)
            if not np.isfinite(value):
                raise NonFiniteError(f"loss became non-finite in epoch {epoch}")
            opt.step(model.parameters(), [g for pair in zip(gW, gb) for g in pair])
            total += value * len(idx)
        if report is not None:
            report.train_loss.append(total / n)
            if Xval is not None:
                report.val_loss.append(float(np.mean(loss(forward(model, Xval), Tval, cfg.loss_epsilon))))
    return model


def train(dataset, cfg=None):
    """k-fold cross-validation, then a final fit on all rows.

    ``dataset`` is a path or a ``(features, targets)`` pair.  Returns
    ``(model, fold_reports)``.
    """
    cfg = cfg or TrainConfig()
    if isinstance(dataset, (str, os.PathLike)):
        X, T, _ = load_dataset(dataset)
    else:
        X, T = (np.asarray(a, dtype=float) for a in dataset)
    if len(X) < cfg.k_folds * cfg.batch_size:
        raise ValueError(f"dataset has {len(X)} rows; need at least k_folds * batch_size = "
                         f"{cfg.k_folds * cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    folds = np.array_split(rng.permutation(len(X)), cfg.k_folds)
    reports = []
    for k, val in enumerate(folds):
        tr = np.concatenate([f for j, f in enumerate(folds) if j != k])
        rep = FoldReport(k)
        model = set_normalization(init_weights(cfg.hidden, cfg.seed + k + 1, dropout=cfg.dropout), X[tr])
        try:
            _fit(model, X[tr], T[tr], cfg, np.random.default_rng(cfg.seed + 100 + k), X[val], T[val], rep)
        except NonFiniteError as err:
            rep.status = f"diverged: {err}"
            log.warning("fold %d aborted: %s", k, err)
        reports.append(rep)
    model = set_normalization(init_weights(cfg.hidden, cfg.seed, dropout=cfg.dropout), X)
    final = FoldReport(-1)
    _fit(model, X, T, cfg, np.random.default_rng(cfg.seed + 99), report=final)
    reports.append(final)
    if model.zero_variance:
        log.info("features with zero variance (std set to 1): %s", ", ".join(model.zero_variance))
    return model, reports


# ---------------------------------------------------------------- files
def _fmt(a):
    return " ".join(f"{v:.17g}" for v in np.ravel(a))


def save_model(model, path):
    lines = [MAGIC,
             f"features {len(model.mean)} {','.join(FEATURES)}",
             f"outputs {model.weights[-1].shape[1]}",
             f"layers {model.layers}",
             f"dropout {model.dropout!r}",
             f"zero_variance {','.join(model.zero_variance) or '-'}",
             f"mean {_fmt(model.mean)}",
             f"std {_fmt(model.std)}"]
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"layer {i} {W.shape[0]} {W.shape[1]}")
        lines.extend("W " + _fmt(row) for row in W)
        lines.append("b " + _fmt(b))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_model(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    it = iter(enumerate(lines, start=1))

    def take(key):
        for lineno, ln in it:
            if ln.strip():
                tok = ln.split(" ", 1)
                if tok[0] != key:
                    raise SchemaError(f"{path}:{lineno}: expected '{key}', found {tok[0]!r}")
                return tok[1] if len(tok) > 1 else ""
        raise SchemaError(f"{path}: file ends before '{key}' (truncated?)")

    try:
        first = next(it)[1].strip()
    except StopIteration:
        first = ""
    if first != MAGIC:
        raise SchemaError(f"{path}: not a surrogate model file (expected '{MAGIC}', found {first[:40]!r})")
    nf, names = take("features").split()
    if int(nf) != len(FEATURES) or tuple(names.split(",")) != FEATURES:
        raise SchemaError(f"{path}: feature layout {names} does not match expected {','.join(FEATURES)}")
    n_out = int(take("outputs"))
    n_layers = int(take("layers"))
    dropout = float(take("dropout"))
    zv = take("zero_variance")
    zero_variance = () if zv == "-" else tuple(zv.split(","))
    mean = np.array(take("mean").split(), dtype=float)
    std = np.array(take("std").split(), dtype=float)
    W, b = [], []
    prev = len(FEATURES)
    for i in range(n_layers):
        idx, rows, cols = (int(v) for v in take("layer").split())
        if idx != i or rows != prev:
            raise SchemaError(f"{path}: layer {i} has shape ({rows}, {cols}); expected {prev} inputs")
        Wi = np.array([take("W").split() for _ in range(rows)], dtype=float)
        bi = np.array(take("b").split(), dtype=float)
        if Wi.shape != (rows, cols) or bi.shape != (cols,):
            raise SchemaError(f"{path}: layer {i} data does not match its declared shape")
        W.append(Wi)
        b.append(bi)
        prev = cols
    if prev != n_out:
        raise SchemaError(f"{path}: last layer has {prev} outputs, header says {n_out}")
    take("end")
    if len(mean) != len(FEATURES) or len(std) != len(FEATURES):
        raise SchemaError(f"{path}: normalization vectors must have {len(FEATURES)} entries")
    return SurrogateModel(mean, std, W, b, dropout, zero_variance)


def zero_model(hidden=(8,)):
    """A model whose every output is exactly zero."""
    m = init_weights(hidden, 0)
    for W in m.weights:
        W[:] = 0.0
    return m


# ---------------------------------------------------------------- inference
def predict(model, X, engine=None):
    """Batch inference in fixed-size element chunks (independent rows)."""
    X = _check_features(model, X)
    out = np.empty((len(X), model.weights[-1].shape[1]))

    def kernel(lo, hi):
        out[lo:hi] = _forward(model, X[lo:hi])[0]

    (engine or get_engine()).run(kernel, len(X))
    return out


def predict_field(model, mesh, u, R, cfg, engine=None):
    t0 = time.perf_counter()
    z = predict(model, extract_features(mesh, u, R, cfg), engine)
    return DualField(z, mesh.stamp, {"seconds": time.perf_counter() - t0, "method": "surrogate"})
