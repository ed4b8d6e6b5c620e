"""Physics-guided abnormality regressor.

A small ReLU multilayer perceptron, written directly in NumPy, maps the
flattened received-measurement matrices to the fused abnormality
``T_pr``.  Training labels come from the analytic consensus rates, so the
network learns the secondary-control physics rather than attack labels.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .comm import AttackSpec, ReceivedMatrix, TreeSet, route
from .errors import DataError, DivergenceError, ShapeError
from .grid import GridConfig
from .secondary import ControllerGains, compute_tpr, consensus_rates

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"


def n_features(n: int) -> int:
    return 3 * n * n + 1


def featurize(received: ReceivedMatrix) -> np.ndarray:
    """Row-major [omega | P | Q | leader_ref] vector of length 3n^2 + 1."""
    return np.concatenate([received.omega.ravel(), received.p.ravel(), received.q.ravel(),
                           [received.leader_ref]])


def featurize_batch(r: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """(T, 3, n, n) routed values plus (T,) references -> (T, 3n^2 + 1)."""
    T = r.shape[0]
    return np.concatenate([r.reshape(T, -1), np.asarray(refs, float).reshape(T, 1)], axis=1)


def defeaturize(x: np.ndarray) -> ReceivedMatrix:
    n = int(round(np.sqrt((len(x) - 1) / 3)))
    if n_features(n) != len(x):
        raise ShapeError(f"feature length {len(x)} is not 3n^2 + 1")
    m = np.asarray(x[:-1]).reshape(3, n, n)
    return ReceivedMatrix(m[0].copy(), m[1].copy(), m[2].copy(), float(x[-1]))


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class MLPConfig:
    layers: int = 5  # input + hidden + output
    width: int = 10
    learning_rate: float = 1e-3
    max_epochs: int = 5000
    patience: int = 50
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.layers < 3:
            raise ValueError("need at least one hidden layer")


class MLPParams:
    """Weights stored in one flat vector; ``weights``/``biases`` are views.

    Standardization statistics for inputs and target travel with the
    parameters so that :meth:`predict` works on raw feature rows.
    """

    def __init__(self, sizes: Sequence[int], flat: np.ndarray | None = None,
                 x_mean=None, x_std=None, y_mean=0.0, y_std=1.0):
        self.sizes = tuple(int(s) for s in sizes)
        count = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        self.flat = np.zeros(count) if flat is None else np.asarray(flat, float).copy()
        if self.flat.shape != (count,):
            raise ShapeError(f"expected {count} parameters, got {self.flat.shape}")
        self.weights, self.biases = _views(self.flat, self.sizes)
        d = self.sizes[0]
        self.x_mean = np.zeros(d) if x_mean is None else np.asarray(x_mean, float)
        self.x_std = np.ones(d) if x_std is None else np.asarray(x_std, float)
        self.y_mean = float(y_mean)
        self.y_std = float(y_std)

    @classmethod
    def init(cls, n_in: int, config: MLPConfig, rng: np.random.Generator) -> "MLPParams":
        sizes = [n_in] + [config.width] * (config.layers - 2) + [1]
        p = cls(sizes)
        for w in p.weights:
            w[...] = rng.normal(0.0, np.sqrt(2.0 / w.shape[0]), size=w.shape)
        return p

    def copy(self) -> "MLPParams":
        return MLPParams(self.sizes, self.flat, self.x_mean, self.x_std, self.y_mean, self.y_std)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected {self.sizes[0]} features, got {x.shape[1]}")
        z = (x - self.x_mean) / self.x_std
        return forward_raw(self, z) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.sizes), "weights": self.flat.tolist(),
                "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPParams":
        return cls(d["layer_sizes"], np.array(d["weights"]), d["x_mean"], d["x_std"],
                   d["y_mean"], d["y_std"])


def _views(flat, sizes):
    ws, bs, k = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(flat[k:k + a * b].reshape(a, b))
        k += a * b
        bs.append(flat[k:k + b])
        k += b
    return ws, bs


def _forward_cache(params: MLPParams, z: np.ndarray):
    acts = [z]
    h = z
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward_raw(params: MLPParams, z: np.ndarray) -> np.ndarray:
    """Network output on already standardized inputs, shape (rows,)."""
    return _forward_cache(params, z)[-1][:, 0]


def forward(params: MLPParams, x) -> float | np.ndarray:
    """Abnormality estimate for one raw feature vector (or a batch of rows)."""
    x = np.asarray(x, float)
    out = params.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def loss_and_grad(params: MLPParams, z: np.ndarray, y: np.ndarray):
    """Mean squared error on standardized units and its flat gradient."""
    acts = _forward_cache(params, z)
    out = acts[-1][:, 0]
    err = out - y
    loss = float(np.mean(err * err))
    grad = np.empty_like(params.flat)
    gw, gb = _views(grad, params.sizes)
    delta = (2.0 / len(y)) * err[:, None]
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i][...] = acts[i].T @ delta
        gb[i][...] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(flat: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    attacked: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.y = np.asarray(self.y, float)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DataError("feature rows and targets must have equal counts")
        if self.attacked is None:
            self.attacked = np.zeros(len(self.y), dtype=bool)
        self.attacked = np.asarray(self.attacked, dtype=bool)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.attacked[idx], dict(self.meta))

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite entries")

    def to_csv(self, path) -> None:
        path = str(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(self.x.shape[1])] + ["target"])
            for row, t in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(t))])
        meta = dict(self.meta, attack_rows=np.flatnonzero(self.attacked).tolist(),
                    generator_version=GENERATOR_VERSION)
        with open(_sidecar(path), "w") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        path = str(path)
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        try:
            with open(_sidecar(path)) as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        attacked = np.zeros(len(raw), dtype=bool)
        attacked[meta.pop("attack_rows", [])] = True
        return cls(raw[:, :-1], raw[:, -1], attacked, meta)


def _sidecar(path: str) -> str:
    return (path[:-4] if path.endswith(".csv") else path) + ".json"


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = float("inf")
    seed: int = 0

    def __post_init__(self):
        if not self.snr_db > 0:
            raise ValueError("snr_db must be positive or infinite")


def noise_std(column: np.ndarray, snr_db: float) -> float:
    p_signal = float(np.mean(np.square(column)))
    return float(np.sqrt(p_signal / 10 ** (snr_db / 10)))


def add_noise(data: Dataset, spec: NoiseSpec) -> Dataset:
    """Gaussian noise per feature column at the requested SNR; targets stay clean."""
    if np.isinf(spec.snr_db):
        return data
    rng = np.random.default_rng(spec.seed)
    p_signal = np.mean(np.square(data.x), axis=0)
    std = np.sqrt(p_signal / 10 ** (spec.snr_db / 10))
    x = data.x + rng.standard_normal(data.x.shape) * std
    return Dataset(x, data.y.copy(), data.attacked.copy(), dict(data.meta, snr_db=spec.snr_db))


class Splits(NamedTuple):
    train: Dataset
    validation: Dataset
    test: Dataset


def split(data: Dataset, seed: int = 0) -> Splits:
    """Random 64/16/20 partition (80/20 test split, then 80/20 train/validation)."""
    n = len(data)
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(0.2 * n))
    n_val = int(round(0.2 * (n - n_test)))
    test = perm[:n_test]
    val = perm[n_test:n_test + n_val]
    train = perm[n_test + n_val:]
    return Splits(data.subset(np.sort(train)), data.subset(np.sort(val)),
                  data.subset(np.sort(test)))


# ---------------------------------------------------------------------------
# training and evaluation


class Metrics(NamedTuple):
    mae: float
    mse: float
    rmse: float


def metrics(pred: np.ndarray, target: np.ndarray) -> Metrics:
    err = np.abs(np.asarray(pred, float) - np.asarray(target, float))
    # scale before squaring so tiny errors do not underflow to a zero RMSE
    scale = float(err.max()) if err.size else 0.0
    rmse = scale * float(np.sqrt(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    return Metrics(float(np.mean(err)), rmse * rmse, rmse)


def evaluate(params: MLPParams, data: Dataset) -> Metrics:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty split")
    return metrics(params.predict(data.x), data.y)


@dataclass
class TrainReport:
    epochs_run: int
    stopped_early: bool
    best_epoch: int
    best_val_loss: float
    train: Metrics
    validation: Metrics
    test: Metrics | None
    target_std: float
    wall_time: float
    history: list = field(default_factory=list, repr=False)

    def normalized_mae(self, split_name="test") -> float:
        return getattr(self, split_name).mae / self.target_std

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("train", "validation", "test"):
            m = getattr(self, k)
            d[k] = None if m is None else m._asdict()
        d.pop("history")
        return d


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def train(splits: Splits, config: MLPConfig = MLPConfig(), val_loss_hook=None):
    """Minibatch Adam on MSE with early stopping; returns the best-validation weights.

    ``val_loss_hook(epoch, loss)`` may replace the validation loss, which
    the tests use to freeze it.
    """
    t0 = time.perf_counter()
    tr, va = splits.train, splits.validation
    rng = np.random.default_rng(config.seed)
    x_mean, x_std = _standardizer(tr.x)
    y_mean = float(tr.y.mean())
    y_std = float(tr.y.std()) or 1.0
    params = MLPParams.init(tr.x.shape[1], config, rng)
    params.x_mean, params.x_std, params.y_mean, params.y_std = x_mean, x_std, y_mean, y_std
    z_tr = (tr.x - x_mean) / x_std
    y_tr = (tr.y - y_mean) / y_std
    z_va = (va.x - x_mean) / x_std
    y_va = (va.y - y_mean) / y_std

    adam = AdamState(np.zeros_like(params.flat), np.zeros_like(params.flat))
    best_loss, best_flat, best_epoch = np.inf, params.flat.copy(), 0
    wait, stopped, epoch = 0, False, 0
    history = []
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(y_tr))
        for start in range(0, len(perm), bs):
            idx = perm[start:start + bs]
            loss, grad = loss_and_grad(params, z_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch)
            adam_step(params.flat, grad, adam, config.learning_rate)
        err = forward_raw(params, z_va) - y_va
        val_loss = float(np.mean(err * err))
        if val_loss_hook is not None:
            val_loss = val_loss_hook(epoch, val_loss)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}", epoch)
        history.append(val_loss)
        if val_loss < best_loss:
            best_loss, best_flat, best_epoch, wait = val_loss, params.flat.copy(), epoch, 0
        else:
            wait += 1
            if wait > config.patience:
                stopped = True
                break
    params.flat[...] = best_flat
    report = TrainReport(
        epochs_run=epoch, stopped_early=stopped, best_epoch=best_epoch, best_val_loss=best_loss,
        train=evaluate(params, tr), validation=evaluate(params, va),
        test=evaluate(params, splits.test) if len(splits.test) else None,
        target_std=y_std, wall_time=time.perf_counter() - t0, history=history)
    log.info("trained %d epochs (best %d), val loss %.3g", epoch, best_epoch, best_loss)
    return params, report


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class ScenarioSampler:
    """Randomized synchronized operating points with optional attacks.

    Loads are drawn within ``load_spread`` of the base configuration; the
    measurements are the synchronized steady state the secondary layer
    converges to (nominal frequency, droop-proportional sharing).  A
    ``jitter_prob`` share of rows is displaced from synchronism by Gaussian
    frequency and relative power offsets, the size of the small transients
    seen right after a topology switch.  Attack magnitudes are drawn per
    channel from the given ranges with a random common sign.
    """

    config: GridConfig
    trees: TreeSet
    links: Sequence[tuple]
    gains: ControllerGains = ControllerGains()
    attack_prob: float = 0.5
    load_spread: float = 0.3
    omega_range: tuple = (0.2, 1.5)
    p_range: tuple = (500.0, 3000.0)
    q_range: tuple = (200.0, 1000.0)
    jitter_prob: float = 0.5
    omega_jitter: float = 0.01  # Hz
    power_jitter: float = 0.005  # relative

    def operating_point(self, rng):
        c = self.config
        lp = c.load_p * rng.uniform(1 - self.load_spread, 1 + self.load_spread, c.n)
        lq = c.load_q * rng.uniform(1 - self.load_spread, 1 + self.load_spread, c.n)
        wp, wq = 1.0 / c.d_p, 1.0 / c.d_q
        omega = np.full(c.n, c.omega_ref)
        p, q = lp.sum() * wp / wp.sum(), lq.sum() * wq / wq.sum()
        if rng.random() < self.jitter_prob:
            omega = omega + self.omega_jitter * rng.standard_normal(c.n)
            p = p * (1 + self.power_jitter * rng.standard_normal(c.n))
            q = q * (1 + self.power_jitter * rng.standard_normal(c.n))
        return omega, p, q

    def draw_attacks(self, rng) -> list[AttackSpec]:
        n = self.config.n
        sign = 1.0 if rng.random() < 0.5 else -1.0
        mag = sign * np.array([rng.uniform(*self.omega_range), rng.uniform(*self.p_range),
                               rng.uniform(*self.q_range)])
        if rng.random() < 0.5:
            k = rng.integers(1, n)
            return [AttackSpec("FDI", int(v), 0.0, mag) for v in rng.choice(n, k, replace=False)]
        links = sorted(self.links)
        k = rng.integers(1, min(len(links), n - 1) + 1)
        picks = rng.choice(len(links), k, replace=False)
        return [AttackSpec("MITM", links[i], 0.0, mag) for i in sorted(picks)]

    def sample(self, rng):
        meas = self.operating_point(rng)
        tree = self.trees[int(rng.integers(len(self.trees)))]
        attacks = self.draw_attacks(rng) if rng.random() < self.attack_prob else []
        return meas, tree, attacks


def label(received: ReceivedMatrix, tree, gains: ControllerGains, config: GridConfig) -> float:
    return compute_tpr(consensus_rates(received, tree, gains.for_tree(tree), config.droop))


def generate_dataset(sampler: ScenarioSampler, size: int, seed: int = 0) -> Dataset:
    """Draw ``size`` labelled rows; non-finite rows are skipped and logged."""
    rng = np.random.default_rng(seed)
    c = sampler.config
    xs, ys, flags = [], [], []
    skipped = 0
    attempts = 0
    while len(ys) < size:
        attempts += 1
        meas, tree, attacks = sampler.sample(rng)
        rec = route(meas, tree, attacks, 0.0, leader_ref=c.omega_ref)
        x = featurize(rec)
        y = label(rec, tree, sampler.gains, c)
        if not (np.all(np.isfinite(x)) and np.isfinite(y)):
            skipped += 1
            log.warning("skipping non-finite row %d", attempts)
            if skipped > 0.01 * size + 1:
                raise DataError(f"dataset yield fell below 99% ({skipped} rows skipped)")
            continue
        xs.append(x)
        ys.append(y)
        flags.append(bool(attacks))
    meta = {"seed": seed, "n": c.n, "snr_db": "inf", "attack_prob": sampler.attack_prob,
            "skipped": skipped, "generator_version": GENERATOR_VERSION}
    return Dataset(np.array(xs), np.array(ys), np.array(flags), meta)


# ---------------------------------------------------------------------------
# persistence


def save_model(path, params: MLPParams, **extra) -> None:
    doc = params.to_dict()
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> tuple[MLPParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    params = MLPParams.from_dict(doc)
    extra = {k: v for k, v in doc.items() if k not in params.to_dict()}
    return params, extra
