"""Feed-forward perceptron trained by online back-propagation with momentum.

Hidden units are logistic and the single output unit is linear. Inputs and
the target are min-max scaled with statistics from the training rows, so
the network works in [0, 1] and predictions are mapped back to degrees C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import percent_error
from .weather_data import FeatureVector

N_INPUTS = 8


class TrainingDiverged(RuntimeError):
    """Training loss went non-finite; usually the learning rate is too high."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.3
    momentum: float = 0.6
    epochs: int = 500
    init_range: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.init_range > 0:
            raise ValueError("init_range must be positive")


@dataclass
class MLPNetwork:
    """Weights ``W[l]`` have shape (n_out, n_in); ``velocity_*`` hold the previous updates."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    target_min: float = 0.0
    target_max: float = 1.0
    velocity_w: list[np.ndarray] = field(default_factory=list)
    velocity_b: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise ValueError("layer_sizes must be [n_in, hidden..., 1] with positive sizes")
        if len(sizes) > 4:
            raise ValueError("at most two hidden layers are supported")
        self.layer_sizes = sizes
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise ValueError(f"layer {l} has inconsistent shapes")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        if not self.velocity_w:
            self.velocity_w = [np.zeros_like(w) for w in self.weights]
            self.velocity_b = [np.zeros_like(b) for b in self.biases]

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], init_range: float = 0.5, seed: int = 0, target_bounds=(0.0, 1.0)) -> "MLPNetwork":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            ws.append(rng.uniform(-init_range, init_range, (n_out, n_in)))
            bs.append(rng.uniform(-init_range, init_range, n_out))
        return cls(tuple(layer_sizes), ws, bs, float(target_bounds[0]), float(target_bounds[1]))

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    def _span(self) -> float:
        span = self.target_max - self.target_min
        return span if span != 0 else 1.0

    def normalize_target(self, y):
        return (np.asarray(y, dtype=float) - self.target_min) / self._span()

    def denormalize(self, z):
        return self.target_min + np.asarray(z, dtype=float) * self._span()

    def copy(self) -> "MLPNetwork":
        return MLPNetwork(
            self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.target_min, self.target_max,
            [v.copy() for v in self.velocity_w], [v.copy() for v in self.velocity_b],
        )


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _activations(net: MLPNetwork, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = w @ acts[-1] + b
        acts.append(z if l == last else _logistic(z))
    return acts


def forward_normalized(net: MLPNetwork, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (net.layer_sizes[0],):
        raise ValueError(f"expected {net.layer_sizes[0]} inputs, got shape {x.shape}")
    return float(_activations(net, x)[-1][0])


def forward(net: MLPNetwork, x) -> float:
    """Prediction for one encoded input vector, in target units."""
    return float(net.denormalize(forward_normalized(net, x)))


def predict_encoded(net: MLPNetwork, X: np.ndarray) -> np.ndarray:
    """Batch forward pass over rows of ``X``; returns target units."""
    a = np.asarray(X, dtype=float)
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if l != last:
            a = _logistic(a)
    return net.denormalize(a[:, 0])


def gradients(net: MLPNetwork, x: np.ndarray, t: float) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Back-propagated gradients of E = (o - t)^2 / 2 for one example.

    ``t`` is the normalized target. Returns (dE/dW per layer, dE/db per
    layer, E).
    """
    acts = _activations(net, x)
    out = acts[-1]
    delta = out - t
    n = len(net.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for l in range(n - 1, -1, -1):
        gw[l] = np.outer(delta, acts[l])
        gb[l] = delta
        if l:
            a = acts[l]
            delta = (net.weights[l].T @ delta) * a * (1.0 - a)
    return gw, gb, 0.5 * float(np.square(out[0] - t))


@dataclass
class TrainReport:
    epoch_mse: list[float]

    @property
    def final_mse(self) -> float:
        return self.epoch_mse[-1]


def presentation_orders(n: int, epochs: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.permutation(n) for _ in range(epochs)]


def train(
    net: MLPNetwork,
    config: TrainConfig,
    X: np.ndarray,
    y: np.ndarray,
    orders: Sequence[np.ndarray] | None = None,
) -> TrainReport:
    """Online back-propagation: dw(t) = -lr * dE/dw + momentum * dw(t-1).

    Rows are presented in a fresh seeded shuffle every epoch unless
    ``orders`` gives the per-epoch index sequences explicitly. ``y`` is in
    target units. Mutates ``net``; the report holds the training MSE (target
    units) after each epoch.
    """
    X = np.asarray(X, dtype=float)
    t = net.normalize_target(y)
    if X.ndim != 2 or len(X) == 0 or len(X) != len(t):
        raise ValueError("X must be a non-empty 2-D array matching y")
    if X.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"expected {net.layer_sizes[0]} input columns, got {X.shape[1]}")
    if orders is None:
        orders = presentation_orders(len(X), config.epochs, config.seed)
    lr, mom = config.learning_rate, config.momentum
    ws, bs, vw, vb = net.weights, net.biases, net.velocity_w, net.velocity_b
    history = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            for i in orders[epoch]:
                gw, gb, _ = gradients(net, X[i], t[i])
                for l in range(len(ws)):
                    vw[l] = -lr * gw[l] + mom * vw[l]
                    vb[l] = -lr * gb[l] + mom * vb[l]
                    ws[l] += vw[l]
                    bs[l] += vb[l]
            err = float(np.mean(np.square(predict_encoded(net, X) - np.asarray(y, dtype=float))))
            if not math.isfinite(err):
                raise TrainingDiverged(
                    f"training loss became non-finite at epoch {epoch + 1} "
                    f"(learning_rate={lr}, momentum={mom}); try a smaller learning rate"
                )
            history.append(err)
    return TrainReport(history)


# -- feature encoding ------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureScaler:
    """Per-input min/max from training rows; season enters as its code 1..4."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    @classmethod
    def fit(cls, rows: Sequence[FeatureVector]) -> "FeatureScaler":
        raw = raw_inputs(rows)
        return cls(tuple(map(float, raw.min(axis=0))), tuple(map(float, raw.max(axis=0))))

    def transform(self, raw: np.ndarray) -> np.ndarray:
        lo = np.array(self.mins)
        hi = np.array(self.maxs)
        span = hi - lo
        degenerate = span == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.asarray(raw, dtype=float) - lo) / np.where(degenerate, 1.0, span)
        z = np.clip(z, 0.0, 1.0)
        z[..., degenerate] = 0.5
        return z


def raw_inputs(rows: Sequence[FeatureVector]) -> np.ndarray:
    return np.array(
        [[r.year, int(r.season), r.mst, r.msdmt, r.msdmt_min, r.myt, r.msr, r.nsrd] for r in rows],
        dtype=float,
    ).reshape(len(rows), N_INPUTS)


def encode_inputs(v: FeatureVector, stats: FeatureScaler) -> np.ndarray:
    """Eight inputs scaled to [0, 1] with training-fold statistics."""
    return stats.transform(raw_inputs([v]))[0]


@dataclass
class MLPModel:
    """Network plus the input scaling it was trained with."""

    net: MLPNetwork
    scaler: FeatureScaler

    @classmethod
    def fit(cls, rows: Sequence[FeatureVector], hidden: Sequence[int] = (2,), config: TrainConfig = TrainConfig()) -> "MLPModel":
        if not rows:
            raise ValueError("no training rows")
        y = np.array([r.mstny for r in rows], dtype=float)
        scaler = FeatureScaler.fit(rows)
        net = MLPNetwork.initialize(
            (N_INPUTS, *hidden, 1), config.init_range, config.seed, (float(y.min()), float(y.max()))
        )
        train(net, config, scaler.transform(raw_inputs(rows)), y)
        return cls(net, scaler)

    def predict(self, rows: Sequence[FeatureVector]) -> np.ndarray:
        return predict_encoded(self.net, self.scaler.transform(raw_inputs(rows)))

    __call__ = predict


# -- hidden-layer sizing -------------------------------------------------------------------


@dataclass
class SizeSearchResult:
    hidden: int
    # (size, training percent error, validation percent error) in visit order
    history: list[tuple[int, float, float]]


def size_seed(seed: int, hidden: int) -> int:
    return int(np.random.SeedSequence([seed, hidden]).generate_state(1)[0])


def score_size(train_rows, valid_rows, hidden: int, config: TrainConfig) -> tuple[float, float]:
    cfg = TrainConfig(config.learning_rate, config.momentum, config.epochs, config.init_range, size_seed(config.seed, hidden))
    model = MLPModel.fit(train_rows, (hidden,), cfg)
    y_tr = np.array([r.mstny for r in train_rows])
    y_va = np.array([r.mstny for r in valid_rows])
    return percent_error(model.predict(train_rows), y_tr), percent_error(model.predict(valid_rows), y_va)


def size_search(
    train_rows: Sequence[FeatureVector],
    valid_rows: Sequence[FeatureVector],
    config: TrainConfig = TrainConfig(),
    start: int | None = None,
    grow_threshold: float = 12.0,
    prune_margin: float = 5.0,
    max_steps: int = 10,
    max_hidden: int = 16,
) -> SizeSearchResult:
    """Grow/prune search over a single hidden layer's width.

    Grow when training percent error exceeds ``grow_threshold``; otherwise
    prune when validation error exceeds training error by more than
    ``prune_margin`` points; stop when neither applies, a size repeats, or
    after ``max_steps``. Returns the visited size with the lowest validation
    error (earliest on ties).
    """
    if not train_rows or not valid_rows:
        raise ValueError("both row sets must be non-empty")
    if start is None:
        start = int(np.random.default_rng(config.seed).integers(1, 9))
    size = start
    history: list[tuple[int, float, float]] = []
    visited = set()
    for _ in range(max_steps):
        visited.add(size)
        tr_err, va_err = score_size(train_rows, valid_rows, size, config)
        history.append((size, tr_err, va_err))
        if tr_err > grow_threshold and size < max_hidden:
            nxt = size + 1
        elif va_err - tr_err > prune_margin and size > 1:
            nxt = size - 1
        else:
            break
        if nxt in visited:
            break
        size = nxt
    best = min(history, key=lambda h: h[2])
    return SizeSearchResult(best[0], history)


# -- persistence -------------------------------------------------------------------------------


def _row(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def save_model(model: MLPModel) -> str:
    """Text format: ``mlp v1`` header, layer sizes, weight/bias blocks, scaling."""
    net = model.net
    lines = ["mlp v1", " ".join(str(s) for s in net.layer_sizes)]
    for w, b in zip(net.weights, net.biases):
        lines.extend(_row(r) for r in w)
        lines.append(_row(b))
    lines.append("target " + _row([net.target_min, net.target_max]))
    lines.append("input_min " + _row(model.scaler.mins))
    lines.append("input_max " + _row(model.scaler.maxs))
    return "\n".join(lines) + "\n"


def load_model(text: str) -> MLPModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "mlp v1":
        raise ValueError("not an 'mlp v1' model file")
    try:
        sizes = tuple(int(s) for s in lines[1].split())
        pos = 2
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w = np.array([[float(v) for v in lines[pos + r].split()] for r in range(n_out)])
            pos += n_out
            b = np.array([float(v) for v in lines[pos].split()])
            pos += 1
            ws.append(w.reshape(n_out, n_in))
            bs.append(b)
        tags = {}
        for ln in lines[pos:]:
            key, _, rest = ln.partition(" ")
            tags[key] = [float(v) for v in rest.split()]
        net = MLPNetwork(sizes, ws, bs, tags["target"][0], tags["target"][1])
        scaler = FeatureScaler(tuple(tags["input_min"]), tuple(tags["input_max"]))
    except (IndexError, KeyError, ValueError) as exc:
        raise ValueError(f"malformed model file: {exc}") from None
    return MLPModel(net, scaler)
