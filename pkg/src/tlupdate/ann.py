"""Dense feedforward regression network: init, forward/backward, Adam training, metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Scaler

ACTIVATIONS = ("relu", "tanh")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class UndefinedR2Error(ValueError):
    """Raised for constant targets; ``metrics`` still carries rmse and mae (r2 is nan)."""

    def __init__(self, metrics: "Metrics"):
        self.metrics = metrics
        super().__init__("r2 is undefined for constant targets")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_layers: tuple[int, ...]
    activation: str = "relu"
    output_dim: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_layers):
            raise ValueError("layer widths must be >= 1")
        if self.output_dim != 1:
            raise ValueError("only scalar regression (output_dim = 1) is supported")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["input_dim"], tuple(d["hidden_layers"]), d.get("activation", "relu"), d.get("output_dim", 1))


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable network value. ``weights[k]`` has shape (out, in)."""

    architecture: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    scaler: Scaler | None = None
    train_seed: int = 0
    learning_rate: float | None = None
    tag: str = "trained"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        shapes = self.architecture.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match architecture")
        ws, bs = [], []
        for (o, i), w, b in zip(shapes, self.weights, self.biases):
            w = np.array(w, dtype=float)
            b = np.array(b, dtype=float).reshape(-1)
            if w.shape != (o, i) or b.shape != (o,):
                raise ValueError(f"expected layer shapes {(o, i)} / {(o,)}, got {w.shape} / {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return predict(self, inputs)

    def flat_parameters(self) -> np.ndarray:
        return _pack(self.weights, self.biases)

    def with_parameters(self, flat: np.ndarray, **changes) -> "NetworkModel":
        ws, bs = _unpack(flat, self.architecture)
        return replace(self, weights=tuple(ws), biases=tuple(bs), **changes)

    def same_parameters(self, other: "NetworkModel") -> bool:
        """Bitwise parameter equality."""
        return self.architecture == other.architecture and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


def _pack(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> np.ndarray:
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts)


def _unpack(flat: np.ndarray, arch: Architecture) -> tuple[list[np.ndarray], list[np.ndarray]]:
    ws, bs, pos = [], [], 0
    for o, i in arch.layer_shapes:
        ws.append(flat[pos : pos + o * i].reshape(o, i))
        pos += o * i
        bs.append(flat[pos : pos + o])
        pos += o
    return ws, bs


def layer_mask(arch: Architecture, trainable: Sequence[bool]) -> np.ndarray:
    """Boolean mask over the flat parameter vector selecting whole layers (weights and bias)."""
    if len(trainable) != len(arch.layer_shapes):
        raise ValueError("need one trainable flag per layer")
    return np.concatenate([np.full(o * i + o, bool(t)) for (o, i), t in zip(arch.layer_shapes, trainable)])


def init_network(arch: Architecture, seed: int = 0, **kwargs) -> NetworkModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for o, i in arch.layer_shapes:
        limit = np.sqrt(6.0 / (i + o))
        ws.append(rng.uniform(-limit, limit, size=(o, i)))
        bs.append(np.zeros(o))
    return NetworkModel(arch, tuple(ws), tuple(bs), train_seed=seed, **kwargs)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _forward(weights, biases, x: np.ndarray, kind: str):
    """Return output vector and cached (inputs, pre-activations) per layer."""
    a = x
    cache = []
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        cache.append((a, z))
        a = z if k == last else _act(z, kind)
    return a[:, 0], cache


def predict(model: NetworkModel, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != model.architecture.input_dim:
        raise ValueError(f"expected {model.architecture.input_dim} input columns, got {x.shape[1]}")
    out, _ = _forward(model.weights, model.biases, x, model.architecture.activation)
    return out


def loss_and_gradient(model: NetworkModel, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to the flat parameter vector."""
    return _loss_grad(model.weights, model.biases, np.asarray(inputs, float), np.asarray(targets, float),
                      model.architecture.activation)


def _loss_grad(weights, biases, x, y, kind):
    out, cache = _forward(weights, biases, x, kind)
    n = len(y)
    resid = out - y
    loss = float(np.mean(resid**2))
    delta = (2.0 / n) * resid[:, None]
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        a_in, z = cache[k]
        if k != len(weights) - 1:
            if kind == "relu":
                delta = delta * (z > 0)
            else:
                delta = delta * (1.0 - np.tanh(z) ** 2)
        grads_w[k] = delta.T @ a_in
        grads_b[k] = delta.sum(axis=0)
        if k:
            delta = delta @ weights[k]
    return loss, _pack(grads_w, grads_b)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    early_stop_patience: int = 20
    mini_batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.mini_batch_size < 1:
            raise ValueError("mini_batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "mini_batch_size": self.mini_batch_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float
    mae: float
    n: int

    def to_dict(self) -> dict:
        return {"r2": self.r2, "rmse": self.rmse, "mae": self.mae, "n": self.n}


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0
    val_metrics: Metrics | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def compute_metrics(targets: np.ndarray, predictions: np.ndarray) -> Metrics:
    """R^2, RMSE and MAE. Constant targets raise :class:`UndefinedR2Error`."""
    y = np.asarray(targets, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError("targets and predictions must be equal-length vectors")
    if len(y) < 1:
        raise ValueError("need at least one observation")
    resid = y - p
    ss_res = float(np.sum(resid**2))
    rmse = float(np.sqrt(ss_res / len(y)))
    mae = float(np.mean(np.abs(resid)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if len(y) < 2 or ss_tot == 0.0:
        raise UndefinedR2Error(Metrics(float("nan"), rmse, mae, len(y)))
    return Metrics(1.0 - ss_res / ss_tot, rmse, mae, len(y))


def metrics_or_partial(targets: np.ndarray, predictions: np.ndarray) -> Metrics:
    try:
        return compute_metrics(targets, predictions)
    except UndefinedR2Error as exc:
        return exc.metrics


def split_tail(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``range(n)`` and return (head, tail) where the tail holds ``fraction`` of the rows."""
    order = rng.permutation(n)
    n_tail = int(round(n * fraction)) if n >= 5 else 0
    return order[: n - n_tail], order[n - n_tail :]


def train(
    model: NetworkModel,
    train_inputs: np.ndarray,
    train_targets: np.ndarray,
    cfg: TrainConfig,
    trainable: np.ndarray | None = None,
) -> tuple[NetworkModel, TrainTrace]:
    """Fit by mini-batch Adam on mean squared error with early stopping.

    The last ``cfg.validation_fraction`` of a seeded shuffle is held out for
    early stopping; the parameters from the best validation epoch are returned.
    ``trainable`` is an optional boolean mask over the flat parameter vector;
    masked-out entries are never written.
    """
    x = np.asarray(train_inputs, dtype=float)
    y = np.asarray(train_targets, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.architecture.input_dim or len(x) != len(y):
        raise ValueError("training data shape does not match the model")
    if len(y) == 0:
        raise ValueError("no training rows")

    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fit_idx, val_idx = split_tail(len(y), cfg.validation_fraction, rng)
    x_fit, y_fit = x[fit_idx], y[fit_idx]
    x_val, y_val = (x[val_idx], y[val_idx]) if len(val_idx) else (x_fit, y_fit)

    arch = model.architecture
    kind = arch.activation
    theta = model.flat_parameters().copy()
    free = np.arange(theta.size) if trainable is None else np.flatnonzero(trainable)
    if trainable is not None and len(trainable) != theta.size:
        raise ValueError("trainable mask length differs from parameter count")
    m = np.zeros(free.size)
    v = np.zeros(free.size)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    trace = TrainTrace()
    best_theta, best_val, since_best = theta.copy(), np.inf, 0
    n_fit = len(y_fit)
    for epoch in range(1, cfg.max_epochs + 1):
        e0 = time.perf_counter()
        order = rng.permutation(n_fit)
        for s in range(0, n_fit, cfg.mini_batch_size):
            idx = order[s : s + cfg.mini_batch_size]
            ws, bs = _unpack(theta, arch)
            loss, grad = _loss_grad(ws, bs, x_fit[idx], y_fit[idx], kind)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            g = grad[free]
            step += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**step)
            v_hat = v / (1 - beta2**step)
            theta[free] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

        ws, bs = _unpack(theta, arch)
        fit_out, _ = _forward(ws, bs, x_fit, kind)
        train_loss = float(np.mean((fit_out - y_fit) ** 2))
        val_out, _ = _forward(ws, bs, x_val, kind)
        val_loss = float(np.mean((val_out - y_val) ** 2))
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(epoch)
        trace.train_loss.append(train_loss)
        trace.val_loss.append(val_loss)
        trace.epoch_seconds.append(time.perf_counter() - e0)
        if val_loss < best_val:
            best_val, best_theta, since_best = val_loss, theta.copy(), 0
            trace.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break

    fitted = model.with_parameters(best_theta, train_seed=cfg.seed, learning_rate=cfg.learning_rate)
    trace.val_metrics = metrics_or_partial(y_val, predict(fitted, x_val))
    trace.seconds = time.perf_counter() - t0
    return fitted, trace


GradFn = Callable[[NetworkModel, np.ndarray, np.ndarray], np.ndarray]


def gradient_check(
    model: NetworkModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    step: float = 1e-5,
    grad_fn: GradFn | None = None,
) -> float:
    """Max relative error between an analytic gradient and central finite differences.

    Parameters whose analytic and numeric magnitudes sum to at most 1e-8 are
    skipped; if every parameter is skipped the result is 0.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if grad_fn is None:
        analytic = loss_and_gradient(model, x, y)[1]
    else:
        analytic = np.asarray(grad_fn(model, x, y), dtype=float)
    theta = model.flat_parameters()
    arch = model.architecture
    numeric = np.empty_like(theta)
    for k in range(theta.size):
        probe = theta.copy()
        probe[k] = theta[k] + step
        up = _loss_grad(*_unpack(probe, arch), x, y, arch.activation)[0]
        probe[k] = theta[k] - step
        down = _loss_grad(*_unpack(probe, arch), x, y, arch.activation)[0]
        numeric[k] = (up - down) / (2 * step)
    denom = np.abs(analytic) + np.abs(numeric)
    keep = denom > 1e-8
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(analytic - numeric)[keep] / denom[keep]))
