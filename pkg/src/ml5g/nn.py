"""A small from-scratch multilayer perceptron for throughput regression.

Hidden layers use ReLU and the output layer is linear. Weight matrices are
stored as ``(fan_out, fan_in)`` arrays so a batch ``X`` of shape
``(n, fan_in)`` propagates as ``X @ W.T + b``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class Dataset:
    rows: list[tuple[list[float], float]]
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        arities = {len(x) for x, _ in self.rows}
        if len(arities) > 1:
            raise ValueError(f"rows have mixed arity: {sorted(arities)}")
        if any(t < 0 for _, t in self.rows):
            raise ValueError("targets must be non-negative")

    def __len__(self):
        return len(self.rows)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.array([x for x, _ in self.rows], dtype=float)
        y = np.array([t for _, t in self.rows], dtype=float)
        return X.reshape(len(self.rows), -1), y


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    norm_schema: list[tuple[float, float]] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)
    target_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise ValueError("layer_sizes must run from input size to a single output")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}")
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ValueError("one weight matrix per layer transition required")
        if self.norm_schema and len(self.norm_schema) != self.layer_sizes[0]:
            raise ValueError("norm_schema length must equal the input size")
        if not all(np.all(np.isfinite(p)) for p in self.weights + self.biases):
            raise ValueError("model parameters must be finite")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], **kw) -> MlpModel:
        sizes = list(layer_sizes)
        return cls(
            sizes,
            [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)],
            [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)],
            **kw,
        )

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator, **kw) -> MlpModel:
        """Uniform init in +-1/sqrt(fan_in), biases included."""
        sizes = list(layer_sizes)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(sizes, weights, biases, **kw)

    def copy(self) -> MlpModel:
        return MlpModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            list(self.norm_schema),
            list(self.feature_names),
            tuple(self.target_range),
        )

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": self.activation,
            "norm_schema": [list(p) for p in self.norm_schema],
            "feature_names": list(self.feature_names),
            "target_range": list(self.target_range),
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        sizes = [int(n) for n in d["layer_sizes"]]
        weights = [
            np.array(w, dtype=float).reshape(sizes[i + 1], sizes[i]) for i, w in enumerate(d["weights"])
        ]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(
            sizes,
            weights,
            biases,
            d.get("activation", "relu"),
            [tuple(p) for p in d.get("norm_schema", [])],
            list(d.get("feature_names", [])),
            tuple(d.get("target_range", (0.0, 1.0))),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> MlpModel:
        return cls.from_dict(json.loads(data))


def _relu(z):
    return np.maximum(z, 0.0)


def _forward_cache(model: MlpModel, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else _relu(z)
        acts.append(a)
    return pre, acts


def forward_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_size:
        raise ValueError(f"expected features of arity {model.input_size}, got shape {X.shape}")
    _, acts = _forward_cache(model, X)
    return acts[-1][:, 0]


def forward(model: MlpModel, features: Sequence[float]) -> float:
    """Predict for one already-normalized feature vector."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.input_size:
        raise ValueError(f"expected {model.input_size} features, got {x.shape}")
    return float(forward_batch(model, x[None, :])[0])


def mse(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((forward_batch(model, X) - y) ** 2))


def gradients(model: MlpModel, X: np.ndarray, y: np.ndarray):
    """Backprop of mean squared error; returns (loss, dW list, db list)."""
    pre, acts = _forward_cache(model, X)
    n = X.shape[0]
    out = acts[-1][:, 0]
    err = out - y
    loss = float(np.mean(err**2))
    delta = (2.0 / n) * err[:, None]
    dws = [None] * len(model.weights)
    dbs = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        dws[i] = delta.T @ acts[i]
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0)
    return loss, dws, dbs


def train(
    dataset: Dataset,
    layer_sizes: Sequence[int],
    config: TrainingConfig = TrainingConfig(),
    *,
    norm_schema: Sequence[tuple[float, float]] = (),
    target_range: tuple[float, float] = (0.0, 1.0),
) -> MlpModel:
    """Mini-batch SGD on MSE; keeps the epoch with the lowest validation loss.

    The dataset must already be normalized. ``norm_schema`` and
    ``target_range`` are only recorded on the model so inference can apply
    the same transform.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    X, y = dataset.arrays()
    if X.shape[1] != layer_sizes[0]:
        raise ValueError(f"dataset arity {X.shape[1]} != input size {layer_sizes[0]}")
    rng = np.random.default_rng(config.seed)
    model = MlpModel.initialize(
        layer_sizes,
        rng,
        norm_schema=[tuple(p) for p in norm_schema],
        feature_names=list(dataset.feature_names),
        target_range=tuple(target_range),
    )

    perm = rng.permutation(len(X))
    n_val = int(round(len(X) * config.validation_fraction))
    if len(X) - n_val < 1:
        n_val = 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    X_tr, y_tr = X[train_idx], y[train_idx]
    # tiny datasets validate on the training rows
    X_val, y_val = (X[val_idx], y[val_idx]) if n_val else (X_tr, y_tr)

    # overflow is reported as divergence below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        best = model.copy()
        best_loss = mse(model, X_val, y_val)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(X_tr))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                loss, dws, dbs = gradients(model, X_tr[idx], y_tr[idx])
                if not math.isfinite(loss):
                    raise TrainingError(f"training diverged at epoch {epoch}: non-finite loss")
                for w, dw, b, db in zip(model.weights, dws, model.biases, dbs):
                    w -= config.learning_rate * dw
                    b -= config.learning_rate * db
            val_loss = mse(model, X_val, y_val)
            if not math.isfinite(val_loss):
                raise TrainingError(f"training diverged at epoch {epoch}: non-finite loss")
            if val_loss < best_loss:
                best, best_loss = model.copy(), val_loss
            if epoch % 50 == 0:
                log.debug("epoch %d val_mse=%.6g best=%.6g", epoch, val_loss, best_loss)
    return best


def _params(model: MlpModel) -> list[np.ndarray]:
    return [p for pair in zip(model.weights, model.biases) for p in pair]


def gradient_check(model: MlpModel, sample: tuple[Sequence[float], float], epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Relative error is ``|a - n| / max(|a| + |n|, 1e-12)`` over every
    weight and bias.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x, target = sample
    X = np.asarray(x, dtype=float)[None, :]
    y = np.array([float(target)])
    _, dws, dbs = gradients(model, X, y)
    analytic = [g for pair in zip(dws, dbs) for g in pair]

    probe = model.copy()
    worst = 0.0
    for param, grad in zip(_params(probe), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = mse(probe, X, y)
            flat[k] = orig - epsilon
            down = mse(probe, X, y)
            flat[k] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(gflat[k])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
