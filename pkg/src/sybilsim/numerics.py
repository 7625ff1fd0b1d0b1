"""Dense model arithmetic: tiny classifiers, SGD training, and evaluation.

Models are flat float64 parameter vectors paired with an architecture
descriptor.  Two architectures are supported: plain softmax regression and a
one-hidden-layer ReLU network.  All operations are pure functions over
immutable inputs; RNG state is derived from caller-supplied seeds, never
global.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class NumericFailure(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class Architecture:
    """Shape of a classifier: ``hidden is None`` means softmax regression."""

    input_dim: int
    n_classes: int
    hidden: Optional[int] = None

    def __post_init__(self):
        if self.input_dim < 1 or self.n_classes < 2:
            raise ValueError("architecture needs input_dim >= 1 and n_classes >= 2")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden width must be >= 1")

    @property
    def param_count(self) -> int:
        if self.hidden is None:
            return (self.input_dim + 1) * self.n_classes
        h = self.hidden
        return h * self.input_dim + h + self.n_classes * h + self.n_classes


@dataclass(frozen=True)
class Model:
    """A flat parameter vector together with its architecture."""

    params: np.ndarray
    arch: Architecture

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 1:
            raise ValueError("params must be a flat vector")
        if params.size != self.arch.param_count:
            raise ValueError(
                f"params length {params.size} does not match architecture "
                f"(expected {self.arch.param_count})"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("params must be finite")
        object.__setattr__(self, "params", params)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    local_epochs: int
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_model(arch: Architecture, seed: int) -> Model:
    """Draw a small random initial model, deterministic per seed.

    Weights are Gaussian scaled by 1/sqrt(fan_in); biases start at zero.
    """
    rng = np.random.default_rng(seed)
    if arch.hidden is None:
        w = rng.normal(0.0, 1.0, (arch.n_classes, arch.input_dim)) / np.sqrt(arch.input_dim)
        b = np.zeros(arch.n_classes)
        params = np.concatenate([w.ravel(), b])
    else:
        h = arch.hidden
        w1 = rng.normal(0.0, 1.0, (h, arch.input_dim)) * np.sqrt(2.0 / arch.input_dim)
        b1 = np.zeros(h)
        w2 = rng.normal(0.0, 1.0, (arch.n_classes, h)) * np.sqrt(2.0 / h)
        b2 = np.zeros(arch.n_classes)
        params = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
    return Model(params, arch)


def _unpack(params: np.ndarray, arch: Architecture):
    d, c = arch.input_dim, arch.n_classes
    if arch.hidden is None:
        w = params[: c * d].reshape(c, d)
        b = params[c * d :]
        return w, b
    h = arch.hidden
    off = 0
    w1 = params[off : off + h * d].reshape(h, d)
    off += h * d
    b1 = params[off : off + h]
    off += h
    w2 = params[off : off + c * h].reshape(c, h)
    off += c * h
    b2 = params[off :]
    return w1, b1, w2, b2


def _logits(params: np.ndarray, arch: Architecture, x: np.ndarray) -> np.ndarray:
    if arch.hidden is None:
        w, b = _unpack(params, arch)
        return x @ w.T + b
    w1, b1, w2, b2 = _unpack(params, arch)
    a = np.maximum(x @ w1.T + b1, 0.0)
    return a @ w2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(model: Model, data) -> float:
    """Mean cross-entropy of the model on a labeled dataset."""
    x, y = _check_data(model.arch, data)
    logp = _log_softmax(_logits(model.params, model.arch, x))
    return float(-logp[np.arange(len(y)), y].mean())


def _gradient(params: np.ndarray, arch: Architecture, x: np.ndarray, y: np.ndarray):
    """Analytic mean cross-entropy gradient for one mini-batch."""
    n = len(y)
    if arch.hidden is None:
        w, b = _unpack(params, arch)
        z = x @ w.T + b
        logp = _log_softmax(z)
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        p /= n
        grad = np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])
    else:
        w1, b1, w2, b2 = _unpack(params, arch)
        pre = x @ w1.T + b1
        a = np.maximum(pre, 0.0)
        z = a @ w2.T + b2
        logp = _log_softmax(z)
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        p /= n
        da = p @ w2
        dpre = da * (pre > 0.0)
        grad = np.concatenate(
            [(dpre.T @ x).ravel(), dpre.sum(axis=0), (p.T @ a).ravel(), p.sum(axis=0)]
        )
    loss = float(-logp[np.arange(n), y].mean())
    return grad, loss


def _check_data(arch: Architecture, data):
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    if len(y) == 0:
        raise ValueError("dataset is empty")
    if x.shape[1] != arch.input_dim:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match architecture input_dim {arch.input_dim}"
        )
    return x, y


def train_sgd(model: Model, data, cfg: TrainConfig) -> Model:
    """Run ``cfg.local_epochs`` passes of mini-batch SGD on cross-entropy loss.

    Batches are drawn in a per-epoch shuffled order from an RNG seeded by
    ``cfg.seed``, so the result is bit-reproducible for identical inputs.  The
    input model is left untouched; a new one is returned.

    Raises ``NumericFailure`` if any batch produces a non-finite loss.
    """
    x, y = _check_data(model.arch, data)
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    n = len(y)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad, loss = _gradient(params, model.arch, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericFailure(f"non-finite loss {loss} during SGD")
            params -= cfg.learning_rate * grad
    return Model(params, model.arch)


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    """Argmax class predictions; ties resolve to the lowest class index."""
    logits = _logits(model.params, model.arch, np.asarray(features, dtype=np.float64))
    return np.argmax(logits, axis=1)


def evaluate_accuracy(model: Model, data) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    x, y = _check_data(model.arch, data)
    return float(np.mean(predict(model, x) == y))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors.

    A zero vector carries no direction, so any comparison against one
    returns 0.0 rather than dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
