"""Differentiable models with closed-form losses and gradients.

Two classifiers share the cross-entropy machinery: a linear multinomial
logistic model and a one-hidden-layer tanh network. A third kind, the scalar
location model with squared loss, exists for convex saddle-point toys where
the per-group objective must be exactly quadratic.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.random import Generator

from .core import ModelParams

__all__ = ["MODEL_KINDS", "ModelSpec", "Batch", "logits", "per_sample_losses",
           "loss", "grad_loss", "accuracy"]

MODEL_KINDS = ("linear", "mlp", "quadratic")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameters live in one flat float64 vector.

    Layouts:
      linear     [W (C x d), b (C)]
      mlp        [W1 (H x d), b1 (H), W2 (C x H), b2 (C)]
      quadratic  [theta] (scalar location, squared loss, class_count must be 1)
    """

    kind: str
    feature_dim: int
    class_count: int
    hidden_width: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.feature_dim < 1 or self.class_count < 1:
            raise ValueError("feature_dim and class_count must be >= 1")
        if self.kind == "mlp" and self.hidden_width < 1:
            raise ValueError("mlp requires hidden_width >= 1")
        if self.kind == "quadratic":
            if self.feature_dim != 1 or self.class_count != 1:
                raise ValueError("quadratic kind requires feature_dim = class_count = 1")

    def param_count(self) -> int:
        d, c, h = self.feature_dim, self.class_count, self.hidden_width
        if self.kind == "linear":
            return d * c + c
        if self.kind == "mlp":
            return d * h + h + h * c + c
        return 1

    def init_params(self, stream: Optional[Generator] = None) -> ModelParams:
        """Zeros for the convex kinds; small scaled normals for the mlp."""
        if self.kind != "mlp":
            return ModelParams(np.zeros(self.param_count()))
        if stream is None:
            raise ValueError("mlp initialisation needs a random stream")
        d, c, h = self.feature_dim, self.class_count, self.hidden_width
        w1 = stream.standard_normal(h * d) / np.sqrt(d)
        w2 = stream.standard_normal(c * h) / np.sqrt(h)
        return ModelParams(np.concatenate([w1, np.zeros(h), w2, np.zeros(c)]))


@dataclass(frozen=True)
class Batch:
    """A minibatch of rows; labels align with feature rows."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-d array")
        if y.shape != (f.shape[0],):
            raise ValueError("labels must align with feature rows")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _check(theta: ModelParams, batch: Batch, spec: ModelSpec) -> None:
    if len(theta) != spec.param_count():
        raise ValueError(
            f"parameter vector has length {len(theta)}, spec needs {spec.param_count()}"
        )
    if batch.features.shape[1] != spec.feature_dim:
        raise ValueError(
            f"features have width {batch.features.shape[1]}, spec needs {spec.feature_dim}"
        )
    if not np.all(np.isfinite(batch.features)):
        raise ValueError("features contain non-finite values")
    if spec.kind != "quadratic":
        if batch.labels.min() < 0 or batch.labels.max() >= spec.class_count:
            raise ValueError("labels outside [0, class_count)")


def _unpack_linear(theta: np.ndarray, spec: ModelSpec):
    d, c = spec.feature_dim, spec.class_count
    return theta[: d * c].reshape(c, d), theta[d * c :]


def _unpack_mlp(theta: np.ndarray, spec: ModelSpec):
    d, c, h = spec.feature_dim, spec.class_count, spec.hidden_width
    o = 0
    w1 = theta[o : o + h * d].reshape(h, d); o += h * d
    b1 = theta[o : o + h]; o += h
    w2 = theta[o : o + c * h].reshape(c, h); o += c * h
    b2 = theta[o : o + c]
    return w1, b1, w2, b2


def logits(theta: ModelParams, features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Pre-softmax scores, shape (batch, class_count)."""
    t = theta.values
    if spec.kind == "linear":
        w, b = _unpack_linear(t, spec)
        return features @ w.T + b
    if spec.kind == "mlp":
        w1, b1, w2, b2 = _unpack_mlp(t, spec)
        return np.tanh(features @ w1.T + b1) @ w2.T + b2
    raise ValueError("the quadratic kind has no logits")


def per_sample_losses(
    theta: ModelParams, features: np.ndarray, labels: np.ndarray, spec: ModelSpec
) -> np.ndarray:
    """Loss of every row: cross-entropy for classifiers, (theta - x)^2 for
    the location model."""
    if spec.kind == "quadratic":
        return (theta.values[0] - features[:, 0]) ** 2
    z = logits(theta, features, spec)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def loss(theta: ModelParams, batch: Batch, spec: ModelSpec) -> float:
    """Mean loss over the batch (log-sum-exp stabilized for classifiers)."""
    _check(theta, batch, spec)
    return float(per_sample_losses(theta, batch.features, batch.labels, spec).mean())


def grad_loss(theta: ModelParams, batch: Batch, spec: ModelSpec) -> np.ndarray:
    """Analytic gradient of ``loss`` in the flat parameter layout."""
    _check(theta, batch, spec)
    t = theta.values
    x, y = batch.features, batch.labels
    b = batch.size
    if spec.kind == "quadratic":
        return np.array([2.0 * float(np.mean(t[0] - x[:, 0]))])
    if spec.kind == "linear":
        z = logits(theta, x, spec)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), y] -= 1.0
        p /= b
        return np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])
    w1, b1, w2, b2 = _unpack_mlp(t, spec)
    a1 = np.tanh(x @ w1.T + b1)
    z = a1 @ w2.T + b2
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(b), y] -= 1.0
    p /= b
    gw2 = p.T @ a1
    gb2 = p.sum(axis=0)
    da1 = p @ w2
    dz1 = da1 * (1.0 - a1 ** 2)
    gw1 = dz1.T @ x
    gb1 = dz1.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def accuracy(theta: ModelParams, batch: Batch, spec: ModelSpec) -> float:
    """Fraction of rows whose argmax logit matches the label.

    Ties resolve to the lowest class index (np.argmax convention).
    """
    if spec.kind == "quadratic":
        raise ValueError("accuracy is undefined for the quadratic location model")
    _check(theta, batch, spec)
    pred = np.argmax(logits(theta, batch.features, spec), axis=1)
    return float(np.mean(pred == batch.labels))
