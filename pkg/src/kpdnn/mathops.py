"""Dense matrix helpers, activations and seeded sampling.

Matrices are plain 2-D ``float64`` numpy arrays, batch-major (one example
per row).  Functions never modify their inputs.
"""
import enum

import numpy as np

from .errors import DomainError, ParseError, ShapeError
from .rng import SeededRng


class ActivationKind(str, enum.Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RECTIFIER = "rectifier"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {"relu": "rectifier", "linear": "identity"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ParseError(f"unknown activation {name!r}; expected one of {choices}") from None


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def affine(inputs, weights, bias):
    """Return ``inputs @ weights + bias``."""
    x = as_matrix(inputs, "input")
    w = as_matrix(weights, "weights")
    b = np.asarray(bias, dtype=np.float64).reshape(-1)
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"affine shapes do not conform: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    out = x @ w + b
    if not np.all(np.isfinite(out)):
        raise DomainError("affine produced non-finite values")
    return out


def sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_activation(kind, m):
    kind = ActivationKind.parse(kind)
    m = np.asarray(m, dtype=np.float64)
    if kind is ActivationKind.SIGMOID:
        return sigmoid(m)
    if kind is ActivationKind.TANH:
        return np.tanh(m)
    if kind is ActivationKind.RECTIFIER:
        return np.maximum(m, 0.0)
    return m.copy()


def activation_grad(kind, out):
    """Derivative of the activation, expressed through its output ``out``."""
    kind = ActivationKind.parse(kind)
    if kind is ActivationKind.SIGMOID:
        return out * (1.0 - out)
    if kind is ActivationKind.TANH:
        return 1.0 - out * out
    if kind is ActivationKind.RECTIFIER:
        return (out > 0.0).astype(np.float64)
    return np.ones_like(out)


def softmax_rows(m):
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m):
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sample_bernoulli(rng: SeededRng, probs):
    """Independent 0/1 draws, ``1`` with the given probability."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size and (np.any(~(p >= 0.0)) or np.any(~(p <= 1.0))):
        raise DomainError("Bernoulli probabilities must lie in [0, 1]")
    return (rng.uniform(p.shape) < p).astype(np.float64)


def sample_gaussian(rng: SeededRng, mean, stddev):
    mean = np.asarray(mean, dtype=np.float64)
    if not stddev >= 0.0:
        raise DomainError(f"stddev must be non-negative, got {stddev}")
    if stddev == 0.0:
        return mean.copy()
    return mean + stddev * rng.normal(mean.shape)
