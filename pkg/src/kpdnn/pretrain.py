"""Greedy layer-wise pre-training of the fully-connected hidden layers.

Two flavours are provided:

* RBM stacks trained with one-step contrastive divergence.  The first
  layer is Gaussian-Bernoulli (unit-variance visibles, reconstruction by the
  Gaussian mean), every higher layer Bernoulli-Bernoulli.
* Stacked denoising autoencoders with tied weights and masking noise.  The
  first layer decodes linearly under squared error, higher layers decode
  through a sigmoid under cross-entropy.

In both cases layer ``k`` is trained on the deterministic sigmoid
activations of layers ``< k`` and all layers encode with a sigmoid.
"""
import dataclasses
import enum
import logging
from typing import List

import numpy as np

from .errors import DomainError, ShapeError
from .mathops import as_matrix, sample_bernoulli, sigmoid
from .network import NetSpec, Network, init_network
from .rng import SeededRng

log = logging.getLogger(__name__)


class RbmKind(str, enum.Enum):
    GAUSSIAN_BERNOULLI = "gaussian-bernoulli"
    BERNOULLI_BERNOULLI = "bernoulli-bernoulli"


@dataclasses.dataclass
class Rbm:
    kind: RbmKind
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    errors: list = dataclasses.field(default_factory=list)

    @classmethod
    def init(cls, kind, n_visible, n_hidden, rng: SeededRng, scale=0.01):
        return cls(RbmKind(kind), scale * rng.normal((n_visible, n_hidden)),
                   np.zeros(n_visible), np.zeros(n_hidden))

    def hidden_probs(self, v):
        return sigmoid(v @ self.weights + self.hidden_bias)

    def visible_mean(self, h):
        pre = h @ self.weights.T + self.visible_bias
        if self.kind is RbmKind.GAUSSIAN_BERNOULLI:
            return pre
        return sigmoid(pre)


@dataclasses.dataclass
class DaLayer:
    """Denoising autoencoder; the decoder uses ``weights.T``."""

    weights: np.ndarray
    encode_bias: np.ndarray
    decode_bias: np.ndarray
    corruption_level: float
    linear_decoder: bool = False
    errors: list = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.corruption_level <= 1.0:
            raise DomainError(f"corruption level must lie in [0, 1], got {self.corruption_level}")

    @property
    def decode_weights(self):
        return self.weights.T

    def encode(self, x):
        return sigmoid(x @ self.weights + self.encode_bias)

    def decode(self, h):
        pre = h @ self.weights.T + self.decode_bias
        return pre if self.linear_decoder else sigmoid(pre)


@dataclasses.dataclass
class PretrainConfig:
    epochs: int = 10
    learning_rate: float = 0.08
    first_layer_learning_rate: float = 0.005
    batch_size: int = 128
    corruption_level: float = 0.2
    cd_steps: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch size >= 1")
        if self.learning_rate <= 0 or self.first_layer_learning_rate <= 0:
            raise DomainError("learning rates must be positive")
        if self.cd_steps != 1:
            raise DomainError("only CD-1 is supported")
        if not 0.0 <= self.corruption_level <= 1.0:
            raise DomainError("corruption level must lie in [0, 1]")


# ---------------------------------------------------------------------------
# RBM
# ---------------------------------------------------------------------------

def cd1_update(rbm: Rbm, batch, lr, rng: SeededRng):
    """One CD-1 step on ``batch``.

    Returns the updated RBM (a new object) and the mean squared error between
    the batch and its mean-field reconstruction.
    """
    v0 = as_matrix(batch, "batch")
    if v0.shape[1] != rbm.weights.shape[0]:
        raise ShapeError(f"batch has {v0.shape[1]} columns, RBM has {rbm.weights.shape[0]} visibles")
    n = v0.shape[0]
    ph0 = rbm.hidden_probs(v0)
    h0 = sample_bernoulli(rng, ph0)
    mean_v1 = rbm.visible_mean(h0)
    if rbm.kind is RbmKind.BERNOULLI_BERNOULLI:
        v1 = sample_bernoulli(rng, mean_v1)
    else:
        v1 = mean_v1
    ph1 = rbm.hidden_probs(v1)
    err = float(np.mean((v0 - mean_v1) ** 2))
    if lr == 0:
        return dataclasses.replace(rbm, weights=rbm.weights.copy(),
                                   visible_bias=rbm.visible_bias.copy(),
                                   hidden_bias=rbm.hidden_bias.copy(), errors=list(rbm.errors)), err
    return Rbm(
        rbm.kind,
        rbm.weights + lr * (v0.T @ ph0 - v1.T @ ph1) / n,
        rbm.visible_bias + lr * (v0 - v1).mean(axis=0),
        rbm.hidden_bias + lr * (ph0 - ph1).mean(axis=0),
        list(rbm.errors),
    ), err


def _check_stackable(spec: NetSpec):
    if spec.conv:
        raise DomainError("pre-training covers fully-connected stacks only")
    if spec.maxout_group > 1:
        raise DomainError("pre-training is not defined for maxout layers")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain_rbm_stack(spec: NetSpec, data, config: PretrainConfig, rng: SeededRng) -> List[Rbm]:
    """Train one RBM per hidden layer of ``spec``, bottom-up.

    ``data`` should be standardised per dimension (the first layer is a
    unit-variance Gaussian-Bernoulli RBM).
    """
    _check_stackable(spec)
    x = as_matrix(data, "data")
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"data has {x.shape[1]} columns, spec expects {spec.input_dim}")
    stack = []
    for k, n_hidden in enumerate(spec.hidden_sizes):
        kind = RbmKind.GAUSSIAN_BERNOULLI if k == 0 else RbmKind.BERNOULLI_BERNOULLI
        lr = config.first_layer_learning_rate if k == 0 else config.learning_rate
        rbm = Rbm.init(kind, x.shape[1], n_hidden, rng)
        for epoch in range(config.epochs):
            total = 0.0
            for idx in _batches(len(x), config.batch_size, rng):
                rbm, err = cd1_update(rbm, x[idx], lr, rng)
                total += err * len(idx)
            rbm.errors.append(total / len(x))
            log.info("rbm layer %d epoch %d recon-err %.6f", k, epoch + 1, rbm.errors[-1])
        stack.append(rbm)
        x = rbm.hidden_probs(x)
    return stack


# ---------------------------------------------------------------------------
# denoising autoencoders
# ---------------------------------------------------------------------------

def corrupt_masking(inputs, level, rng: SeededRng):
    """Zero each entry independently with probability ``level``."""
    if not 0.0 <= level <= 1.0:
        raise DomainError(f"corruption level must lie in [0, 1], got {level}")
    x = np.asarray(inputs, dtype=np.float64)
    if level == 0.0:
        return x.copy()
    keep = rng.uniform(x.shape) >= level
    return np.where(keep, x, 0.0)


def da_loss_and_grads(layer: DaLayer, clean, corrupted):
    """Reconstruction loss and gradients ``(dW, d_encode_bias, d_decode_bias)``.

    Squared error is ``0.5 * sum / n`` for a linear decoder; otherwise the
    summed binary cross-entropy averaged over rows.
    """
    n = clean.shape[0]
    h = layer.encode(corrupted)
    r = layer.decode(h)
    if layer.linear_decoder:
        loss = 0.5 * float(np.sum((r - clean) ** 2)) / n
    else:
        rc = np.clip(r, 1e-12, 1 - 1e-12)
        loss = -float(np.sum(clean * np.log(rc) + (1 - clean) * np.log(1 - rc))) / n
    dr = (r - clean) / n
    dh = (dr @ layer.weights) * h * (1.0 - h)
    dw = corrupted.T @ dh + dr.T @ h
    return loss, (dw, dh.sum(axis=0), dr.sum(axis=0))


def pretrain_sda_stack(spec: NetSpec, data, config: PretrainConfig, rng: SeededRng) -> List[DaLayer]:
    """Train one denoising autoencoder per hidden layer, bottom-up."""
    _check_stackable(spec)
    x = as_matrix(data, "data")
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"data has {x.shape[1]} columns, spec expects {spec.input_dim}")
    stack = []
    for k, n_hidden in enumerate(spec.hidden_sizes):
        n_visible = x.shape[1]
        r = 4.0 * np.sqrt(6.0 / (n_visible + n_hidden))
        layer = DaLayer((rng.uniform((n_visible, n_hidden)) * 2.0 - 1.0) * r,
                        np.zeros(n_hidden), np.zeros(n_visible),
                        config.corruption_level, linear_decoder=(k == 0))
        lr = config.first_layer_learning_rate if k == 0 else config.learning_rate
        for epoch in range(config.epochs):
            total = 0.0
            for idx in _batches(len(x), config.batch_size, rng):
                clean = x[idx]
                noisy = corrupt_masking(clean, layer.corruption_level, rng)
                loss, (dw, dbh, dbv) = da_loss_and_grads(layer, clean, noisy)
                layer.weights -= lr * dw
                layer.encode_bias -= lr * dbh
                layer.decode_bias -= lr * dbv
                total += loss * len(idx)
            layer.errors.append(total / len(x))
            log.info("sda layer %d epoch %d recon-err %.6f", k, epoch + 1, layer.errors[-1])
        stack.append(layer)
        x = layer.encode(x)
    return stack


def stack_parameters(stack):
    """``(weights, hidden_bias)`` per layer of an RBM or DA stack.

    Plain ``(weights, bias)`` pairs, as returned by ``load_stack``, pass through.
    """
    out = []
    for layer in stack:
        if isinstance(layer, tuple):
            out.append(layer)
        elif isinstance(layer, Rbm):
            out.append((layer.weights, layer.hidden_bias))
        else:
            out.append((layer.weights, layer.encode_bias))
    return out


def network_from_stack(spec: NetSpec, stack, rng: SeededRng) -> Network:
    """Randomly initialise ``spec`` and overwrite its hidden layers from ``stack``."""
    net = init_network(spec, rng)
    params = stack_parameters(stack)
    if len(params) > spec.num_hidden:
        raise ShapeError(f"stack has {len(params)} layers, spec only {spec.num_hidden} hidden layers")
    for layer, (w, b) in zip(net.dense_layers, params):
        if layer.weights.shape != w.shape:
            raise ShapeError(f"stack layer shape {w.shape} does not match {layer.weights.shape}")
        layer.weights[...] = w
        layer.bias[...] = b
    net.version += 1
    return net
