"""Feed-forward acoustic-model networks.

A network is an optional stack of frequency-axis convolution blocks
followed by fully-connected layers.  Hidden fully-connected layers may use
maxout (``maxout_group > 1``) and dropout; the last layer is a softmax over
the target classes unless the network is a truncated feature extractor.

Dropout follows the classic train/test split: during training every hidden
output is multiplied by a Bernoulli(1 - p) mask, at inference it is
multiplied by (1 - p) instead.
"""
import dataclasses
import re
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import ContractError, DomainError, ParseError, ShapeError
from .mathops import (ActivationKind, activation_grad, apply_activation, as_matrix,
                      log_softmax_rows, sample_bernoulli)
from .rng import SeededRng

TRAIN = "train"
INFER = "infer"


@dataclasses.dataclass(frozen=True)
class ConvLayerSpec:
    input_maps: int
    input_band_len: int
    num_filters: int
    filter_width: int
    pool_size: int = 2
    activation: ActivationKind = ActivationKind.SIGMOID

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        for name in ("input_maps", "input_band_len", "num_filters", "filter_width", "pool_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"conv {name} must be >= 1, got {getattr(self, name)}")
        if self.conv_len < 1:
            raise ShapeError(
                f"filter width {self.filter_width} exceeds band length {self.input_band_len}"
            )
        if self.conv_len % self.pool_size:
            raise ShapeError(
                f"conv output length {self.conv_len} (band {self.input_band_len} - width "
                f"{self.filter_width} + 1) is not divisible by pool size {self.pool_size}"
            )

    @property
    def conv_len(self):
        return self.input_band_len - self.filter_width + 1

    @property
    def pooled_len(self):
        return self.conv_len // self.pool_size

    @property
    def input_dim(self):
        return self.input_maps * self.input_band_len

    @property
    def output_dim(self):
        return self.num_filters * self.pooled_len


@dataclasses.dataclass(frozen=True)
class NetSpec:
    """Topology of a network.

    ``layer_sizes`` lists the fully-connected part: its input width, every
    hidden width (post-pooling for maxout) and, when ``softmax_output`` is
    set, the number of targets.  ``bottleneck_index`` indexes into
    ``layer_sizes``.  When ``conv`` is non-empty, ``layer_sizes[0]`` must
    equal the flattened output of the last convolution block.
    """

    layer_sizes: Tuple[int, ...]
    hidden_activation: ActivationKind = ActivationKind.SIGMOID
    maxout_group: int = 1
    dropout_factor: float = 0.0
    bottleneck_index: Optional[int] = None
    conv: Tuple[ConvLayerSpec, ...] = ()
    softmax_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "conv", tuple(self.conv))
        object.__setattr__(self, "hidden_activation", ActivationKind.parse(self.hidden_activation))
        sizes = self.layer_sizes
        if len(sizes) < (2 if self.softmax_output else 1):
            raise ShapeError(f"layer_sizes {sizes} needs an input and an output size")
        if any(s < 1 for s in sizes):
            raise ShapeError(f"layer sizes must be positive, got {sizes}")
        if self.maxout_group < 1:
            raise DomainError(f"maxout group must be >= 1, got {self.maxout_group}")
        if not 0.0 <= self.dropout_factor < 1.0:
            raise DomainError(f"dropout factor must lie in [0, 1), got {self.dropout_factor}")
        if self.bottleneck_index is not None and not 1 <= self.bottleneck_index <= self.num_hidden:
            raise DomainError(
                f"bottleneck index {self.bottleneck_index} is not a hidden layer of {sizes}"
            )
        for a, b in zip(self.conv, self.conv[1:]):
            if b.input_maps != a.num_filters or b.input_band_len != a.pooled_len:
                raise ShapeError(
                    f"conv block expects {b.input_maps}x{b.input_band_len} input but the previous "
                    f"block emits {a.num_filters}x{a.pooled_len}"
                )
        if self.conv and self.conv[-1].output_dim != sizes[0]:
            raise ShapeError(
                f"conv output dim {self.conv[-1].output_dim} does not match first dense size {sizes[0]}"
            )

    @property
    def input_dim(self):
        return self.conv[0].input_dim if self.conv else self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    @property
    def num_hidden(self):
        return len(self.layer_sizes) - (2 if self.softmax_output else 1)

    @property
    def hidden_sizes(self):
        return self.layer_sizes[1:1 + self.num_hidden]

    def truncated(self, index):
        """Spec of the sub-network ending at hidden layer ``index`` (no softmax)."""
        if not 1 <= index <= self.num_hidden:
            raise DomainError(f"layer index {index} is not a hidden layer of {self.layer_sizes}")
        return dataclasses.replace(self, layer_sizes=self.layer_sizes[:index + 1],
                                   bottleneck_index=None, softmax_output=False)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_activation"] = self.hidden_activation.value
        d["layer_sizes"] = list(self.layer_sizes)
        d["conv"] = [dict(c, activation=c["activation"].value) for c in d["conv"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv"] = tuple(ConvLayerSpec(**c) for c in d.get("conv", ()))
        return cls(**d)


def parse_nnet_spec(text, hidden_activation="sigmoid", maxout_group=1, dropout_factor=0.0,
                    bottleneck_index=None, conv=()):
    """Parse a colon-separated topology such as ``"250:1024:1024:1901"``."""
    tokens = str(text).strip().split(":")
    if len(tokens) < 2:
        raise ParseError(f"nnet spec {text!r} needs at least an input and an output size")
    sizes = []
    for pos, tok in enumerate(tokens):
        if not re.fullmatch(r"\s*\d+\s*", tok):
            raise ParseError(f"nnet spec token {pos} ({tok!r}) is not a positive integer")
        if int(tok) == 0:
            raise ParseError(f"nnet spec token {pos} is zero")
        sizes.append(int(tok))
    return NetSpec(tuple(sizes), hidden_activation, int(maxout_group), float(dropout_factor),
                   bottleneck_index, tuple(conv))


def cnn_spec(input_maps, input_dim, hidden_sizes, num_targets, filters=(64, 128), filter_width=5,
             pool_size=2, activation="sigmoid", **kwargs):
    """Chain convolution blocks over ``input_maps`` maps and append dense layers."""
    if input_dim % input_maps:
        raise ShapeError(
            f"feature dim {input_dim} is not divisible into {input_maps} input maps"
        )
    blocks = []
    maps, band = input_maps, input_dim // input_maps
    for nf in filters:
        block = ConvLayerSpec(maps, band, nf, filter_width, pool_size, activation)
        blocks.append(block)
        maps, band = nf, block.pooled_len
    sizes = (blocks[-1].output_dim if blocks else input_dim,) + tuple(hidden_sizes) + (num_targets,)
    return NetSpec(sizes, activation, conv=tuple(blocks), **kwargs)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ConvLayer:
    def __init__(self, spec: ConvLayerSpec, weights, bias):
        self.spec = spec
        self.weights = weights
        self.bias = bias

    def params(self):
        return [self.weights, self.bias]


class DenseLayer:
    def __init__(self, weights, bias, activation, maxout_group=1, dropout_factor=0.0, softmax=False):
        if weights.shape[1] % maxout_group:
            raise ShapeError(
                f"linear width {weights.shape[1]} not divisible by maxout group {maxout_group}"
            )
        self.weights = weights
        self.bias = bias
        self.activation = ActivationKind.parse(activation)
        self.maxout_group = maxout_group
        self.dropout_factor = dropout_factor
        self.softmax = softmax

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1] // self.maxout_group

    def params(self):
        return [self.weights, self.bias]


class Network:
    """Parameter container built from a :class:`NetSpec`.

    ``version`` increases on every parameter update so stale forward caches
    can be detected.
    """

    def __init__(self, spec: NetSpec, conv_layers, dense_layers):
        self.spec = spec
        self.conv_layers: List[ConvLayer] = list(conv_layers)
        self.dense_layers: List[DenseLayer] = list(dense_layers)
        self.version = 0

    @property
    def layers(self):
        return self.conv_layers + self.dense_layers

    @property
    def input_dim(self):
        return self.spec.input_dim

    @property
    def output_dim(self):
        return self.spec.output_dim

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def parameter_names(self):
        names = []
        for i, layer in enumerate(self.layers):
            kind = "conv" if isinstance(layer, ConvLayer) else "dense"
            names += [f"{kind}{i}.weights", f"{kind}{i}.bias"]
        return names

    def set_parameters(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"parameter shape {a.shape} does not match {p.shape}")
            p[...] = a
        self.version += 1

    def apply_update(self, grads, lr):
        """In-place SGD step ``p -= lr * g``."""
        for p, g in zip(self.parameters(), grads):
            p -= lr * g
        self.version += 1

    def copy(self):
        return build_network(self.spec, [p.copy() for p in self.parameters()])


def build_network(spec: NetSpec, arrays):
    """Assemble a network around existing parameter arrays (used by loaders)."""
    arrays = list(arrays)
    conv, dense = [], []
    it = iter(arrays)
    for cs in spec.conv:
        w, b = next(it), next(it)
        if w.shape != (cs.num_filters, cs.input_maps, cs.filter_width) or b.shape != (cs.num_filters,):
            raise ShapeError(f"conv parameter shapes {w.shape}/{b.shape} do not match {cs}")
        conv.append(ConvLayer(cs, w, b))
    n_dense = len(spec.layer_sizes) - 1
    for k in range(n_dense):
        w, b = next(it), next(it)
        is_out = spec.softmax_output and k == n_dense - 1
        g = 1 if is_out else spec.maxout_group
        want = (spec.layer_sizes[k], spec.layer_sizes[k + 1] * g)
        if w.shape != want or b.shape != (want[1],):
            raise ShapeError(f"dense layer {k}: got {w.shape}/{b.shape}, expected {want}")
        dense.append(DenseLayer(
            w, b,
            ActivationKind.IDENTITY if is_out else spec.hidden_activation,
            g,
            0.0 if is_out else spec.dropout_factor,
            softmax=is_out,
        ))
    if next(it, None) is not None:
        raise ShapeError("too many parameter arrays for this spec")
    return Network(spec, conv, dense)


def parameter_shapes(spec: NetSpec):
    shapes = []
    for cs in spec.conv:
        shapes += [(cs.num_filters, cs.input_maps, cs.filter_width), (cs.num_filters,)]
    n_dense = len(spec.layer_sizes) - 1
    for k in range(n_dense):
        g = 1 if (spec.softmax_output and k == n_dense - 1) else spec.maxout_group
        width = spec.layer_sizes[k + 1] * g
        shapes += [(spec.layer_sizes[k], width), (width,)]
    return shapes


def init_network(spec: NetSpec, rng: SeededRng) -> Network:
    """Glorot-uniform weights (range x4 for sigmoid units), zero biases."""
    net = build_network(spec, [np.zeros(shape) for shape in parameter_shapes(spec)])
    for layer in net.layers:
        w = layer.weights
        if w.ndim == 3:
            filters, maps, taps = w.shape
            fan_in, fan_out = maps * taps, filters * taps
            act = layer.spec.activation
        else:
            fan_in, fan_out = w.shape
            act = None if layer.softmax or layer.maxout_group > 1 else layer.activation
        r = np.sqrt(6.0 / (fan_in + fan_out))
        if act is ActivationKind.SIGMOID:
            r *= 4.0
        w[...] = (rng.uniform(w.shape) * 2.0 - 1.0) * r
    return net


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def maxout_pool(linear_out, g):
    """Max over contiguous groups of ``g`` columns; returns ``(pooled, argmax)``."""
    z = as_matrix(linear_out)
    if g < 1 or z.shape[1] % g:
        raise ShapeError(f"width {z.shape[1]} is not divisible by maxout group {g}")
    if g == 1:
        return z.copy(), np.zeros(z.shape, dtype=np.int64)
    return _kernels.group_max(z, g)


def conv1d_freq_forward(inputs, spec: ConvLayerSpec, weights, bias):
    """Convolve along frequency, apply the activation, then max-pool.

    ``inputs`` is ``n x (maps * band)`` (map-major) or ``n x maps x band``.
    Returns ``(pooled[n, filters * pooled_len], activated, argmax)``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[0]
    if x.size != n * spec.input_dim:
        raise ShapeError(
            f"conv input has {x.size // max(n, 1)} values per row, expected "
            f"{spec.input_maps} maps x {spec.input_band_len} bands"
        )
    x = x.reshape(n, spec.input_maps, spec.input_band_len)
    z = _kernels.conv1d_forward(x, weights, bias)
    a = apply_activation(spec.activation, z)
    flat = a.reshape(n, spec.num_filters * spec.conv_len)
    if spec.pool_size == 1:
        pooled, arg = flat.copy(), np.zeros(flat.shape, dtype=np.int64)
    else:
        pooled, arg = _kernels.group_max(flat, spec.pool_size)
    return pooled, a, arg


@dataclasses.dataclass
class ForwardCache:
    """Everything backward() needs from one forward pass."""

    mode: str
    inputs: list
    outputs: list
    aux: list
    masks: list
    posteriors: np.ndarray
    network_id: int
    version: int

    @property
    def activations(self):
        return self.outputs


def forward(net: Network, batch, mode=INFER, rng: Optional[SeededRng] = None,
            masks: Optional[Sequence] = None) -> ForwardCache:
    """Run the network on ``batch`` (rows are examples).

    In train mode dropout masks are drawn from ``rng`` unless ``masks`` (one
    entry per dense layer, ``None`` where unused) is given; passing the
    ``masks`` of an earlier cache replays that pass exactly.
    """
    if mode not in (TRAIN, INFER):
        raise DomainError(f"mode must be {TRAIN!r} or {INFER!r}")
    x = as_matrix(batch, "batch")
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, network expects {net.input_dim}")
    inputs, outputs, aux, used_masks = [], [], [], []
    for layer in net.conv_layers:
        inputs.append(x)
        pooled, activated, arg = conv1d_freq_forward(x, layer.spec, layer.weights, layer.bias)
        outputs.append(pooled)
        aux.append((activated, arg))
        x = pooled
    for k, layer in enumerate(net.dense_layers):
        inputs.append(x)
        z = x @ layer.weights + layer.bias
        if layer.softmax:
            out = z
            aux.append(None)
            used_masks.append(None)
        else:
            if layer.maxout_group > 1:
                z, arg = _kernels.group_max(z, layer.maxout_group)
            else:
                arg = None
            a = apply_activation(layer.activation, z)
            aux.append((a, arg))
            p = layer.dropout_factor
            mask = None
            if p > 0.0:
                if mode == TRAIN:
                    mask = masks[k] if masks is not None else None
                    if mask is None:
                        if rng is None:
                            raise DomainError("train-mode dropout needs an rng")
                        mask = sample_bernoulli(rng, np.full(a.shape, 1.0 - p))
                    out = a * mask
                else:
                    out = a * (1.0 - p)
            else:
                out = a
            used_masks.append(mask)
        outputs.append(out)
        x = out
    if not np.all(np.isfinite(x)):
        raise DomainError("forward pass produced non-finite values")
    if net.spec.softmax_output and net.dense_layers:
        post = np.exp(log_softmax_rows(x))
    else:
        post = x
    return ForwardCache(mode, inputs, outputs, aux, used_masks, post, id(net), net.version)


def predict(net: Network, batch, batch_size=4096):
    """Infer-mode network outputs, computed in chunks."""
    x = as_matrix(batch, "batch")
    if len(x) == 0:
        return np.zeros((0, net.output_dim))
    return np.concatenate(
        [forward(net, x[i:i + batch_size], INFER).posteriors for i in range(0, len(x), batch_size)]
    )


def _target_matrix(targets, n, k):
    t = np.asarray(targets)
    if t.ndim == 1:
        if len(t) != n:
            raise ShapeError(f"{len(t)} labels for {n} rows")
        if len(t) and (t.min() < 0 or t.max() >= k):
            raise DomainError(f"labels must lie in [0, {k})")
        y = np.zeros((n, k))
        y[np.arange(n), t.astype(np.int64)] = 1.0
        return y
    if t.shape != (n, k):
        raise ShapeError(f"target matrix shape {t.shape} does not match ({n}, {k})")
    return t.astype(np.float64)


def cross_entropy(posteriors, targets):
    """Mean cross-entropy between posteriors and labels or target rows."""
    n, k = posteriors.shape
    y = _target_matrix(targets, n, k)
    logp = np.log(np.clip(posteriors, 1e-300, None))
    return float(-(y * logp).sum() / n)


def loss(net: Network, batch, targets, mode=INFER, rng=None, masks=None):
    cache = forward(net, batch, mode, rng, masks)
    return cross_entropy(cache.posteriors, targets)


def backward(net: Network, cache: ForwardCache, targets):
    """Gradients of mean cross-entropy, in ``net.parameters()`` order."""
    if cache.network_id != id(net) or cache.version != net.version:
        raise ContractError("forward cache is stale: the network changed after the forward pass")
    if not (net.spec.softmax_output and net.dense_layers):
        raise ContractError("backward needs a network with a softmax output layer")
    post = cache.posteriors
    n = post.shape[0]
    delta = (post - _target_matrix(targets, n, post.shape[1])) / n
    n_conv = len(net.conv_layers)
    grads = [None] * (2 * len(net.layers))
    for k in range(len(net.dense_layers) - 1, -1, -1):
        layer = net.dense_layers[k]
        li = n_conv + k
        x = cache.inputs[li]
        if layer.softmax:
            dz = delta
        else:
            a, arg = cache.aux[li]
            p = layer.dropout_factor
            if p > 0.0:
                mask = cache.masks[k]
                delta = delta * mask if mask is not None else delta * (1.0 - p)
            dz = delta * activation_grad(layer.activation, a)
            if layer.maxout_group > 1:
                dz = _kernels.group_max_backward(dz, arg, layer.maxout_group)
        grads[2 * li] = x.T @ dz
        grads[2 * li + 1] = dz.sum(axis=0)
        delta = dz @ layer.weights.T
    for li in range(n_conv - 1, -1, -1):
        layer = net.conv_layers[li]
        spec = layer.spec
        activated, arg = cache.aux[li]
        if spec.pool_size == 1:
            da = delta
        else:
            da = _kernels.group_max_backward(delta, arg, spec.pool_size)
        da = da.reshape(activated.shape)
        dz = da * activation_grad(spec.activation, activated)
        x = cache.inputs[li].reshape(n, spec.input_maps, spec.input_band_len)
        dx, dw, db = _kernels.conv1d_backward(x, layer.weights, dz)
        grads[2 * li] = dw
        grads[2 * li + 1] = db
        delta = dx.reshape(n, spec.input_dim)
    return grads
