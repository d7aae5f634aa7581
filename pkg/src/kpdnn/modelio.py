"""Model persistence, Kaldi-style text export and bottleneck feature extraction.

Native checkpoint layout (little-endian)::

    magic      5 bytes  b"PDNN1"
    version    u32      1
    meta_len   u64
    meta       meta_len bytes of UTF-8 JSON: spec, train state, rng state,
               parameter shapes and free-form "extra" metadata
    params     every parameter array as float64, in Network.parameters() order
    crc32      u32 over all preceding bytes

Kaldi text layout (one component per block, 9 significant digits)::

    <Nnet>
    <AffineTransform> <out> <in>
     [
      w[0,0] ... w[0,in-1]
      ...
      w[out-1,0] ... w[out-1,in-1] ]
     [ b[0] ... b[out-1] ]
    <Sigmoid> <out> <out>
    ...
    <Softmax> <out> <out>
    </Nnet>
"""
import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError, DataError, DomainError, ParseError, UnsupportedExportError
from .finetune import TrainState
from .mathops import ActivationKind
from .network import INFER, NetSpec, Network, build_network, forward, parameter_shapes
from .pfile import (FrameTable, PFileHeader, PFileSource, atomic_write_bytes,
                    stream_write_pfile)

CKPT_MAGIC = b"PDNN1"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<5sIQ")


# ---------------------------------------------------------------------------
# native checkpoints
# ---------------------------------------------------------------------------

def encode_native(net: Network, state=None, rng=None, extra=None) -> bytes:
    params = net.parameters()
    meta = {
        "spec": net.spec.to_dict(),
        "state": None if state is None else state.to_dict(),
        "rng": None if rng is None else rng.get_state(),
        "shapes": [list(p.shape) for p in params],
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_bytes)) + meta_bytes
    body += b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    return body + struct.pack("<I", zlib.crc32(body))


def save_native(net: Network, state, path, rng=None, extra=None):
    atomic_write_bytes(path, [encode_native(net, state, rng, extra)])


def decode_native(blob: bytes):
    """Return ``(network, state, rng_state, extra)``."""
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("checkpoint is truncated")
    magic, version, meta_len = _PREFIX.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a native checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    pos = _PREFIX.size
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        spec = NetSpec.from_dict(meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata unreadable: {exc}") from None
    pos += meta_len
    shapes = [tuple(s) for s in meta["shapes"]]
    if shapes != parameter_shapes(spec):
        raise CheckpointError("parameter shapes do not match the stored spec")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(blob) - 4:
            raise CheckpointError("checkpoint parameter block is truncated")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n // 8, offset=pos)
                      .astype(np.float64).reshape(shape))
        pos += n
    if pos != len(blob) - 4:
        raise CheckpointError("unexpected bytes after the parameter block")
    state = None if meta["state"] is None else TrainState.from_dict(meta["state"])
    return build_network(spec, arrays), state, meta["rng"], meta["extra"]


def load_native(path):
    """Return ``(network, train_state)``; see :func:`load_native_full` for the rest."""
    net, state, _, _ = load_native_full(path)
    return net, state


def load_native_full(path):
    with open(path, "rb") as fh:
        return decode_native(fh.read())


def save_stack(path, input_dim, stack_params, kind, layer_kinds=None, errors=None):
    """Store pre-trained ``(weights, hidden_bias)`` pairs as a headless network."""
    sizes = [input_dim] + [w.shape[1] for w, _ in stack_params]
    spec = NetSpec(tuple(sizes), softmax_output=False)
    net = build_network(spec, [a.copy() for pair in stack_params for a in pair])
    extra = {"stack": kind, "layer_kinds": list(layer_kinds or []), "errors": errors or []}
    save_native(net, None, path, extra=extra)


def load_stack(path):
    net, _, _, extra = load_native_full(path)
    if "stack" not in extra:
        raise CheckpointError(f"{path} is not a pre-trained stack")
    return [(layer.weights, layer.bias) for layer in net.dense_layers], extra


# ---------------------------------------------------------------------------
# Kaldi-style text
# ---------------------------------------------------------------------------

_NONLIN = {ActivationKind.SIGMOID: "<Sigmoid>", ActivationKind.TANH: "<Tanh>"}
_NONLIN_BACK = {v: k for k, v in _NONLIN.items()}


def _fmt(v):
    return "%.9g" % v


def kaldi_text(net: Network) -> str:
    """Render ``net`` in infer mode (dropout scaling folded into the weights)."""
    if net.conv_layers:
        raise UnsupportedExportError("convolution layers have no Kaldi text component")
    if net.spec.maxout_group > 1:
        raise UnsupportedExportError("maxout layers have no Kaldi text component")
    act = net.spec.hidden_activation
    has_hidden = any(not layer.softmax for layer in net.dense_layers)
    if has_hidden and act not in _NONLIN and act is not ActivationKind.IDENTITY:
        raise UnsupportedExportError(f"activation {act.value!r} has no Kaldi text component")
    lines = ["<Nnet>"]
    scale = 1.0
    layers = net.dense_layers
    for k, layer in enumerate(layers):
        w = layer.weights.T * scale
        out_dim, in_dim = w.shape
        lines.append(f"<AffineTransform> {out_dim} {in_dim}")
        rows = [" ".join(_fmt(v) for v in row) for row in w]
        lines.append(" [")
        for i, row in enumerate(rows):
            lines.append("  " + row + (" ]" if i == len(rows) - 1 else ""))
        lines.append(" [ " + " ".join(_fmt(v) for v in layer.bias) + " ]")
        if layer.softmax:
            lines.append(f"<Softmax> {out_dim} {out_dim}")
        else:
            if act in _NONLIN:
                lines.append(f"{_NONLIN[act]} {out_dim} {out_dim}")
            scale = 1.0 - layer.dropout_factor
            if k == len(layers) - 1 and scale != 1.0:
                raise UnsupportedExportError(
                    "a headless network ending in a dropout layer cannot be exported"
                )
    lines.append("</Nnet>")
    return "\n".join(lines) + "\n"


def export_kaldi_text(net: Network, path) -> str:
    text = kaldi_text(net)
    atomic_write_bytes(path, [text.encode("ascii")])
    return text


def parse_kaldi_text(text: str) -> Network:
    """Rebuild a network from :func:`kaldi_text` output."""
    tokens = text.replace("[", " [ ").replace("]", " ] ").split()
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of Kaldi text model")
        pos += 1
        return tokens[pos - 1]

    def take_int():
        tok = take()
        try:
            return int(tok)
        except ValueError:
            raise ParseError(f"expected an integer, got {tok!r}") from None

    def take_vector():
        if take() != "[":
            raise ParseError("expected '['")
        vals = []
        while True:
            tok = take()
            if tok == "]":
                return vals
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"bad number {tok!r}") from None

    if take() != "<Nnet>":
        raise ParseError("Kaldi text model must start with <Nnet>")
    sizes, arrays, acts = [], [], set()
    softmax = False
    while True:
        tok = take()
        if tok == "</Nnet>":
            break
        if softmax:
            raise ParseError("<Softmax> must be the last component")
        if tok == "<AffineTransform>":
            out_dim, in_dim = take_int(), take_int()
            flat = take_vector()
            if len(flat) != out_dim * in_dim:
                raise ParseError(f"affine matrix has {len(flat)} values, expected {out_dim * in_dim}")
            bias = take_vector()
            if len(bias) != out_dim:
                raise ParseError(f"bias has {len(bias)} values, expected {out_dim}")
            if sizes and sizes[-1] != in_dim:
                raise ParseError(f"affine input dim {in_dim} does not chain from {sizes[-1]}")
            if not sizes:
                sizes.append(in_dim)
            sizes.append(out_dim)
            arrays += [np.array(flat).reshape(out_dim, in_dim).T.copy(), np.array(bias)]
        elif tok in _NONLIN_BACK:
            take_int(), take_int()
            acts.add(_NONLIN_BACK[tok])
        elif tok == "<Softmax>":
            take_int(), take_int()
            softmax = True
        else:
            raise ParseError(f"unsupported component {tok}")
    if len(acts) > 1:
        raise ParseError("mixed hidden nonlinearities are not supported")
    if not sizes:
        raise ParseError("model has no affine components")
    act = acts.pop() if acts else ActivationKind.IDENTITY
    return build_network(NetSpec(tuple(sizes), act, softmax_output=softmax), arrays)


def read_kaldi_text(path) -> Network:
    with open(path, "r", encoding="ascii") as fh:
        return parse_kaldi_text(fh.read())


# ---------------------------------------------------------------------------
# bottleneck features
# ---------------------------------------------------------------------------

def truncate_to_bottleneck(net: Network, bottleneck_index=None) -> Network:
    """Copy of ``net`` up to and including hidden layer ``bottleneck_index``.

    The index refers to the position in ``net.spec.layer_sizes``; by default
    the spec's own bottleneck marker is used.
    """
    if bottleneck_index is None:
        bottleneck_index = net.spec.bottleneck_index
    if bottleneck_index is None:
        raise DomainError("network has no bottleneck marker")
    spec = net.spec.truncated(bottleneck_index)
    keep = len(net.conv_layers) + bottleneck_index
    arrays = [p.copy() for layer in net.layers[:keep] for p in layer.params()]
    return build_network(spec, arrays)


def extract_table(extractor: Network, table: FrameTable, batch_size=4096) -> FrameTable:
    if table.feature_dim != extractor.input_dim:
        raise DataError(
            f"input features are {table.feature_dim}-dim, extractor expects {extractor.input_dim}"
        )
    if len(table) == 0:
        return table.with_features(np.zeros((0, extractor.output_dim)))
    out = np.concatenate([forward(extractor, table.features[i:i + batch_size], INFER).posteriors
                          for i in range(0, len(table), batch_size)])
    return table.with_features(out)


def extract_features(extractor: Network, in_pfile, out_pfile, batch_size=4096) -> PFileHeader:
    """Stream ``in_pfile`` through ``extractor`` into ``out_pfile``."""
    source = PFileSource(f"{in_pfile},stream=true")
    hin = source.header
    if hin.feature_dim != extractor.input_dim:
        raise DataError(
            f"{in_pfile} has {hin.feature_dim}-dim features, extractor expects {extractor.input_dim}"
        )
    header = PFileHeader(extractor.output_dim, hin.num_utterances, hin.num_frames, hin.label_present)
    return stream_write_pfile(
        out_pfile, header,
        (extract_table(extractor, p.frames, batch_size) for p in source.partitions(None, shuffle=False)),
    )
