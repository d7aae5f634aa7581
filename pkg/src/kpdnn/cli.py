"""``kpdnn`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training failure.
"""
import argparse
import logging
import os
import sys

import numpy as np

from .errors import DataError, DomainError, KpdnnError, TrainingError, UnsupportedExportError
from .finetune import fine_tune, parse_lrate_spec
from .mathops import ActivationKind
from .modelio import (export_kaldi_text, extract_table, load_native, load_native_full, load_stack,
                      read_kaldi_text, save_native, save_stack, truncate_to_bottleneck)
from .network import NetSpec, cnn_spec, init_network, parse_nnet_spec
from .pfile import (PFileSource, atomic_write_bytes, from_text, parse_data_spec, read_header,
                    read_pfile, splice, to_text, write_pfile)
from .pretrain import (PretrainConfig, network_from_stack, pretrain_rbm_stack, pretrain_sda_stack,
                       stack_parameters)
from .rng import SeededRng
from .synth import gen_synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3
WDIR_ENV = "KPDNN_WDIR"
STACK_FILE = "pretrain.stack"
CKPT_FILE = "nnet.ckpt"
LOG_FILE = "train.log"

log = logging.getLogger("kpdnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _wdir(args):
    wdir = args.wdir or os.environ.get(WDIR_ENV) or "."
    os.makedirs(wdir, exist_ok=True)
    return wdir


class _Emitter:
    """Print to stdout and append to ``<wdir>/train.log``."""

    def __init__(self, path):
        self.path = path

    def __call__(self, line):
        print(line, flush=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def _add_common(p, nnet_required=True):
    p.add_argument("--nnet-spec", required=nnet_required,
                   help='colon-separated layer sizes, e.g. "250:1024:1024:1901"')
    p.add_argument("--wdir", help=f"work directory (default ${WDIR_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--activation", default="sigmoid",
                   help="sigmoid | tanh | rectifier | identity")


def _add_finetune(p):
    _add_common(p)
    p.add_argument("--train-data", required=True, help='"file.pfile[,partition=600m][,random=true][,stream=true]"')
    p.add_argument("--valid-data", required=True)
    p.add_argument("--lrate", "--lrte", dest="lrate", default="D:0.08:0.5:0.05,0.05:15")
    p.add_argument("--output-file", required=True)
    p.add_argument("--output-format", choices=("native", "kaldi"), default="native")
    p.add_argument("--dropout-factor", type=float, default=0.0)
    p.add_argument("--ptr-file", help=f"pre-trained stack (default <wdir>/{STACK_FILE} if present)")
    p.add_argument("--no-pretrain", action="store_true", help="ignore any pre-trained stack")
    p.add_argument("--resume", action="store_true", help=f"continue from <wdir>/{CKPT_FILE}")


def _train(args, spec: NetSpec):
    wdir = _wdir(args)
    schedule = parse_lrate_spec(args.lrate)
    if args.output_format == "kaldi":
        if spec.conv:
            raise UnsupportedExportError("Kaldi text export does not support convolution layers")
        if spec.maxout_group > 1:
            raise UnsupportedExportError("Kaldi text export does not support maxout layers")
        if spec.num_hidden and spec.hidden_activation is ActivationKind.RECTIFIER:
            raise UnsupportedExportError("Kaldi text export does not support rectifier units")
    train = PFileSource(parse_data_spec(args.train_data))
    valid = PFileSource(parse_data_spec(args.valid_data))
    for name, src in (("train", train), ("valid", valid)):
        if src.header.feature_dim != spec.input_dim:
            raise DataError(
                f"{name} data is {src.header.feature_dim}-dim, network input is {spec.input_dim}"
            )
    ckpt = os.path.join(wdir, CKPT_FILE)
    state = None
    if args.resume and os.path.exists(ckpt):
        net, state, rng_state, _ = load_native_full(ckpt)
        if net.spec != spec:
            raise DataError(f"{ckpt} was trained with a different topology")
        rng = SeededRng.from_state(rng_state)
        log.info("resuming from %s at epoch %d", ckpt, state.epoch)
    else:
        rng = SeededRng(args.seed)
        ptr = args.ptr_file or os.path.join(wdir, STACK_FILE)
        if not args.no_pretrain and not spec.conv and os.path.exists(ptr):
            params, _ = load_stack(ptr)
            net = network_from_stack(spec, params, rng)
            log.info("initialised %d hidden layers from %s", len(params), ptr)
        else:
            net = init_network(spec, rng)
    emit = _Emitter(os.path.join(wdir, LOG_FILE))

    def checkpoint(net, state, stats):
        save_native(net, state, ckpt, rng=rng)

    state = fine_tune(net, train, valid, schedule, rng, args.batch_size, state=state,
                      on_epoch=checkpoint, emit=emit)
    out = args.output_file
    if args.output_format == "kaldi":
        export_kaldi_text(net, out)
        save_native(net, state, os.path.join(wdir, "final.ckpt"), rng=rng)
        read_kaldi_text(out)
    else:
        save_native(net, state, out, rng=rng)
        load_native(out)
    return EXIT_OK


def cmd_run_dnn(args):
    spec = parse_nnet_spec(args.nnet_spec, args.activation, args.maxout_group,
                           args.dropout_factor, args.bottleneck_index)
    return _train(args, spec)


def cmd_run_cnn(args):
    sizes = parse_nnet_spec(args.nnet_spec).layer_sizes
    filters = tuple(int(f) for f in args.conv_filters.split(","))
    spec = cnn_spec(args.input_maps, sizes[0], sizes[1:-1], sizes[-1], filters=filters,
                    filter_width=args.filter_width, pool_size=args.pool_size,
                    activation=args.activation, dropout_factor=args.dropout_factor)
    return _train(args, spec)


def cmd_pretrain(args, mode=None):
    mode = mode or args.mode
    wdir = _wdir(args)
    spec = parse_nnet_spec(args.nnet_spec, args.activation)
    _, table = read_pfile(parse_data_spec(args.train_data).path)
    if table.feature_dim != spec.input_dim:
        raise DataError(f"train data is {table.feature_dim}-dim, network input is {spec.input_dim}")
    x = table.features
    if args.standardize:
        std = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    config = PretrainConfig(args.epochs, args.lr, args.first_layer_lr, args.batch_size,
                            args.corruption)
    rng = SeededRng(args.seed)
    if mode == "rbm":
        stack = pretrain_rbm_stack(spec, x, config, rng)
        kinds = [r.kind.value for r in stack]
    else:
        stack = pretrain_sda_stack(spec, x, config, rng)
        kinds = ["da"] * len(stack)
    for k, layer in enumerate(stack):
        for e, err in enumerate(layer.errors, start=1):
            print(f"layer {k} epoch {e} recon-err {err:.6f}")
    out = args.output_file or os.path.join(wdir, STACK_FILE)
    save_stack(out, spec.input_dim, stack_parameters(stack), mode, kinds,
               [list(layer.errors) for layer in stack])
    load_stack(out)
    print(f"stack {mode} layers={len(stack)} kinds={','.join(kinds) or '-'}")
    return EXIT_OK


def _check_written(path, header):
    if read_header(path) != header:
        raise DataError(f"{path}: header read back does not match what was written")


def cmd_extract_bnf(args):
    net, _ = load_native(args.model)
    index = args.bottleneck_index if args.bottleneck_index is not None else net.spec.bottleneck_index
    if index is None:
        raise DomainError(f"{args.model} has no bottleneck marker; pass --bottleneck-index")
    extractor = truncate_to_bottleneck(net, index)
    _, table = read_pfile(args.data)
    out = extract_table(extractor, table, args.batch_size)
    if args.splice:
        out = splice(out, args.splice)
    header = write_pfile(out, args.output_file)
    _check_written(args.output_file, header)
    print(f"frames={header.num_frames} dim={header.feature_dim}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# data utilities
# ---------------------------------------------------------------------------

def cmd_pfile(args):
    if args.pfile_command == "info":
        h = read_header(args.file)
        read_pfile(args.file)
        print(f"utterances={h.num_utterances} frames={h.num_frames} dim={h.feature_dim}")
    elif args.pfile_command == "to-text":
        _, table = read_pfile(args.file)
        text = to_text(table)
        if args.output:
            atomic_write_bytes(args.output, [text.encode("utf-8")])
        else:
            sys.stdout.write(text)
    elif args.pfile_command == "from-text":
        with open(args.file, encoding="utf-8") as fh:
            table = from_text(fh.read())
        h = write_pfile(table, args.output, table.feature_dim)
        _check_written(args.output, h)
        print(f"utterances={h.num_utterances} frames={h.num_frames} dim={h.feature_dim}")
    elif args.pfile_command == "splice":
        _, table = read_pfile(args.file)
        h = write_pfile(splice(table, args.context), args.output)
        _check_written(args.output, h)
        print(f"dim={h.feature_dim}")
    return EXIT_OK


def cmd_gen_synth(args):
    table = gen_synth(args.classes, args.dim, args.frames_per_utt, args.utterances, args.seed,
                      args.separation, args.means_seed)
    h = write_pfile(table, args.out)
    _check_written(args.out, h)
    print(f"utterances={h.num_utterances} frames={h.num_frames} dim={h.feature_dim} classes={args.classes}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="kpdnn", description="DNN acoustic-model training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("run-dnn", help="fine-tune a DNN with SGD")
    _add_finetune(q)
    q.add_argument("--maxout-group", type=int, default=1)
    q.add_argument("--bottleneck-index", type=int,
                   help="position in --nnet-spec of the bottleneck layer (DBNF nets)")
    q.set_defaults(func=cmd_run_dnn)

    q = sub.add_parser("run-cnn", help="fine-tune a frequency-convolution CNN")
    _add_finetune(q)
    q.add_argument("--input-maps", type=int, default=11)
    q.add_argument("--conv-filters", default="64,128", help="filters per conv layer")
    q.add_argument("--filter-width", type=int, default=5)
    q.add_argument("--pool-size", type=int, default=2)
    q.set_defaults(func=cmd_run_cnn)

    def add_pretrain(q):
        _add_common(q)
        q.set_defaults(batch_size=128)
        q.add_argument("--train-data", required=True)
        q.add_argument("--epochs", type=int, default=10)
        q.add_argument("--lr", type=float, default=0.08)
        q.add_argument("--first-layer-lr", type=float, default=0.005)
        q.add_argument("--corruption", type=float, default=0.2)
        q.add_argument("--standardize", action="store_true",
                       help="z-score the features before pre-training")
        q.add_argument("--output-file", help=f"default <wdir>/{STACK_FILE}")

    q = sub.add_parser("pretrain", help="greedy layer-wise pre-training")
    add_pretrain(q)
    q.add_argument("--mode", choices=("rbm", "sda"), required=True)
    q.set_defaults(func=cmd_pretrain)
    q = sub.add_parser("run-rbm", help="pretrain --mode rbm")
    add_pretrain(q)
    q.set_defaults(func=lambda a: cmd_pretrain(a, "rbm"))
    q = sub.add_parser("run-sda", help="pretrain --mode sda")
    add_pretrain(q)
    q.set_defaults(func=lambda a: cmd_pretrain(a, "sda"))

    q = sub.add_parser("extract-bnf", help="bottleneck features from a trained DBNF model")
    q.add_argument("--model", required=True, help="native checkpoint")
    q.add_argument("--data", required=True, help="input PFile")
    q.add_argument("--output-file", required=True)
    q.add_argument("--splice", type=int, default=0, help="context frames on each side")
    q.add_argument("--bottleneck-index", type=int)
    q.add_argument("--batch-size", type=int, default=4096)
    q.set_defaults(func=cmd_extract_bnf)

    q = sub.add_parser("pfile", help="PFile utilities")
    psub = q.add_subparsers(dest="pfile_command", required=True, parser_class=_Parser)
    r = psub.add_parser("info")
    r.add_argument("file")
    r = psub.add_parser("to-text")
    r.add_argument("file")
    r.add_argument("-o", "--output")
    r = psub.add_parser("from-text")
    r.add_argument("file")
    r.add_argument("-o", "--output", required=True)
    r = psub.add_parser("splice")
    r.add_argument("file")
    r.add_argument("-c", "--context", type=int, required=True)
    r.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_pfile)

    q = sub.add_parser("gen-synth", help="write a synthetic labelled corpus")
    q.add_argument("--classes", type=int, required=True)
    q.add_argument("--dim", type=int, required=True)
    q.add_argument("--frames-per-utt", type=int, default=50)
    q.add_argument("--utterances", type=int, default=100)
    q.add_argument("--separation", type=float, default=3.0,
                   help="class-mean distance from the centroid, in noise std units")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--means-seed", type=int, default=0,
                   help="seed of the class layout (share it between train and valid)")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"kpdnn: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (KpdnnError, OSError) as exc:
        print(f"kpdnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
