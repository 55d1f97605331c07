"""``sparsevox`` command line: encode, decode, train, eval and synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .codec import Bitstream, check_model, decode_pc, encode_pc
from .errors import (CorruptBitstreamError, ModelMismatchError, PlyError, SparseVoxError,
                     TrainingDiverged, WeightFileError)
from .pc_io import read_ply, save_ply
from .baseline import encode_pc_order0
from .report import EvalReport, EvalRow, evaluate_corpus, read_gpcc_table
from .sparse_nn import NetworkConfig, load_weights, save_weights
from .synth import ALL_KINDS, make_cloud
from .training import TrainConfig, config_dict, make_dataset, metrics_jsonl, train

log = logging.getLogger("sparsevox")

WEIGHTS_ENV = "SPARSEVOX_WEIGHTS"

EXIT_OK = 0
EXIT_ERROR = 1  # I/O and anything unclassified
EXIT_USAGE = 2  # argparse's own code
EXIT_PARSE = 3
EXIT_NO_WEIGHTS = 4
EXIT_BAD_WEIGHTS = 5
EXIT_CORRUPT = 6
EXIT_MISMATCH = 7
EXIT_DIVERGED = 8
EXIT_EMPTY = 9


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------- helpers


def _weights(args):
    path = args.weights or os.environ.get(WEIGHTS_ENV)
    if not path:
        raise CliError(f"no weights given (use --weights or set {WEIGHTS_ENV})", EXIT_NO_WEIGHTS)
    if not Path(path).is_file():
        raise CliError(f"weights file not found: {path}", EXIT_NO_WEIGHTS)
    return load_weights(path)


def _threads(n: int | None):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def _ply_files(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise CliError(f"not a directory: {folder}", EXIT_ERROR)
    files = sorted(folder.glob("*.ply"))
    if not files:
        raise CliError(f"no .ply files in {folder}", EXIT_EMPTY)
    return files


def _read(path, bit_depth):
    return read_ply(path, bit_depth=bit_depth)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------- commands


def cmd_encode(args) -> int:
    weights = _weights(args)
    pc = _read(args.input, args.bit_depth)
    data, stats = encode_pc(pc, weights, args.block_size)
    Path(args.output).write_bytes(data)
    if args.report:
        _, base = encode_pc_order0(pc, args.block_size)
        row = EvalRow(
            name=Path(args.input).stem, n_points=stats.n_points, total_bits=stats.total_bits, bpov=stats.bpov,
            octree_share_pct=100 * stats.octree_share, encode_seconds=stats.seconds,
            decode_seconds=float("nan"), baseline_bpov=base.bpov, gain_pct=100 * (1 - stats.bpov / base.bpov))
        _emit(EvalReport([row]).render(args.report))
    else:
        print(f"{args.input}: {stats.n_points} points, {stats.n_blocks} blocks, {stats.total_bits} bits, "
              f"{stats.bpov:.4f} bpov, octree {100 * stats.octree_share:.2f}%, {stats.seconds:.2f} s")
    return EXIT_OK


def cmd_decode(args) -> int:
    weights = _weights(args)
    data = Path(args.input).read_bytes()
    bs = Bitstream.from_bytes(data)
    check_model(bs, weights)  # refuse before touching the output path
    t0 = time.perf_counter()
    pc = decode_pc(data, weights)
    save_ply(pc, args.output, binary=args.binary)
    print(f"{args.input}: {len(pc)} points decoded in {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    clouds = [_read(p, args.bit_depth) for p in _ply_files(args.corpus)]
    network = NetworkConfig(L=args.mixtures, filters=args.filters, kernel=args.kernel,
                            residual_blocks=args.residual_blocks, d=args.block_size)
    config = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, grad_accumulation_steps=args.accumulation,
        early_stop_patience=args.patience, max_epochs=args.max_epochs,
        validation_fraction=args.validation_fraction, rotation=not args.no_rotation,
        subsampling=not args.no_subsampling, seed=args.seed, time_limit=args.time_limit)
    dataset = make_dataset(clouds, args.block_size, seed=args.seed, validation_fraction=config.validation_fraction)
    log.info("%d training and %d validation blocks", len(dataset.train), len(dataset.validation))
    sink = open(args.metrics, "w") if args.metrics else None
    try:
        def on_epoch(rec):
            line = metrics_jsonl([rec])
            if sink:
                sink.write(line)
                sink.flush()
            else:
                sys.stdout.write(line)

        result = train(dataset, config, network, on_epoch=on_epoch)
    finally:
        if sink:
            sink.close()
    save_weights(result.weights, args.output)
    log.info("best epoch %d, validation %.5f bits/voxel; config %s", result.best_epoch,
             result.best_validation, json.dumps(config_dict(config)))
    print(f"wrote {args.output} (best epoch {result.best_epoch}, "
          f"validation {result.best_validation:.5f} bits/voxel)")
    return EXIT_OK


def cmd_eval(args) -> int:
    weights = _weights(args)
    items = [(p.stem, _read(p, args.bit_depth)) for p in _ply_files(args.corpus)]
    gpcc = read_gpcc_table(args.gpcc) if args.gpcc else None
    report = evaluate_corpus(items, weights, args.block_size, gpcc=gpcc, workers=args.threads or 1)
    fmt = args.report or "json"
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval.{fmt}").write_text(report.render(fmt))
        for path in report.save_figures(out):
            log.info("wrote %s", path)
    _emit(report.render(fmt))
    if not all(r.lossless for r in report.rows):
        raise CliError("decoded cloud differs from the input", EXIT_ERROR)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    kinds = args.shape or ["sphere", "box", "plane", "cylinder", "torus", "blob"]
    depth = args.bit_depth if args.bit_depth is not None else 8
    for k in range(args.count):
        kind = kinds[k % len(kinds)]
        pc = make_cloud(kind, depth, args.points, seed=int(rng.integers(1 << 31)))
        path = out / f"{kind}_{k:03d}.ply"
        save_ply(pc, path, binary=args.binary)
        print(f"{path}: {len(pc)} points")
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys are option names (dest form)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads; for eval also the number of worker processes")
    common.add_argument("--bit-depth", type=int, default=None, help="override the input bit depth")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsevox", description="Learned lossless voxel geometry codec.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def weights_opt(sp):
        sp.add_argument("--weights", default=None, help=f"weight file (default: ${WEIGHTS_ENV})")

    e = sub.add_parser("encode", parents=[common], help="PLY -> .svx")
    e.add_argument("input")
    e.add_argument("output")
    weights_opt(e)
    e.add_argument("--block-size", type=int, default=64)
    e.add_argument("--report", choices=["json", "csv"], default=None)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", parents=[common], help=".svx -> PLY")
    d.add_argument("input")
    d.add_argument("output")
    weights_opt(d)
    d.add_argument("--binary", action="store_true", help="write binary little-endian PLY")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", parents=[common], help="train weights on a folder of PLY files")
    t.add_argument("corpus")
    t.add_argument("output")
    t.add_argument("--block-size", type=int, default=8)
    t.add_argument("--filters", type=int, default=8)
    t.add_argument("--mixtures", type=int, default=2)
    t.add_argument("--kernel", type=int, default=3)
    t.add_argument("--residual-blocks", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--accumulation", type=int, default=16)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--max-epochs", type=int, default=100)
    t.add_argument("--validation-fraction", type=float, default=0.1)
    t.add_argument("--no-rotation", action="store_true")
    t.add_argument("--no-subsampling", action="store_true")
    t.add_argument("--time-limit", type=float, default=None, help="seconds")
    t.add_argument("--metrics", default=None, help="write per-epoch JSON lines here instead of stdout")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", parents=[common], help="bpov report over a folder of PLY files")
    v.add_argument("corpus")
    weights_opt(v)
    v.add_argument("--block-size", type=int, default=64)
    v.add_argument("--report", choices=["json", "csv"], default=None)
    v.add_argument("--out-dir", default=None, help="write the report file and figures here")
    v.add_argument("--gpcc", default=None, help="CSV of name,bpov from an external G-PCC run")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="write procedural test clouds")
    s.add_argument("output_dir")
    s.add_argument("--shape", action="append", choices=list(ALL_KINDS))
    s.add_argument("--count", type=int, default=6)
    s.add_argument("--points", type=int, default=10_000)
    s.add_argument("--binary", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    sp = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sp._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    sp.set_defaults(**values)  # command-line flags still win
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except CliError as exc:
        print(f"sparsevox: {exc}", file=sys.stderr)
        return exc.code
    except PlyError as exc:
        print(f"sparsevox: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except WeightFileError as exc:
        print(f"sparsevox: bad weight file: {exc}", file=sys.stderr)
        return EXIT_BAD_WEIGHTS
    except CorruptBitstreamError as exc:
        print(f"sparsevox: corrupt bitstream: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ModelMismatchError as exc:
        print(f"sparsevox: model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingDiverged as exc:
        print(f"sparsevox: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SparseVoxError, ValueError) as exc:
        print(f"sparsevox: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"sparsevox: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
