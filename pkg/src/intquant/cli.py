"""``intquant`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Every command that writes files also writes ``<output>.manifest.json`` with
the flags, seed and format versions used.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from intquant import __version__, bench, modelio
from intquant.converter import AddOp, ConversionError, LinearOp, convert, run_inference_batched, verify_correspondence
from intquant.graph import GraphError
from intquant.kernels import ParamsMismatchError, ShapeError
from intquant.simtrain.data import IQDS_VERSION, SYNTHETIC, DatasetFormatError, load_dataset, make_synthetic, save_dataset
from intquant.simtrain.trainer import TrainConfig, TrainingDivergedError, cnn_spec, mlp_spec, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

FORMAT_VERSIONS = {
    "IQDS": IQDS_VERSION,
    "IQF1": modelio.IQF_VERSION,
    "IQM1": modelio.IQM_VERSION,
    "ranges": modelio.RANGES_VERSION,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return vals


def _delay(text: str) -> float:
    if text.lower() in ("none", "inf", "float"):
        return math.inf
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer step or 'none', got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("quant delay must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="intquant", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("make-dataset", help="write a synthetic IQDS dataset", allow_abbrev=False)
    d.add_argument("--kind", choices=sorted(SYNTHETIC), default="spiral")
    d.add_argument("--samples", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--output", required=True)

    t = sub.add_parser("train", help="train a float model with simulated quantization", allow_abbrev=False)
    t.add_argument("--dataset", required=True)
    t.add_argument("--output", required=True, help="IQF1 model path")
    t.add_argument("--ranges-output", help="ranges JSON (default: <output>.ranges.json)")
    t.add_argument("--log", help="training log TSV (default: <output>.log.tsv)")
    t.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    t.add_argument("--hidden", type=_int_list, default=[32, 32], help="MLP hidden sizes, e.g. 32,32")
    t.add_argument("--activation", choices=("relu", "relu6"), default="relu")
    t.add_argument("--filters", type=int, default=8)
    t.add_argument("--bits-weights", type=int, default=8)
    t.add_argument("--bits-activations", type=int, default=8)
    t.add_argument("--quant-delay", type=_delay, default=500, help="steps before activation fake-quant, or 'none'")
    t.add_argument("--ema-decay", type=float, default=0.99)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--lr-decay-steps", type=int, default=None)
    t.add_argument("--lr-decay-factor", type=float, default=0.1)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--eval-interval", type=int, default=250)
    t.add_argument("--eval-fraction", type=float, default=0.2)
    t.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("quantize", help="convert a float model to an IQM1 integer model", allow_abbrev=False)
    q.add_argument("--model", required=True, help="IQF1 model")
    q.add_argument("--ranges", help="ranges JSON (default: <model>.ranges.json)")
    q.add_argument("--output", required=True)

    i = sub.add_parser("infer", help="integer-only inference over a dataset", allow_abbrev=False)
    i.add_argument("--model", required=True, help="IQM1 model")
    i.add_argument("--dataset", required=True)
    i.add_argument("--output", help="predictions TSV (default: stdout)")
    i.add_argument("--threads", type=int, default=1)

    v = sub.add_parser("verify", help="float vs integer correspondence report", allow_abbrev=False)
    v.add_argument("--float-model", required=True)
    v.add_argument("--ranges", help="ranges JSON (default: <float-model>.ranges.json)")
    v.add_argument("--model", required=True, help="IQM1 model")
    v.add_argument("--dataset", required=True)
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--max-divergence", type=int, default=1)
    v.add_argument("--output", help="report TSV (default: stdout)")

    b = sub.add_parser("bench", help="time integer vs float GEMM", allow_abbrev=False)
    b.add_argument("--sizes", type=_int_list, default=list(bench.DEFAULT_SIZES))
    b.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    b.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--output", help="TSV path (default: stdout)")

    sub.add_parser("selftest", help="run the built-in invariant checks", allow_abbrev=False)
    return p


# helpers ----------------------------------------------------------------------


def _existing(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")
    return Path(path)


def _writable(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.parent.is_dir():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def write_manifest(output: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    flags = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in sorted(vars(args).items())}
    body = {
        "command": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "formats": FORMAT_VERSIONS,
        "intquant_version": __version__,
    }
    if extra:
        body.update(extra)
    _sibling(output, ".manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text)


# commands ---------------------------------------------------------------------


def cmd_make_dataset(args) -> int:
    out = _writable(args.output)
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    ds = make_synthetic(args.kind, args.samples, args.seed)
    save_dataset(ds, out)
    write_manifest(out, args)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_path = _existing(args.dataset, "dataset")
    out = _writable(args.output)
    ranges_out = _writable(args.ranges_output) or _sibling(out, ".ranges.json")
    log_out = _writable(args.log) or _sibling(out, ".log.tsv")
    if not 0 <= args.eval_fraction < 1:
        raise UsageError("--eval-fraction must lie in [0, 1)")
    try:
        config = TrainConfig(
            weight_bits=args.bits_weights,
            activation_bits=args.bits_activations,
            quant_delay_steps=args.quant_delay,
            ema_decay=args.ema_decay,
            learning_rate=args.learning_rate,
            lr_decay_steps=args.lr_decay_steps,
            lr_decay_factor=args.lr_decay_factor,
            momentum=args.momentum,
            batch_size=args.batch_size,
            steps=args.steps,
            eval_interval=args.eval_interval,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = load_dataset(data_path)
    tr, ev = ds.split(args.eval_fraction, args.seed) if args.eval_fraction > 0 else (ds, None)
    if args.arch == "mlp":
        spec = mlp_spec(args.hidden, ds.num_classes, args.activation)
    else:
        if len(ds.sample_shape) != 3:
            raise UsageError("--arch cnn needs an image dataset (H, W, C)")
        spec = cnn_spec(ds.num_classes, args.filters)
    result = train(spec, tr, config, eval_dataset=ev, on_log=print)
    modelio.save_float_bundle(result.graph, out, ranges_out)
    log_out.write_text("step\tloss\ttrain_acc\teval_acc\n" + "\n".join(result.log) + "\n")
    write_manifest(out, args, {"ranges_file": ranges_out.name, "log_file": log_out.name})
    return EXIT_OK


def quantize_table(qg) -> str:
    rows = ["op\tkind\trole\tS\tZ\tM\tM0\tn"]
    for i, op in enumerate(qg.ops):
        p = qg.op_params(i)
        if isinstance(op, LinearOp):
            mults = [("out", op.stage.multiplier)]
            kind = op.kind
        elif isinstance(op, AddOp):
            mults = [("x", op.stage.x_multiplier), ("y", op.stage.y_multiplier), ("out", op.stage.out_multiplier)]
            kind = "add"
        else:
            rows.append(f"{i}\t{type(op).__name__[:-2].lower()}\tout\t{p.scale:.9g}\t{p.zero_point}\t-\t-\t-")
            continue
        for role, m in mults:
            rows.append(f"{i}\t{kind}\t{role}\t{p.scale:.9g}\t{p.zero_point}\t{m.to_float():.9g}\t{m.m0_raw}\t{m.shift}")
    return "\n".join(rows) + "\n"


def cmd_quantize(args) -> int:
    model_path = _existing(args.model, "float model")
    ranges_path = _existing(args.ranges or str(_sibling(model_path, ".ranges.json")), "ranges file")
    out = _writable(args.output)
    g = modelio.load_float_bundle(model_path, ranges_path)
    qg = convert(g)
    data = modelio.save_model(qg)
    if modelio.load_model(data) != qg:
        raise DataError("model failed to round-trip through IQM1")
    out.write_bytes(data)
    sys.stdout.write(quantize_table(qg))
    write_manifest(out, args)
    return EXIT_OK


def _load_inputs(qg, ds):
    x = ds.features()
    if tuple(x.shape[1:]) != tuple(qg.input_shape):
        raise DataError(f"dataset sample shape {x.shape[1:]} does not match model input {qg.input_shape}")
    return x


def cmd_infer(args) -> int:
    qg = modelio.load_model_file(_existing(args.model, "model"))
    ds = load_dataset(_existing(args.dataset, "dataset"))
    out = _writable(args.output)
    if args.threads < 1:
        raise UsageError("--threads must be positive")
    x = _load_inputs(qg, ds)
    codes = run_inference_batched(qg, qg.quantize_input(x), threads=args.threads).codes
    pred = np.argmax(codes.reshape(len(x), -1), axis=1)
    acc = float(np.mean(pred == ds.y)) if len(x) else float("nan")
    lines = ["index\tprediction\tlabel"] + [f"{k}\t{int(p)}\t{int(t)}" for k, (p, t) in enumerate(zip(pred, ds.y))]
    _emit("\n".join(lines) + "\n", out)
    print(f"accuracy\t{acc:.6f}", file=sys.stderr if out is None else sys.stdout)
    if out is not None:
        write_manifest(out, args, {"accuracy": acc})
    return EXIT_OK


def cmd_verify(args) -> int:
    fpath = _existing(args.float_model, "float model")
    rpath = _existing(args.ranges or str(_sibling(fpath, ".ranges.json")), "ranges file")
    qg = modelio.load_model_file(_existing(args.model, "model"))
    ds = load_dataset(_existing(args.dataset, "dataset"))
    out = _writable(args.output)
    g = modelio.load_float_bundle(fpath, rpath)
    if modelio.save_model(convert(g)) != modelio.save_model(qg):
        raise DataError("integer model was not converted from this float model and ranges")
    x = _load_inputs(qg, ds)[: args.samples]
    report = verify_correspondence(g, qg, x)
    _emit(report.to_tsv(), out)
    if out is not None:
        write_manifest(out, args)
    if report.max_divergence > args.max_divergence:
        print(f"verification failed: divergence {report.max_divergence} > {args.max_divergence}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _writable(args.output)
    if args.reps < 1 or args.threads < 1 or args.warmup < 0:
        raise UsageError("--reps and --threads must be positive, --warmup non-negative")
    rows = bench.run_bench(args.sizes, args.reps, args.warmup, args.threads, args.seed)
    _emit(bench.to_tsv(rows), out)
    if out is not None:
        write_manifest(out, args)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from intquant.selftest import run_selftest

    failed = 0
    for name, ok, detail in run_selftest():
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}")
        failed += not ok
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "quantize": cmd_quantize,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"intquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DataError,
        DatasetFormatError,
        modelio.ModelFormatError,
        ConversionError,
        GraphError,
        ParamsMismatchError,
        ShapeError,
        TrainingDivergedError,
    ) as exc:
        print(f"intquant: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
