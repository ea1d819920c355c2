"""Command-line entry point: gendata, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .data import DataError, GazeArrays, generate_synthetic_dataset, load_manifest
from .gradcheck import grad_check
from .gzt import FormatError
from .layers import AttentionConfig, LayerParams
from .model import FUSIONS, GazeModelConfig, init_parameters
from .training import (
    Checkpoint,
    NumericalError,
    TrainConfig,
    evaluate,
    gaze_loss,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

log = logging.getLogger("gazefuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5
REPORT_SUBSETS = ("front180", "front_facing")

# Published full-scale fusion ablation (mean, std in degrees, Front 180).  Context
# only; desk-scale results are never compared against these.
PUBLISHED_FUSION_ABLATION = {
    "random_init": {"none": [10.91, 0.09], "fcn": [10.75, 0.02], "xattn": [10.65, 0.03]},
    "pretrained_vggface2": {"none": [10.02, 0.07], "fcn": [10.01, 0.05], "xattn": [9.94, 0.06]},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _widths(text: str) -> tuple:
    try:
        ws = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be 4 comma-separated ints, got {text!r}") from None
    if len(ws) != 4 or min(ws) < 1:
        raise argparse.ArgumentTypeError(f"widths must be 4 positive ints, got {text!r}")
    return ws


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--widths", type=_widths, default=(16, 32, 64, 128),
                   help="encoder stage widths, e.g. 8,16,32,64 (last = feature dim)")
    p.add_argument("--heads", type=_positive, default=4)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--lr", type=float, default=1e-3)


def _model_config(args, fusion: str, seed: int) -> GazeModelConfig:
    try:
        return GazeModelConfig(fusion=fusion, feature_dim=args.widths[-1], heads=args.heads,
                               face_widths=args.widths, eye_widths=args.widths, seed=seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_config(args, epochs: int, seed: int) -> TrainConfig:
    try:
        return TrainConfig(epochs=epochs, batch_size=args.batch_size, lr=args.lr, seed=seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_arrays(path) -> GazeArrays:
    return GazeArrays.from_manifest(load_manifest(path))


def _fmt(x) -> str:
    return "-" if x is None else repr(float(x))


# ---------------------------------------------------------------- gendata

def cmd_gendata(args) -> int:
    manifest = generate_synthetic_dataset(args.out, args.count, args.seed, args.split)
    print(f"{Path(args.out) / 'manifest.txt'}\t{len(manifest)}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    data = _load_arrays(args.data)
    cfg = _model_config(args, args.fusion, args.seed)
    tcfg = _train_config(args, args.epochs, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_parameters(cfg)
    lines = []

    def on_epoch(epoch, res):
        lines.append(f"{epoch}\t{res.mean_loss:.9g}")
        log.info("epoch %d\tloss %.6f", epoch, res.mean_loss)

    state = train(model, data, tcfg, on_epoch=on_epoch)
    (out / "loss.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint.gzck", Checkpoint(model, tcfg.epochs, state, tcfg))
    print(f"{out / 'checkpoint.gzck'}\t{lines[-1].split(chr(9))[1]}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def load_predictor(ckpt_path):
    """Callable mapping a batch to predictions, built from a checkpoint file."""
    ck = load_checkpoint(ckpt_path)
    return ck.model


def format_eval(metrics) -> str:
    return "".join(f"{m.subset}\t{m.count}\t{_fmt(m.mean_error)}\n" for m in metrics.values())


def cmd_eval(args) -> int:
    subsets = [s for s in args.subset.split(",") if s]
    bad = [s for s in subsets if s not in ("all", "front180", "front_facing")]
    if bad or not subsets:
        raise UsageError(f"unknown subset(s) {bad}; choose from all, front180, front_facing")
    data = _load_arrays(args.data)
    model = load_predictor(args.ckpt)
    text = format_eval(evaluate(model, data, subsets))
    sys.stdout.write(text)
    report = Path(args.report) if args.report else Path(str(args.ckpt) + ".eval.tsv")
    report.write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _run_arm(job):
    data_root, fusion, seed, epochs, widths, heads, batch_size, lr = job
    train_data = _load_arrays(Path(data_root) / "train")
    test_data = _load_arrays(Path(data_root) / "test")
    cfg = GazeModelConfig(fusion=fusion, feature_dim=widths[-1], heads=heads,
                          face_widths=widths, eye_widths=widths, seed=seed)
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    model = init_parameters(cfg)
    entry = {"type": "seed", "arm": fusion, "seed": seed}
    try:
        train(model, train_data, tcfg)
        metrics = evaluate(model, test_data, ("all",) + REPORT_SUBSETS)
        if not np.all(np.isfinite(predict(model, test_data))):
            raise NumericalError("non-finite test predictions")
    except NumericalError as e:
        entry.update(status="failed", error=str(e))
        return entry
    entry["status"] = "ok"
    for name, m in metrics.items():
        entry[name] = m.mean_error
        entry[f"{name}_count"] = m.count
    return entry


def summarize_arm(fusion: str, entries: list) -> dict:
    ok = [e for e in entries if e["status"] == "ok"]
    arm = {"type": "arm", "arm": fusion, "seeds": [e["seed"] for e in entries]}
    if len(ok) != len(entries):
        arm["status"] = "failed"
        return arm
    arm["status"] = "ok"
    arm["mean"] = {}
    arm["std"] = {}
    for subset in REPORT_SUBSETS:
        vals = [e[subset] for e in ok if e[subset] is not None]
        arm["mean"][subset] = statistics.fmean(vals) if vals else None
        arm["std"][subset] = statistics.stdev(vals) if len(vals) >= 2 else None
    return arm


def dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_report(entries: list, seeds: list, epochs: int, widths, heads: int) -> str:
    header = {
        "type": "header",
        "std": "sample standard deviation (n-1) over seeds",
        "seeds": seeds,
        "epochs": epochs,
        "widths": list(widths),
        "heads": heads,
        "subsets": list(REPORT_SUBSETS),
        "seed_protocol": "dataset fixed; model and training seeds vary per run",
    }
    context = {
        "type": "published_reference",
        "note": "full-scale published fusion ablation (degrees, mean and std); context only, not compared",
        "values": PUBLISHED_FUSION_ABLATION,
    }
    lines = [dump_line(header), dump_line(context)]
    ordered = sorted(entries, key=lambda e: (FUSIONS.index(e["arm"]), e["seed"]))
    for fusion in FUSIONS:
        arm_entries = [e for e in ordered if e["arm"] == fusion]
        lines += [dump_line(e) for e in arm_entries]
        lines.append(dump_line(summarize_arm(fusion, arm_entries)))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def cmd_ablate(args) -> int:
    root = Path(args.data)
    for split in ("train", "test"):
        load_manifest(root / split)
    seeds = list(range(1, args.seeds + 1))
    jobs = [(str(root), f, s, args.epochs, tuple(args.widths), args.heads, args.batch_size, args.lr)
            for f in FUSIONS for s in seeds]
    _model_config(args, "xattn", 0)
    t0 = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            entries = list(pool.map(_run_arm, jobs))
    else:
        entries = []
        for job in jobs:
            entries.append(_run_arm(job))
            log.info("finished %s seed %d (%.0fs)", job[1], job[2], time.perf_counter() - t0)
    text = build_report(entries, seeds, args.epochs, args.widths, args.heads)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    failed = any(e["status"] != "ok" for e in entries)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- gradcheck

def _randomize(p: LayerParams, rng: np.random.Generator) -> LayerParams:
    out = p.astype(np.float64)
    for name, t in out.params.items():
        base = 1.0 if name.endswith(".gamma") else 0.0
        t.data = base + rng.normal(0.0, 0.5, size=t.shape)
    return out


def _flipped_bias_add(x: T.Tensor, b: T.Tensor) -> T.Tensor:
    """``x + b`` whose bias gradient has the wrong sign (negative control)."""
    def bw(g):
        return g, -T.unbroadcast(g, b.shape)

    return T._make("add", x.data + b.data, (x, b), bw)


def gradcheck_cases(inject_bug: bool = False):
    """Yield ``(name, f, tensors)`` for every block; f maps tensors to a scalar."""
    rng = np.random.default_rng(0)

    def weights(shape):
        return T.Tensor(rng.normal(size=shape))

    def inputs(shape, scale=1.0):
        # keep inputs away from relu kinks
        x = rng.normal(size=shape) * scale
        return np.where(np.abs(x) < 1e-3, 1e-3, x)

    def case(name, build, forward, x_shape):
        p = LayerParams()
        build(p)
        p = _randomize(p, rng)
        names = sorted(p.params)
        x = T.Tensor(inputs(x_shape))
        probe = weights(forward(x, p).shape)

        def f(x_, *ps):
            q = LayerParams(dict(zip(names, ps)), p.buffers)
            return (forward(x_, q) * probe).sum()

        return name, f, [x] + [p[k] for k in names]

    def lin_forward(x, p):
        if inject_bug:
            return _flipped_bias_add(T.matmul(x, p["lin.w"]), p["lin.b"])
        return L.linear(x, p, "lin")

    yield case("linear", lambda p: L.add_linear(p, "lin", 5, 4, 0), lin_forward, (3, 5))
    yield case("conv_block", lambda p: L.add_conv_block(p, "cb", 3, 4, 3, 0),
               lambda x, p: L.conv_block(x, p, "cb", stride=1, training=True), (2, 5, 5, 3))
    yield case("residual_block", lambda p: L.add_residual_block(p, "rb", 3, 4, 2, 0),
               lambda x, p: L.residual_block(x, p, "rb", stride=2, training=True), (2, 6, 6, 3))
    yield case("multi_branch_block", lambda p: L.add_multi_branch_block(p, "mb", 4, 0),
               lambda x, p: L.multi_branch_block(x, p, "mb", training=True), (2, 4, 4, 4))
    yield case("layer_norm", lambda p: L.add_layer_norm(p, "ln", 6),
               lambda x, p: L.layer_norm(x, p, "ln"), (2, 3, 6))
    acfg = AttentionConfig(8, 2)
    kv = T.Tensor(inputs((2, 5, 8)))
    name, f, ts = case("cross_attention", lambda p: L.add_cross_attention(p, "xa", acfg, 0),
                       lambda x, p: L.cross_attention(x, kv, acfg, p, "xa"), (2, 3, 8))
    yield name, f, ts + [kv]
    eye = T.Tensor(inputs((3, 6)))
    name, f, ts = case("fcn_fusion", lambda p: L.add_fcn_fusion(p, "fc", 6, 0),
                       lambda x, p: L.fcn_fusion(x, eye, p, "fc"), (3, 6))
    yield name, f, ts + [eye]
    yield case("mlp_head", lambda p: L.add_mlp_head(p, "hd", 6, 0),
               lambda x, p: L.mlp_head(x, p, "hd"), (3, 6))
    truth = rng.normal(size=(4, 3))
    truth /= np.linalg.norm(truth, axis=1, keepdims=True)
    yield "gaze_loss", (lambda pred: gaze_loss(pred, truth)), [T.Tensor(inputs((4, 3)))]


def run_gradcheck(inject_bug: bool = False) -> list:
    results = []
    for name, f, tensors in gradcheck_cases(inject_bug):
        results.append((name, grad_check(f, tensors)))
    return results


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.inject_bug)
    for name, err in results:
        print(f"{name}\t{err:.3e}")
    return EXIT_OK if all(err < GRADCHECK_TOL for _, err in results) else EXIT_NUMERIC


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazefuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gendata", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--fusion", choices=FUSIONS, required=True)
    p.add_argument("--epochs", type=_positive, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--subset", default="all,front180,front_facing")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="fusion ablation over seeds")
    p.add_argument("--data", required=True, help="directory with train/ and test/ datasets")
    p.add_argument("--seeds", type=_positive, required=True)
    p.add_argument("--epochs", type=_positive, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=_positive, default=1)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every block")
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"gazefuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as e:
        print(f"gazefuse: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"gazefuse: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"gazefuse: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
