"""Command-line entry point.

Subcommands cover the full experiment loop: train a model, evaluate it
clean or under injected bit errors, sweep accuracy over error rates,
compute the tolerance and importance metrics, certify the flip-safety
bound, and render report figures from previous run outputs.

Every run writes a manifest.json capturing the subcommand and flags;
re-running with the same manifest reproduces all outputs byte for byte
(no timestamps, all randomness seeded).

Exit codes: 0 success, 1 usage error, 2 data/input error, 3 a
verification witness was found.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, dataio, metrics, oracle, report
from .errors import BittolError

log = logging.getLogger("bittol")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_WITNESS = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code remapped from 2 to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_data_args(p: _Parser, with_train: bool = False):
    p.add_argument(
        "--data",
        choices=("fashion", "blobs", "idx", "cifar"),
        default="fashion",
        help="dataset family (fashion falls back to a synthetic stand-in "
        "unless --data-dir or BITTOL_FASHION_DIR points at the IDX files)",
    )
    p.add_argument("--data-dir", help="directory holding the dataset files")
    p.add_argument("--test-images", help="IDX image file for the test split (--data idx)")
    p.add_argument("--test-labels", help="IDX label file for the test split (--data idx)")
    p.add_argument("--limit-test", type=int, default=0, help="cap test samples (0 = all)")
    if with_train:
        p.add_argument("--train-images", help="IDX image file for the train split (--data idx)")
        p.add_argument("--train-labels", help="IDX label file for the train split (--data idx)")
        p.add_argument("--limit-train", type=int, default=0, help="cap train samples (0 = all)")


def _resolve_data(args, split: str) -> dataio.Dataset:
    if args.data == "fashion":
        ds = dataio.load_fashion(split, args.data_dir)
    elif args.data == "blobs":
        count = 4000 if split == "train" else 1000
        seed = 2001 if split == "train" else 2002
        ds = dataio.synth_blobs(10, count, (1, 28, 28), separation=3.0, seed=seed,
                                noise=20.0, split=split, center_seed=2000)
    elif args.data == "cifar":
        if not args.data_dir:
            raise dataio.DataFormatError("--data cifar requires --data-dir")
        if split == "train":
            paths = [os.path.join(args.data_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
        else:
            paths = [os.path.join(args.data_dir, "test_batch.bin")]
        ds = dataio.load_cifar10_bin(paths, split=split)
    else:  # idx
        images = getattr(args, f"{split}_images", None)
        labels = getattr(args, f"{split}_labels", None)
        if not images or not labels:
            raise dataio.DataFormatError(f"--data idx requires --{split}-images/--{split}-labels")
        ds = dataio.load_idx(images, labels, split=split)
    limit = getattr(args, f"limit_{split}", 0)
    if limit:
        ds = ds.subset(limit)
    return ds


def _write_manifest(out_dir: str, args):
    flags = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("func",) and not callable(v)
    }
    payload = {"tool": "bittol", "version": __version__, "flags": flags}
    dataio.write_json(os.path.join(out_dir, "manifest.json"), payload)


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _parse_float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise BittolError(f"cannot parse numeric list {text!r}") from None


def _parse_int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise BittolError(f"cannot parse integer list {text!r}") from None


def _arch_type(text: str) -> str:
    """Validate the architecture flag at parse time (a usage error, not data)."""
    from .model import parse_arch

    try:
        parse_arch(text)
    except BittolError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from . import trainer  # torch import deferred to the one command that needs it

    out = _ensure_out(args.out)
    train_ds = _resolve_data(args, "train")
    test_ds = _resolve_data(args, "test")
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_halve_every=args.lr_halve_every,
        ber_train=args.ber_train,
        seed=args.seed,
    )
    latent = trainer.LatentModel(args.arch, train_ds.input_shape, z_max=args.z, seed=args.seed)
    model, history = trainer.train(latent, train_ds, cfg, test_ds)
    dataio.save_model(os.path.join(out, "model.btol"), model)
    dataio.write_csv(
        os.path.join(out, "train_log.csv"),
        ["epoch", "lr", "train_loss", "train_acc", "test_acc"],
        [e.row() for e in history],
    )
    _write_manifest(out, args)
    final_acc = metrics.accuracy(model, test_ds.images, test_ds.labels)
    print(f"trained {args.arch}: exported test accuracy {final_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = dataio.load_model(args.model)
    ds = _resolve_data(args, "test")
    clean = metrics.accuracy(model, ds.images, ds.labels)
    result = {"model": args.model, "clean_accuracy": clean, "samples": len(ds)}
    if args.ber is not None:
        mean, per_trial = metrics.accuracy_under_ber(
            model, ds.images, ds.labels, args.ber, trials=args.trials, seed=args.seed
        )
        result["ber"] = args.ber
        result["ber_accuracy_mean"] = mean
        result["ber_accuracy_trials"] = per_trial
        print(f"accuracy {clean:.4f} clean, {mean:.4f} at ber {args.ber}")
    else:
        print(f"accuracy {clean:.4f} clean")
    if args.out:
        out = _ensure_out(args.out)
        dataio.write_json(os.path.join(out, "eval.json"), result)
        _write_manifest(out, args)
    return EXIT_OK


def cmd_sweep_ber(args) -> int:
    model = dataio.load_model(args.model)
    ds = _resolve_data(args, "test")
    bers = _parse_float_list(args.bers)
    out = _ensure_out(args.out)
    rows = []
    summary = []
    for ber in bers:
        mean, per_trial = metrics.accuracy_under_ber(
            model, ds.images, ds.labels, ber, trials=args.trials, seed=args.seed
        )
        for trial, acc in enumerate(per_trial):
            rows.append([f"{ber:g}", trial, f"{acc:.6f}"])
        summary.append([f"{ber:g}", f"{mean:.6f}", args.trials])
        log.info("ber %g: mean accuracy %.4f over %d trials", ber, mean, args.trials)
    dataio.write_csv(os.path.join(out, "sweep.csv"), ["ber", "trial", "accuracy"], rows)
    dataio.write_csv(
        os.path.join(out, "sweep_summary.csv"), ["ber", "mean_accuracy", "trials"], summary
    )
    _write_manifest(out, args)
    print(f"swept {len(bers)} error rates x {args.trials} trials -> {out}/sweep.csv")
    return EXIT_OK


def _write_tolerance(out: str, rep):
    dataio.write_json(os.path.join(out, "tolerance.json"), dataio.tolerance_payload(rep))
    header = [f"T_b{b}" for b in rep.grid] + ["t_bar", "n_samples", "n_neurons"]
    row = [f"{v:.6f}" for v in rep.per_b] + [f"{rep.t_bar:.6f}", rep.n_samples, rep.n_neurons]
    dataio.write_csv(os.path.join(out, "tolerance.csv"), header, [row])


def _write_importance(out: str, rep):
    dataio.write_json(os.path.join(out, "importance.json"), dataio.importance_payload(rep))
    dataio.write_csv(
        os.path.join(out, "importance.csv"),
        ["pi_mean", "variance", "clean_accuracy", "n_neurons"],
        [[f"{rep.pi_mean:.8f}", f"{rep.variance:.10f}", f"{rep.clean_accuracy:.6f}", len(rep.pi)]],
    )


def cmd_metrics(args) -> int:
    model = dataio.load_model(args.model)
    ds = _resolve_data(args, "test")
    out = _ensure_out(args.out)
    grid = metrics.BGrid(tuple(_parse_int_list(args.grid)))
    tol = metrics.dataset_tolerance(model, ds.images, grid)
    _write_tolerance(out, tol)
    line = " ".join(f"T^{b}={v:.4f}" for b, v in zip(tol.grid, tol.per_b))
    print(f"tolerance: {line} mean={tol.t_bar:.4f}")
    if not args.skip_importance:
        imp = metrics.neuron_importance(model, ds.images, ds.labels, flip_scope=args.flip_scope)
        _write_importance(out, imp)
        print(
            f"importance: mean={imp.pi_mean:.6f} variance={imp.variance:.8f} "
            f"clean={imp.clean_accuracy:.4f} ({len(imp.pi)} neurons)"
        )
    _write_manifest(out, args)
    return EXIT_OK


def cmd_importance(args) -> int:
    model = dataio.load_model(args.model)
    ds = _resolve_data(args, "test")
    out = _ensure_out(args.out)
    imp = metrics.neuron_importance(model, ds.images, ds.labels, flip_scope=args.flip_scope)
    _write_importance(out, imp)
    _write_manifest(out, args)
    print(
        f"importance: mean={imp.pi_mean:.6f} variance={imp.variance:.8f} "
        f"clean={imp.clean_accuracy:.4f} ({len(imp.pi)} neurons)"
    )
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    variant = "weights"
    if args.input_flips:
        variant = "inputs"
    if args.first_layer:
        variant = "first-layer"
    result = oracle.theorem_harness(
        neurons=args.neurons,
        fan_in=args.fanin,
        span=args.span,
        bs=tuple(_parse_int_list(args.bs)),
        seed=args.seed,
        variant=variant,
        z=args.z,
        samples=args.samples,
    )
    witnesses = result.pop("witnesses")
    result["witness_count"] = len(witnesses)
    result["witnesses"] = [asdict(w) for w in witnesses[:20]]
    for b, count in result["checked"].items():
        print(f"b={b}: {count} eligible (neuron, input) pairs checked")
    if args.out:
        out = _ensure_out(args.out)
        dataio.write_json(os.path.join(out, "theorem.json"), result)
        _write_manifest(out, args)
    if witnesses:
        first = witnesses[0]
        print(
            f"FAIL: {len(witnesses)} witnesses; first: neuron {first.neuron} "
            f"input {first.input_index} flips {first.flipped} "
            f"changed {first.before} -> {first.after}"
        )
        return EXIT_WITNESS
    print(f"PASS: no flip subset within budget changed any output ({variant} variant)")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _ensure_out(args.out)
    acc_curves = []
    tol_curves = []
    imp_groups = []
    summary_rows = []
    for run_dir in args.runs:
        label = _run_label(run_dir)
        row = {"run": label}
        sweep_path = os.path.join(run_dir, "sweep_summary.csv")
        if os.path.exists(sweep_path):
            bers, accs = _read_sweep_summary(sweep_path)
            acc_curves.append((label, bers, accs))
            if bers and bers[0] == 0:
                row["clean_accuracy"] = f"{accs[0]:.6f}"
        tol_path = os.path.join(run_dir, "tolerance.json")
        if os.path.exists(tol_path):
            with open(tol_path) as f:
                tol = json.load(f)
            tol_curves.append((label, tol["grid"], tol["per_b"]))
            row["t_bar"] = f"{tol['t_bar']:.6f}"
        imp_path = os.path.join(run_dir, "importance.json")
        if os.path.exists(imp_path):
            with open(imp_path) as f:
                imp = json.load(f)
            imp_groups.append((label, imp["pi"]))
            row["var_pi"] = f"{imp['variance']:.10f}"
            row["pi_mean"] = f"{imp['pi_mean']:.8f}"
        if len(row) == 1:
            raise dataio.DataFormatError(f"{run_dir}: no sweep/tolerance/importance outputs found")
        summary_rows.append(row)

    written = []
    if acc_curves:
        path = os.path.join(out, "accuracy_over_ber.png")
        report.fig_accuracy_over_ber(acc_curves, path)
        written.append(path)
    if tol_curves:
        path = os.path.join(out, "tolerance_curve.png")
        report.fig_tolerance_curve(tol_curves, path)
        written.append(path)
    if imp_groups:
        path = os.path.join(out, "importance_scatter.png")
        report.fig_importance_scatter(imp_groups, path)
        written.append(path)
    header = ["run", "clean_accuracy", "t_bar", "pi_mean", "var_pi"]
    rows = [[r.get(k, "") for k in header] for r in summary_rows]
    dataio.write_csv(os.path.join(out, "report_summary.csv"), header, rows)
    written.append(os.path.join(out, "report_summary.csv"))
    _write_manifest(out, args)
    print("wrote " + ", ".join(written))
    return EXIT_OK


def _run_label(run_dir: str) -> str:
    manifest = os.path.join(run_dir, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as f:
            flags = json.load(f).get("flags", {})
        arch = flags.get("arch")
        ber = flags.get("ber_train")
        if arch is not None and ber is not None:
            return f"{arch} ber_train={ber:g}"
        if arch is not None:
            return arch
    return os.path.basename(os.path.normpath(run_dir))


def _read_sweep_summary(path: str) -> tuple:
    bers = []
    accs = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("ber,"):
            raise dataio.DataFormatError(f"{path}: unexpected header {header!r}")
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 2:
                continue
            bers.append(float(parts[0]))
            accs.append(float(parts[1]))
    return bers, accs


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="bittol", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"bittol {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train a model and export it")
    p.add_argument("--arch", required=True, type=_arch_type,
                   help='architecture string, e.g. "In-FC8-FC8-10"')
    _add_data_args(p, with_train=True)
    p.add_argument("--ber-train", type=float, default=0.0, help="weight-bit flip rate in training")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-halve-every", type=int, default=25)
    p.add_argument("--z", type=int, default=255, help="maximum integer input value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model, clean or at one error rate")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--ber", type=float, default=None, help="also evaluate at this error rate")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-ber", help="accuracy over a bit-error-rate sweep")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--bers", default="0,0.01,0.05,0.1,0.2", help="comma-separated error rates")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_ber)

    p = sub.add_parser("metrics", help="tolerance and importance reports")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--grid", default="2,4,8,16,32,64", help="comma-separated margin thresholds")
    p.add_argument("--skip-importance", action="store_true",
                   help="tolerance only (importance costs one dataset pass per neuron)")
    p.add_argument("--flip-scope", choices=("map", "position"), default="map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("importance", help="importance report only")
    p.add_argument("--model", required=True)
    _add_data_args(p)
    p.add_argument("--flip-scope", choices=("map", "position"), default="map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("verify-theorem", help="exhaustively certify the flip-safety bound")
    p.add_argument("--neurons", type=int, default=200)
    p.add_argument("--fanin", type=int, default=9)
    p.add_argument("--span", type=int, default=9, help="thresholds drawn from [-span, span]")
    p.add_argument("--bs", default="2,4,8", help="comma-separated margin thresholds")
    p.add_argument("--input-flips", action="store_true", help="flip input bits instead of weights")
    p.add_argument("--first-layer", action="store_true", help="integer-input variant")
    p.add_argument("--z", type=int, default=3, help="max input value for --first-layer")
    p.add_argument("--samples", type=int, default=512, help="random inputs for --first-layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for theorem.json")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("report", help="render figures from run outputs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories to summarize")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (BittolError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
