"""Command-line interface: ``mlrwl {simulate,fit,predict,reproduce}``.

Exit codes: 0 success, 1 runtime or fit failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .core import FitConfig, InvalidInputError, MlrwlError, TrialDataset, sign_decision
from .dc_engine import dc_fit
from .evaluation import REFERENCE, default_method, replicate_experiment
from .fileio import dataset_to_csv, format_float, load_model, read_covariates, read_dataset, save_model
from .kernels import KernelSpec, median_bandwidth
from .simgen import get_setting, simulate
from .working_models import plugin_weights

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_SIZES = (400, 800, 2000)


class _UsageError(Exception):
    pass


def _bandwidth(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be a positive number or 'auto'") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError("bandwidth must be a positive number or 'auto'")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlrwl", description="Residual weighted learning of combination treatment rules.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a simulated trial as CSV")
    s.add_argument("--setting", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--design", choices=("rct", "obs"), default="rct")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-", help="output path ('-' for stdout)")

    f = sub.add_parser("fit", help="fit a rule and write a model file")
    f.add_argument("--data", required=True)
    f.add_argument("--rule", choices=("linear", "kernel"), default="linear")
    f.add_argument("--lambda", dest="lam", type=_positive_float, default=None, help="penalty; default scales with n")
    f.add_argument("--kernel-bandwidth", type=_bandwidth, default="auto")
    f.add_argument(
        "--propensity",
        choices=("known", "estimate", "uniform"),
        default="known",
        help="'known' reads the prob column, 'uniform' assumes equal randomization",
    )
    f.add_argument("--restarts", type=_positive_int, default=3)
    f.add_argument("--max-iter", type=_positive_int, default=50)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)

    r = sub.add_parser("predict", help="recommend treatments with a fitted model")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", default="-")

    q = sub.add_parser("reproduce", help="replicate a simulation table cell")
    q.add_argument("--table", type=int, choices=(1, 2, 4, 5), required=True)
    q.add_argument("--setting", type=int, choices=(1, 2, 3), required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--reps", type=_positive_int, default=20)
    q.add_argument("--method", choices=("linear", "kernel", "both"), default="both")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--threads", type=_positive_int, default=None, help="worker processes (default MLRWL_THREADS or cores)")
    q.add_argument("--out", default="-")
    return p


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _cmd_simulate(args) -> int:
    design = "rct" if args.design == "rct" else "observational"
    ds = simulate(args.setting, args.n, np.random.default_rng(args.seed), design=design)
    _write_text(args.out, dataset_to_csv(ds, include_prob=design == "observational"))
    return EXIT_OK


def _cmd_fit(args) -> int:
    ds, digest = read_dataset(args.data)
    if args.propensity == "known" and ds.propensity is None:
        raise _UsageError("--propensity known needs a 'prob' column in the data file")
    if args.propensity == "uniform":
        ds = TrialDataset(ds.X, ds.A, ds.Y, np.full(ds.n, 2.0 ** (-ds.K)))
        mode = "known"
    else:
        mode = args.propensity
    lam = args.lam if args.lam is not None else default_method(1, args.rule, ds.n).lam
    kernel = None
    bandwidth = None
    if args.rule == "kernel":
        bandwidth = median_bandwidth(ds.X) if args.kernel_bandwidth == "auto" else float(args.kernel_bandwidth)
        kernel = KernelSpec("rbf", bandwidth)
    config = FitConfig(lam=lam, max_iter=args.max_iter, n_restarts=args.restarts, rng_seed=args.seed)
    w, pmodel, gmodel = plugin_weights(ds, mode)
    params, diag = dc_fit(ds, w, config, args.rule, kernel)
    report = diag.to_dict()
    report["bandwidth"] = bandwidth
    report["bandwidth_source"] = None if bandwidth is None else ("auto" if args.kernel_bandwidth == "auto" else "given")
    if pmodel is not None:
        report["propensity_grad_norm"] = pmodel.grad_norm
    echo = {
        "rule": args.rule,
        "lambda": lam,
        "kernel_bandwidth": args.kernel_bandwidth,
        "propensity": args.propensity,
        "restarts": args.restarts,
        "max_iter": args.max_iter,
        "seed": args.seed,
    }
    save_model(args.out, params, config=echo, data_sha1=digest, report=report)
    summary = {
        "final_objective": report["objective_trace"][-1],
        "iterations": report["iterations"],
        "restart_index": report["restart_index"],
        "converged": report["converged"],
        "descent_ok": report["descent_ok"],
        "bandwidth": bandwidth,
    }
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_predict(args) -> int:
    params, _ = load_model(args.model)
    X = read_covariates(args.data)
    if X.shape[1] != params.p:
        raise _UsageError(f"model expects {params.p} covariates, data has {X.shape[1]}")
    f = params.decision_function(X)
    d = sign_decision(f)
    K = params.K
    out = io.StringIO()
    out.write(",".join([f"d{k + 1}" for k in range(K)] + [f"f{k + 1}" for k in range(K)]) + "\n")
    for i in range(X.shape[0]):
        out.write(",".join([str(int(v)) for v in d[i]] + [format_float(v) for v in f[i]]) + "\n")
    _write_text(args.out, out.getvalue())
    return EXIT_OK


def _cmd_reproduce(args) -> int:
    if args.n not in _SIZES:
        raise _UsageError(f"--n must be one of {_SIZES}")
    design = "rct" if args.table in (1, 2) else "observational"
    metric = "value" if args.table in (1, 4) else "accuracy"
    rules = ("linear", "kernel") if args.method == "both" else (args.method,)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        [
            "table", "setting", "n", "method", "mean_value", "sd_value", "mean_accuracy", "sd_accuracy",
            "reps", "excluded", "reference", "reference_sd", "abs_deviation",
        ]
    )
    for rule in rules:
        method = default_method(args.setting, rule, args.n, design)
        summ = replicate_experiment(args.setting, args.n, args.reps, design, method, args.seed, threads=args.threads)
        ref, ref_sd = REFERENCE[(args.table, args.setting, method.tag, args.n)]
        got = summ.mean_value if metric == "value" else summ.mean_accuracy
        writer.writerow(
            [
                args.table, args.setting, args.n, method.tag,
                format_float(summ.mean_value), format_float(summ.sd_value),
                format_float(summ.mean_accuracy), format_float(summ.sd_accuracy),
                summ.replications, len(summ.excluded),
                format_float(ref), format_float(ref_sd), format_float(abs(got - ref)),
            ]
        )
    _write_text(args.out, out.getvalue())
    return EXIT_OK


_COMMANDS = {"simulate": _cmd_simulate, "fit": _cmd_fit, "predict": _cmd_predict, "reproduce": _cmd_reproduce}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        # one BLAS thread makes every artifact independent of the machine's thread count
        with threadpool_limits(limits=1):
            return _COMMANDS[args.command](args)
    except (_UsageError, InvalidInputError) as exc:
        sys.stderr.write(f"mlrwl {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (MlrwlError, OSError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"mlrwl {args.command}: failed: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
