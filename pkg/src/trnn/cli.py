"""Command-line entry point: ``trnn {gen,train,eval,gradcheck,replicate}``.

Exit codes: 0 success, 1 usage error, 2 data or format error,
3 gradient check failure, 4 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backprop import backprop_series, finite_difference_gradient, gradient_errors
from .cells import init_params, run_series
from .data import (
    FormatError,
    SyntheticSpec,
    export_csv,
    generate_synthetic,
    load_model,
    parse_dims,
    read_series,
    save_model,
    write_series,
)
from .objectives import LossSpec, aggregate_loss
from .trainer import (
    DivergenceError,
    TrainConfig,
    evaluate,
    persistence_error,
    prepare_lag_task,
    train,
)

log = logging.getLogger("trnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK, EXIT_DIVERGED = 0, 1, 2, 3, 4

# Desk-scale stand-ins for the two published experiments. Learning rate,
# clipping and chunk size are not published; these values were chosen on
# short pilot runs. Chunk size only changes speed and summation rounding.
REPLICATION_CASES = {
    1: dict(cell="tlstm", hidden=(50, 50, 4), regime="last", lam=0.01, epochs=1000,
            window=7, lr=0.25, clip=5.0, chunk=4),
    2: dict(cell="tlstm", hidden=(14, 14, 4), regime="all", lam=0.01, epochs=1000,
            window=7, lr=0.25, clip=5.0, chunk=32),
}
REPLICATION_DATA = dict(dims=(25, 25, 4), length=543)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims_arg(text):
    try:
        return parse_dims(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _train_flags(p, defaults=True):
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=_dims_arg)
    p.add_argument("--cell", choices=["tlstm", "tgru"])
    p.add_argument("--regime", choices=["last", "all", "panel-last", "panel-all"])
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--chunk", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trnn", description="Tensorial recurrent networks for tensor time series.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic tensor series")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=_dims_arg, default=REPLICATION_DATA["dims"])
    g.add_argument("--len", dest="length", type=int, default=REPLICATION_DATA["length"])
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--csv", type=Path, help="also dump a long-format CSV")

    t = sub.add_parser("train", help="fit a model on a lag-1 task built from a series file")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="output directory")
    _train_flags(t)

    e = sub.add_parser("eval", help="held-out error of a trained model")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--regime", choices=["last", "all", "panel-last", "panel-all"])
    e.add_argument("--window", type=int)
    e.add_argument("--baseline", action="store_true", help="also report the persistence baseline")

    c = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    c.add_argument("--cell", choices=["tlstm", "tgru"], default="tlstm")
    c.add_argument("--dims", type=_dims_arg, default=(2, 3))
    c.add_argument("--hidden", type=_dims_arg, default=(2, 2))
    c.add_argument("--window", type=int, default=3, help="series length")
    c.add_argument("--regime", choices=["last", "all"], default="last")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--drop-reset-route", action="store_true",
                   help="tGRU only: drop the reset-route hidden term")

    r = sub.add_parser("replicate", help="run a desk-scale version of a published experiment")
    r.add_argument("--case", type=int, choices=[1, 2], required=True)
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--dims", type=_dims_arg)
    r.add_argument("--len", dest="length", type=int)
    _train_flags(r)
    return parser


def effective_config(args, base: dict | None = None) -> TrainConfig:
    """Defaults, then ``base``, then the config file, then explicit flags."""
    cfg = dict(base or {})
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except ValueError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(loaded)
    for key in ("seed", "hidden", "cell", "regime", "lr", "lam", "epochs", "window", "clip", "chunk"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _progress(every):
    def report(epoch, loss, mse, lr):
        if epoch == 1 or epoch % every == 0:
            log.info("epoch %d loss %.6g train_mse %.6g lr %.3g", epoch, loss, mse, lr)
    return report


def _fit_and_report(series, config: TrainConfig, out: Path, extra: dict):
    task = prepare_lag_task(series, config.window, config.regime, config.split)
    model, report = train(task.train, config, progress=_progress(max(1, config.epochs // 20)))
    test_mse = evaluate(model, task.test, task.scaler)
    base = persistence_error(task.test, task.scaler)
    mean_base = _mean_baseline(task)
    report.summary.update(
        extra,
        train_cases=len(task.train),
        test_cases=len(task.test),
        test_mse=test_mse,
        persistence_mse=base,
        train_mean_mse=mean_base,
        beats_persistence=bool(test_mse < base),
    )
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "convergence.csv")
    report.write_timing_csv(out / "timing.csv")
    report.write_json(out / "report.json")
    save_model(model, out / "model.trnm", {"config": config.to_dict(), **extra})
    return report


def _mean_baseline(task) -> float:
    # error of always predicting the training mean, in original units
    sq, count = 0.0, 0
    for y in task.test.targets:
        d = task.scaler.inverse(y) - task.scaler.mean
        sq += float(np.sum(d * d))
        count += y.size
    return sq / count


def cmd_gen(args) -> int:
    spec = SyntheticSpec(dims=tuple(args.dims), length=args.length, seed=args.seed)
    try:
        series = generate_synthetic(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_series(series, args.out)
    if args.csv:
        export_csv(series, args.csv)
    digest = hashlib.sha256(args.out.read_bytes()).hexdigest()[:16]
    print(f"wrote {args.out}: {len(series)} steps of {'x'.join(map(str, spec.dims))} "
          f"(seed {args.seed}, sha256 {digest})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = effective_config(args)
    series = read_series(args.data)
    report = _fit_and_report(series, config, args.out, {"data": str(args.data)})
    s = report.summary
    print(f"trained {config.cell} for {config.epochs} epochs: final loss {report.final_loss:.6g}, "
          f"test mse {s['test_mse']:.6g} (persistence {s['persistence_mse']:.6g}); "
          f"artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.model)
    cfg = dict(meta.get("config", {}))
    window = args.window or cfg.get("window", 7)
    regime = args.regime or cfg.get("regime", "last")
    split = cfg.get("split", 0.9)
    series = read_series(args.data)
    if series.shape[1:] != model.head.output_dims:
        raise FormatError(f"data dims {series.shape[1:]} do not match the model {model.head.output_dims}")
    task = prepare_lag_task(series, window, regime, split)
    print(f"test_mse {evaluate(model, task.test, task.scaler):.10g}")
    if args.baseline:
        print(f"persistence_mse {persistence_error(task.test, task.scaler):.10g}")
    return EXIT_OK


def gradcheck(cell, dims, hidden, T, regime, seed, drop_reset_route=False):
    """Backprop against central differences.

    Returns per-parameter ``(max relative error, max absolute difference)``;
    the relative error treats differences at or below ``1e-8`` as zero.
    """
    rng = np.random.default_rng(seed)
    model = init_params(cell, dims, hidden, seed=seed)
    model = model.with_parameters(
        {k: v + 0.5 * rng.standard_normal(v.shape) for k, v in model.parameters().items()}
    )
    xs = list(rng.standard_normal((T,) + tuple(dims)))
    spec = LossSpec("squared", regime)
    ys = rng.standard_normal(dims) if spec.last_only else rng.standard_normal((T,) + tuple(dims))

    def loss(m):
        outs, tapes = run_series(m, xs)
        value, adj = aggregate_loss([ys], [np.stack(outs)], spec)
        return value, tapes, adj[0]

    _, tapes, adj = loss(model)
    out_adj = [None] * (T - 1) + [adj[-1]] if spec.last_only else list(adj)
    analytic = backprop_series(model, tapes, out_adj, drop_reset_route=drop_reset_route)
    numeric = finite_difference_gradient(lambda p: loss(model.with_parameters(p))[0],
                                         model.parameters())
    rel = gradient_errors(analytic, numeric)
    return {k: (rel[k], float(np.max(np.abs(analytic[k] - numeric[k])))) for k in rel}


def cmd_gradcheck(args) -> int:
    if len(args.dims) != len(args.hidden):
        raise UsageError("--dims and --hidden need the same number of modes")
    if args.window < 1:
        raise UsageError("--window must be positive")
    errs = gradcheck(args.cell, args.dims, args.hidden, args.window, args.regime, args.seed,
                     args.drop_reset_route)
    groups: dict[str, tuple[float, float]] = {}
    for k, (rel, ab) in errs.items():
        gate, _, part = k.partition(".")
        key = f"{gate}.{part.rstrip('0123456789')}"
        r0, a0 = groups.get(key, (0.0, 0.0))
        groups[key] = (max(r0, rel), max(a0, ab))
    width = max(len(k) for k in groups)
    print(f"{'group':<{width}}  {'max rel':>9}  {'max abs':>9}")
    ok = True
    for k, (rel, ab) in groups.items():
        ok &= rel <= args.tol
        print(f"{k:<{width}}  {rel:9.3e}  {ab:9.3e}  {'ok' if rel <= args.tol else 'FAIL'}")
    worst = max(r for r, _ in groups.values())
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g}, absolute floor 1e-8)")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_replicate(args) -> int:
    config = effective_config(args, REPLICATION_CASES[args.case])
    dims = tuple(args.dims) if args.dims else REPLICATION_DATA["dims"]
    length = args.length or REPLICATION_DATA["length"]
    spec = SyntheticSpec(dims=dims, length=length, seed=config.seed)
    series = generate_synthetic(spec)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_series(series, out / "data.ttsr")
    report = _fit_and_report(series, config, out,
                             {"case": args.case, "data_dims": list(dims), "data_length": length})
    s = report.summary
    print(f"case {args.case}: {config.epochs} epochs, "
          f"{report.fraction_non_increasing():.1%} non-increasing, "
          f"test mse {s['test_mse']:.6g} vs persistence {s['persistence_mse']:.6g}; "
          f"convergence log {out / 'convergence.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"trnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"trnn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"trnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
