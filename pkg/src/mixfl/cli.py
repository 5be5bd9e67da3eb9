"""Command-line entry point: ``mixfl <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, plot, theory
from .solvers import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(sub, seed_required=False):
    g = sub.add_argument_group("experiment")
    g.add_argument("--config", help="sectioned key = value file; flags override it")
    g.add_argument("--dataset", help="LibSVM path, 'a1a', 'synthetic-a1a' or 'quadratic'")
    g.add_argument("--devices", type=int)
    g.add_argument("--split", dest="split_mode", choices=["homogeneous", "heterogeneous"])
    g.add_argument("--split-seed", type=int)
    g.add_argument("--mu", type=float)
    g.add_argument("--variant")
    g.add_argument("--alpha", help="stepsize or 'theory'")
    g.add_argument("--p", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--record-every", type=int)
    g.add_argument("--target", dest="target_rel_subopt", type=float)
    g.add_argument("--reference-tol", type=float)
    g.add_argument("--no-reference", dest="use_reference", action="store_false", default=None)
    g.add_argument("--cache-dir")
    g.add_argument("--repeats", type=int)
    g.add_argument("--seed", type=int, required=seed_required)


_KEYS = ("dataset", "devices", "split_mode", "split_seed", "mu", "variant", "alpha", "p", "lam", "max_iters",
         "record_every", "target_rel_subopt", "reference_tol", "use_reference", "cache_dir", "repeats", "seed",
         "p_grid", "lambda_grid")


def _config(args, need_seed=False) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config) if getattr(args, "config", None) else experiments.ExperimentConfig()
    cfg.update(**{k: getattr(args, k) for k in _KEYS if hasattr(args, k)})
    return cfg.validate(need_seed=need_seed)


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_run(args):
    cfg = _config(args, need_seed=True)
    er = experiments.run_experiment(cfg)
    with _open_out(args.out) as fh:
        er.result.trace.to_csv(fh)
    line = experiments.summary_line(er, cfg.target_rel_subopt)
    print(f"{line} (alpha={er.solver.alpha:.6g}, wall {er.wall:.2f}s)", file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_sweep_p(args):
    cfg = _config(args, need_seed=True)
    rows = experiments.sweep_p(cfg)
    with _open_out(args.out) as fh:
        experiments.write_rows(rows, ["p", "comm_rounds_to_target", "iters_to_target"], fh)
    best = min((r for r in rows if r["comm_rounds_to_target"] is not None),
               key=lambda r: r["comm_rounds_to_target"], default=None)
    msg = "target not reached at any p" if best is None else f"fewest rounds at p={best['p']:g}"
    print(msg, file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_sweep_lambda(args):
    cfg = _config(args, need_seed=True)
    out = experiments.sweep_lambda(cfg)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "sweep_lambda.csv", "w", newline="") as fh:
        experiments.write_rows(out["runs"], ["lambda", "data_passes_to_target"], fh)
    with open(d / "monotonicity.csv", "w", newline="") as fh:
        theory.write_bound_table(out["curve"], fh)
    with open(d / "distances.csv", "w", newline="") as fh:
        experiments.write_rows(out["curve"]["rows"], ["lambda", "dist_local", "dist_global"], fh)
    failed = [k for k, ok in out["curve"]["checks"].items() if not ok]
    print("theory checks: " + ("all hold" if not failed else "FAILED " + ", ".join(failed)))
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_split(args):
    cfg = _config(args)
    built = experiments.build_problem(cfg)
    if built.partition is None:
        raise ConfigError("split needs a LibSVM dataset")
    with _open_out(args.out) as fh:
        data.write_manifest(built.partition, fh)
    part = built.partition
    print(f"devices={part.n} m={part.m} dropped={len(part.dropped)}", file=sys.stderr)
    return EXIT_OK


def cmd_reference(args):
    cfg = _config(args)
    lam = float("inf") if args.infinite else cfg.lam
    built = experiments.build_problem(cfg, 0.0 if args.infinite else lam)
    if args.infinite:
        ref = theory.global_reference(built.problem, cfg.reference_tol)
    else:
        ref = experiments.ReferenceCache(cfg.cache_dir).get(built, lam, cfg.reference_tol)
    with _open_out(args.out) as fh:
        for row in np.asarray(ref.x_star):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    print(f"lambda={lam:g} F*={ref.F_star:.17g} grad_norm={ref.grad_norm:.3g}", file=sys.stderr)
    return EXIT_OK


def cmd_plot(args):
    logy = None if args.logy is None else args.logy == "log"
    plot.plot_csvs(args.csv, args.out, x=args.x, y=args.y, logy=logy, labels=args.label)
    return EXIT_OK


def cmd_config(args):
    if args.check:
        experiments.load_config(args.check).validate()
        print(f"{args.check}: ok")
    else:
        sys.stdout.write(experiments.defaults_text())
    return EXIT_OK


def build_parser():
    ap = _Parser(prog="mixfl", description="Simulator for local/global model mixing in federated learning.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("run", help="one solver run; writes a trace CSV")
    _common(sp, seed_required=True)
    sp.add_argument("--out", help="trace CSV path (default stdout)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep-p", help="rounds to target over a grid of p")
    _common(sp, seed_required=True)
    sp.add_argument("--p-grid", nargs="+", type=float)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep_p)

    sp = sub.add_parser("sweep-lambda", help="data passes to target over a grid of lambda")
    _common(sp, seed_required=True)
    sp.add_argument("--lambda-grid", nargs="+", type=float)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_sweep_lambda)

    sp = sub.add_parser("split", help="write a device<TAB>row manifest")
    _common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("reference", help="write x(lambda), one block per line")
    _common(sp)
    sp.add_argument("--infinite", action="store_true", help="solve the shared-model limit")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_reference)

    sp = sub.add_parser("plot", help="SVG line chart of trace CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--x", default="data_passes")
    sp.add_argument("--y", default="rel_subopt")
    sp.add_argument("--scale", dest="logy", choices=["log", "linear"])
    sp.add_argument("--label", action="append")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("config", help="print default config or validate a file")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--print-defaults", action="store_true")
    g.add_argument("--check", metavar="FILE")
    sp.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, plot.PlotError, data.DataFormatError, OSError) as exc:
        print(f"mixfl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, theory.ReferenceError, FloatingPointError) as exc:
        print(f"mixfl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
