"""
Main entry point for grbLMM

    python3 main.py fit data.csv --cluster-col id --response-col y --fixed-cols x1,x2,x3
    python3 main.py simulate --design random_intercepts --tau 0.4 --p 10 --reps 2
    python3 main.py predict --fit out/fit.json new.csv
    python3 main.py split data.csv --cluster-col id --response-col y --fixed-cols x1,x2
"""

import argparse
import dataclasses
import os
import sys
import time
import warnings

from artifacts import (
    FitArtifact,
    load_fit,
    predict,
    read_new_data,
    save_fit,
    scale_factors,
    utc_now,
    write_manifest,
    write_predictions,
    write_trace,
)
from boost_engine import BoostConfig, run
from constants import AIC_MAX_N, DESIGNS, EXIT_ARGUMENT, EXIT_OK, STOPPING_RULES, VARIANCE_ESTIMATORS, load_config
from errors import ConfigError, ConvergenceWarning, GrbLmmError
from longitudinal_data import CsvSchema, export_csv, ingest_csv, split_train_test
from simulation import bench_grid, write_report
from toon_parser import ToonParseError, load_toon_file, save_toon_file


class GrbArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose errors are single machine-parsable lines (exit 2)"""

    def error(self, message):
        self.exit(EXIT_ARGUMENT, f"error={ConfigError.code} {self.prog}: {message}\n")


def _csv_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text):
    try:
        return [float(v) for v in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(v) for v in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def status(message):
    print(message, file=sys.stderr)


def schema_arguments():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("csv schema")
    group.add_argument("csv", help="input CSV with a header row")
    group.add_argument("--cluster-col", required=True)
    group.add_argument("--response-col", required=True)
    group.add_argument("--fixed-cols", required=True, type=_csv_list, help="comma-separated covariate columns")
    group.add_argument("--random", default=["intercept"], type=_csv_list,
                       help="random terms: intercept[,slope:NAME...] (default intercept)")
    group.add_argument("--drop-missing", action="store_true", help="drop rows with missing values instead of failing")
    return parent


def build_parser():
    parser = GrbArgumentParser(prog="grblmm", description="Gradient boosting for linear mixed models")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=GrbArgumentParser)
    schema = schema_arguments()

    fit = commands.add_parser("fit", parents=[schema], help="fit a model to a CSV")
    fit.add_argument("--config", help="TOON config file layered over the defaults")
    fit.add_argument("--nu", type=float)
    fit.add_argument("--mstop", type=int, dest="m_stop")
    fit.add_argument("--stop", choices=STOPPING_RULES, dest="stopping")
    fit.add_argument("--k", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--variance-estimator", choices=VARIANCE_ESTIMATORS)
    fit.add_argument("--slope-interactions", action="store_true", default=None)
    fit.add_argument("--gamma-every", type=int)
    fit.add_argument("--workers", type=int)
    fit.add_argument("--scale", action="store_true", help="fit on unit-variance covariates, report raw units")
    fit.add_argument("--force-aic", action="store_true", help=f"allow --stop aic with N > {AIC_MAX_N}")
    fit.add_argument("--out", default="grblmm_fit", help="output directory")

    sim = commands.add_parser("simulate", help="run the simulation benchmark")
    sim.add_argument("--grid", help="TOON file with a grid section")
    sim.add_argument("--design", choices=DESIGNS)
    sim.add_argument("--tau", type=_float_list)
    sim.add_argument("--p", type=_int_list)
    sim.add_argument("--reps", type=int, dest="replications")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--n-i", type=int, dest="n_i")
    sim.add_argument("--sigma", type=float)
    sim.add_argument("--mstop", type=int, dest="m_stop")
    sim.add_argument("--nu", type=float)
    sim.add_argument("--k", type=int)
    sim.add_argument("--variants", type=_csv_list)
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--out", default="grblmm_sim", help="output directory")
    sim.add_argument("--stem", default="simulation", help="base name of the CSV/JSON reports")

    pred = commands.add_parser("predict", help="predict new rows from a fit.json")
    pred.add_argument("--fit", required=True, dest="fit_path")
    pred.add_argument("csv")
    pred.add_argument("--out", default="predictions.csv")

    split = commands.add_parser("split", parents=[schema], help="random 2:1 train/test split")
    split.add_argument("--fraction", type=float, default=2.0 / 3.0)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--out", default="grblmm_split", help="output directory")
    return parser


def _schema(args):
    return CsvSchema(
        cluster_col=args.cluster_col,
        response_col=args.response_col,
        fixed_cols=tuple(args.fixed_cols),
        random_terms=tuple(args.random),
    )


def resolve_boost_config(args):
    """Defaults, then the --config file, then command-line flags"""
    try:
        config = load_config(args.config)
    except (ToonParseError, OSError) as e:
        raise ConfigError(f"cannot read config {args.config}: {e}")
    overrides = {
        name: getattr(args, name)
        for name in ("nu", "m_stop", "stopping", "k", "seed", "variance_estimator",
                     "slope_interactions", "gamma_every", "workers")
        if getattr(args, name) is not None
    }
    boost = {**config["boost"], **overrides}
    return BoostConfig.from_mapping(boost, config["numerics"])


def cmd_fit(args):
    started = utc_now()
    clock = time.perf_counter()
    config = resolve_boost_config(args)
    data = ingest_csv(args.csv, _schema(args), drop_missing=args.drop_missing)
    if config.stopping == "aic" and data.N > AIC_MAX_N and not args.force_aic:
        raise ConfigError(
            f"--stop aic needs O(N^2) memory; N = {data.N} > {AIC_MAX_N}. Use --stop cv or pass --force-aic"
        )
    status(f"data: N={data.N} n={data.n} p={data.p} q={data.q}")

    sd = scale_factors(data) if args.scale else None
    fit_data = data if sd is None else data.with_covariates(data.X / sd)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        trace, state = run(fit_data, config)
    capped = 0
    for w in caught:
        if issubclass(w.category, ConvergenceWarning):
            capped += 1
        else:
            warnings.showwarning(w.message, w.category, w.filename, w.lineno)

    os.makedirs(args.out, exist_ok=True)
    fit_path = os.path.join(args.out, "fit.json")
    trace_path = os.path.join(args.out, "trace.csv")
    save_fit(FitArtifact.from_state(data, state, trace, sd), fit_path)
    write_trace(trace, data, trace_path, sd)
    resolved = dataclasses.asdict(config)
    resolved.update(scale=args.scale, drop_missing=args.drop_missing, random=list(args.random))
    write_manifest(
        os.path.join(args.out, "manifest.json"), "fit", resolved, config.seed, started,
        input_path=args.csv, outputs=[fit_path, trace_path],
    )
    selected = sum(1 for b in state.beta if b != 0)
    status(f"stopping={trace.stopping} m*={trace.m_star} selected={selected}/{data.p} "
           f"sigma2={state.sigma2:.6g} ({time.perf_counter() - clock:.1f}s)")
    if capped:
        status(f"note: initial fit hit the {config.init_max_rounds}-round cap in {capped} fit(s); "
               "raise numerics.init_max_rounds to refine the starting values")
    status(f"wrote {fit_path}, {trace_path}")
    return EXIT_OK


def _simulation_grid(args):
    grid = {}
    if args.grid:
        try:
            grid = dict(load_toon_file(args.grid).get("grid", {}))
        except ToonParseError as e:
            raise ConfigError(f"cannot read grid {args.grid}: {e}")
        if not grid:
            raise ConfigError(f"{args.grid} has no grid section")
    for name in ("design", "tau", "p", "replications", "seed", "n", "n_i", "sigma", "m_stop", "nu", "k", "variants"):
        value = getattr(args, name)
        if value is not None:
            grid[name] = value
    return grid


def cmd_simulate(args):
    started = utc_now()
    grid = _simulation_grid(args)
    report = bench_grid(grid, workers=args.workers)
    csv_path, json_path = write_report(report, args.out, args.stem)
    grid_path = os.path.join(args.out, f"{args.stem}.grid.toon")
    save_toon_file({"grid": grid}, grid_path)
    write_manifest(
        os.path.join(args.out, f"{args.stem}.manifest.json"), "simulate", grid,
        grid.get("seed", 0), started, outputs=[csv_path, json_path, grid_path],
    )
    for cell in report.aggregates:
        status(
            f"{cell['design']} tau={cell['tau']:g} p={cell['p']} {cell['variant']}: "
            f"mse_beta={cell['mse_beta']} fp={cell['fp_rate']} failed={cell['failed']}"
        )
    status(f"wrote {csv_path}, {json_path}")
    return EXIT_OK


def cmd_predict(args):
    artifact = load_fit(args.fit_path)
    result = predict(artifact, read_new_data(args.csv))
    write_predictions(result, args.out)
    unseen = int((result.predictions["random_effects"] == "prior_mean").sum())
    status(f"predicted {len(result.predictions)} rows ({unseen} from unseen clusters)")
    if result.mspe is not None:
        status(f"mspe={result.mspe:.6g}")
    status(f"wrote {args.out}")
    return EXIT_OK


def cmd_split(args):
    data = ingest_csv(args.csv, _schema(args), drop_missing=args.drop_missing)
    train, test = split_train_test(data, args.fraction, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.csv")
    test_path = os.path.join(args.out, "test.csv")
    export_csv(train, train_path)
    export_csv(test, test_path)
    status(f"train: {train.N} rows, test: {test.N} rows")
    status(f"wrote {train_path}, {test_path}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
    "split": cmd_split,
}


def main(argv=None):
    """Main entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except GrbLmmError as e:
        print(f"error={e.code} {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
