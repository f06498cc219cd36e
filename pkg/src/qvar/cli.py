"""Command-line entry point: simulate, run, backtest and report subcommands.

Exit codes: 0 success, 1 usage error, 2 data error, 3 fit failure. Errors go
to stderr, results to files or stdout. Every run flag has a config-file
equivalent; flags override the config file, which overrides defaults.
"""

import argparse
import configparser
import csv
import logging
import sys
from collections import namedtuple
from pathlib import Path

import numpy as np

from .backtest import DEFAULT_HIT_LAGS, score_forecast
from .baselines import GarchParams
from .data import DEFAULT_WINDOW, load_prices, log_returns
from .errors import FitError, QvarError
from .harness import (
    ALL_METHODS,
    DEFAULT_THETAS,
    ExperimentConfig,
    aggregate,
    run_experiment,
    summary_csv_path,
    write_summary_csv,
)
from .qcnn import TrainConfig
from .synthlab import GARCH11, IID_NORMAL, SimSpec, simulate, write_price_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FIT = 3


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.replace(",", " ").split())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part for part in text.replace(",", " ").split())


def build_parser() -> _Parser:
    parser = _Parser(
        prog="qvar",
        description="One-day-ahead Value at Risk forecasting and backtesting.",
        epilog=(
            "exit codes: 0 success, 1 usage error, 2 data error, 3 fit failure. "
            "`run` writes results_{method}_theta{level}.csv (asset_id, exceedance_rate, "
            "dq_stat, p_value, mean_var), summary_theta{level}.csv, joint model "
            "checkpoints, and run_manifest.json into the output directory."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic price CSV")
    sim.add_argument("--process", choices=[IID_NORMAL, GARCH11], required=True)
    sim.add_argument("--n", type=int, required=True, help="number of returns to simulate")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--mu", type=float, default=0.0, help="mean return")
    sim.add_argument("--sigma", type=float, default=1.0, help="iid_normal volatility")
    sim.add_argument("--omega", type=float, default=None, help="garch11 omega")
    sim.add_argument("--alpha", type=float, default=None, help="garch11 alpha")
    sim.add_argument("--beta", type=float, default=None, help="garch11 beta")
    sim.add_argument("--asset-id", default=None)
    sim.add_argument("--out", type=Path, required=True, help="price CSV to write")

    run = sub.add_parser("run", help="run the full experiment over a manifest of assets")
    run.add_argument("--config", type=Path, default=None, help="key=value config file")
    run.add_argument("--manifest", type=Path, default=None)
    run.add_argument("--output-dir", type=Path, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--theta", default=None, help="comma-separated quantile levels")
    run.add_argument("--methods", default=None, help=f"comma-separated subset of {','.join(ALL_METHODS)}")
    run.add_argument("--sample-size", type=int, default=None, help="seeded draw of assets from the manifest")
    run.add_argument("--workers", type=int, default=None, help="worker processes (default: available parallelism)")
    run.add_argument("--epochs", type=int, default=None)
    run.add_argument("--batch-size", type=int, default=None)
    run.add_argument("--window", type=int, default=None)
    run.add_argument("--stride", type=int, default=None)
    run.add_argument("--write-series", action="store_true", default=None,
                     help="also write per-asset VaR series CSVs")

    bt = sub.add_parser("backtest", help="score an existing VaR series against a price CSV")
    bt.add_argument("--prices", type=Path, required=True, help="price CSV (date, close)")
    bt.add_argument("--var", type=Path, required=True,
                    help="CSV with a 'var' column, aligned to the last rows of the return series")
    bt.add_argument("--theta", type=float, required=True)
    bt.add_argument("--hit-lags", type=int, default=DEFAULT_HIT_LAGS)

    rep = sub.add_parser("report", help="rebuild summary files from per-asset result CSVs")
    rep.add_argument("--results-dir", type=Path, required=True)

    return parser


# ---------------------------------------------------------------------------
# run config assembly
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS = {
    "experiment": {
        "manifest": None,
        "output_dir": None,
        "thetas": DEFAULT_THETAS,
        "methods": ALL_METHODS,
        "seed": 0,
        "sample_size": None,
        "workers": None,
        "write_series": False,
    },
    "train": {
        "window": DEFAULT_WINDOW,
        "stride": 1,
        "epochs": 128,
        "batch_size": 128,
        "rho": 0.95,
        "epsilon": 1e-6,
    },
}


def _load_config_file(path: Path) -> dict:
    if not path.exists():
        raise QvarError(f"config file not found: {path}")
    ini = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        ini.read(path)
    except configparser.Error as exc:
        raise QvarError(f"{path}: {exc}") from exc
    out: dict = {"experiment": {}, "train": {}}
    for section in ini.sections():
        if section not in out:
            raise QvarError(f"{path}: unknown config section [{section}]")
        for key, value in ini.items(section):
            if key not in CONFIG_DEFAULTS[section]:
                raise QvarError(f"{path}: unknown key {key!r} in [{section}]")
            out[section][key] = value
    return out


def _coerce(name: str, raw, kind):
    if raw is None or raw == "":
        return None
    if isinstance(raw, str):
        try:
            if kind == "int":
                return int(raw)
            if kind == "float":
                return float(raw)
            if kind == "bool":
                return raw.strip().lower() in ("1", "true", "yes", "on")
            if kind == "floats":
                return _parse_float_list(raw)
            if kind == "strs":
                return _parse_str_list(raw)
            if kind == "path":
                return Path(raw)
        except ValueError as exc:
            raise QvarError(f"bad value for {name}: {raw!r}") from exc
    return raw


def experiment_config_from_args(args) -> ExperimentConfig:
    """Merge defaults, the optional config file, and command-line overrides."""
    file_cfg = _load_config_file(args.config) if args.config else {"experiment": {}, "train": {}}

    def pick(section, key, flag_value, kind):
        if flag_value is not None:
            return flag_value
        value = _coerce(key, file_cfg[section].get(key), kind)
        if value is not None:
            return value
        return CONFIG_DEFAULTS[section][key]

    manifest = pick("experiment", "manifest", args.manifest, "path")
    output_dir = pick("experiment", "output_dir", args.output_dir, "path")
    if manifest is None:
        raise QvarError("a manifest is required (--manifest or config [experiment] manifest)")
    if output_dir is None:
        raise QvarError("an output directory is required (--output-dir or config)")

    thetas = pick("experiment", "thetas", _parse_float_list(args.theta) if args.theta else None, "floats")
    methods = pick("experiment", "methods", _parse_str_list(args.methods) if args.methods else None, "strs")
    train = TrainConfig(
        epochs=pick("train", "epochs", args.epochs, "int"),
        batch_size=pick("train", "batch_size", args.batch_size, "int"),
        rho=pick("train", "rho", None, "float"),
        epsilon=pick("train", "epsilon", None, "float"),
        seed=0,  # replaced per task from the experiment seed
    )
    return ExperimentConfig(
        manifest=Path(manifest),
        output_dir=Path(output_dir),
        thetas=tuple(thetas),
        methods=tuple(methods),
        train=train,
        window=pick("train", "window", args.window, "int"),
        stride=pick("train", "stride", args.stride, "int"),
        seed=pick("experiment", "seed", args.seed, "int"),
        sample_size=pick("experiment", "sample_size", args.sample_size, "int"),
        workers=pick("experiment", "workers", args.workers, "int"),
        write_series=bool(pick("experiment", "write_series", args.write_series, "bool")),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    if args.process == GARCH11:
        if args.omega is None or args.alpha is None or args.beta is None:
            raise QvarError("garch11 simulation needs --omega, --alpha and --beta")
        garch = GarchParams(omega=args.omega, alpha=args.alpha, beta=args.beta, mu=args.mu)
        spec = SimSpec(process=GARCH11, length=args.n, seed=args.seed, garch=garch)
    else:
        spec = SimSpec(
            process=IID_NORMAL, length=args.n, seed=args.seed, mu=args.mu, sigma=args.sigma
        )
    series, _sigma = simulate(spec, asset_id=args.asset_id)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_price_csv(series, args.out)
    print(f"wrote {len(series)} returns as prices to {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = experiment_config_from_args(args)
    summaries = run_experiment(cfg)
    for theta in cfg.thetas:
        print(f"theta={format(theta, 'g')}  (summary: {summary_csv_path(cfg.output_dir, theta)})")
        for s in summaries[theta]:
            print(
                f"  {s.method:<11} exceed mean={s.exceedance_mean:.4f} "
                f"median={s.exceedance_median:.4f} sd={s.exceedance_sd:.4f} "
                f"rej@0.01={s.dq_rejection_rate_01:.2f} rej@0.05={s.dq_rejection_rate_05:.2f} "
                f"mean VaR={s.mean_var:.4f}"
            )
    return EXIT_OK


def _read_var_csv(path: Path) -> np.ndarray:
    if not path.exists():
        raise QvarError(f"VaR file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "var" not in [f.strip().lower() for f in reader.fieldnames]:
            raise QvarError(f"{path}: expected a CSV with a 'var' column")
        key = next(f for f in reader.fieldnames if f.strip().lower() == "var")
        values = [float(row[key]) for row in reader]
    if not values:
        raise QvarError(f"{path}: no VaR rows")
    return np.array(values)


def _cmd_backtest(args) -> int:
    series = log_returns(load_prices(args.prices))
    var = _read_var_csv(args.var)
    if var.size > len(series):
        raise QvarError(
            f"VaR series ({var.size}) is longer than the return series ({len(series)})"
        )
    returns = series.returns[len(series) - var.size :]
    result = score_forecast(returns, var, args.theta, hit_lags=args.hit_lags)
    print(f"asset: {series.asset_id}")
    print(f"days: {result.n_days}  exceedances: {result.n_exceedances}")
    print(f"exceedance_rate: {result.exceedance_rate!r}")
    print(f"mean_var: {result.mean_var!r}")
    print(f"dq_stat: {result.dq_statistic!r}  dof: {result.dof}  p_value: {result.p_value!r}")
    return EXIT_OK


_ResultRow = namedtuple("_ResultRow", "exceedance_rate p_value mean_var")


def _method_order(method: str):
    # canonical ordering first, anything unknown alphabetically after
    if method in ALL_METHODS:
        return (0, ALL_METHODS.index(method))
    return (1, method)


def _cmd_report(args) -> int:
    results_dir = Path(args.results_dir)
    if not results_dir.is_dir():
        raise QvarError(f"results directory not found: {results_dir}")
    groups: dict[str, dict[str, list[_ResultRow]]] = {}
    for path in sorted(results_dir.glob("results_*_theta*.csv")):
        stem = path.stem[len("results_") :]
        method, _, tag = stem.rpartition("_theta")
        with open(path, newline="") as fh:
            rows = [
                _ResultRow(float(r["exceedance_rate"]), float(r["p_value"]), float(r["mean_var"]))
                for r in csv.DictReader(fh)
            ]
        groups.setdefault(tag, {})[method] = rows
    if not groups:
        raise QvarError(f"no results_*_theta*.csv files in {results_dir}")
    for tag in sorted(groups, key=float):
        per_method = dict(sorted(groups[tag].items(), key=lambda kv: _method_order(kv[0])))
        summaries = aggregate(per_method)
        out = results_dir / f"summary_theta{tag}.csv"
        write_summary_csv(out, summaries)
        print(f"theta={tag}: {len(summaries)} methods -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "run": _cmd_run,
        "backtest": _cmd_backtest,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except FitError as exc:
        print(f"qvar: fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except QvarError as exc:
        print(f"qvar: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
