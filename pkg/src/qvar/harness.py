"""Experiment orchestration: fit every method per asset, forecast one day
ahead through the test segment, backtest, and aggregate across assets.

All fits use the training segment only and forecasts roll through the test
segment without refitting. The joint QCNN trains once per quantile level on
the pooled windows of every asset and predicts each asset with that asset's
own scaler.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backtest import BacktestResult, score_forecast
from .baselines import (
    constant_var,
    fit_garch,
    fit_linear_qr,
    garch_var_path,
    linear_qr_var_path,
)
from .data import (
    DEFAULT_WINDOW,
    ReturnSeries,
    apply_scaler,
    fit_scaler,
    load_manifest,
    load_prices,
    log_returns,
    make_windows,
    pool_windows,
)
from .errors import (
    DegenerateDataError,
    DomainError,
    FitError,
    InsufficientDataError,
    QvarError,
)
from .qcnn import QcnnModel, TrainConfig, predict_var_series, save_model, train

logger = logging.getLogger(__name__)

METHOD_CONSTANT = "constant"
METHOD_GARCH = "garch"
METHOD_LINEAR_QR = "linear_qr"
METHOD_QCNN = "qcnn"
METHOD_JOINT_QCNN = "joint_qcnn"
ALL_METHODS = (METHOD_CONSTANT, METHOD_GARCH, METHOD_LINEAR_QR, METHOD_QCNN, METHOD_JOINT_QCNN)

DEFAULT_THETAS = (0.05, 0.01, 0.001)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full run needs; flags and config files both map onto this."""

    manifest: Path
    output_dir: Path
    thetas: tuple[float, ...] = DEFAULT_THETAS
    methods: tuple[str, ...] = ALL_METHODS
    train: TrainConfig = field(default_factory=TrainConfig)
    window: int = DEFAULT_WINDOW
    stride: int = 1
    seed: int = 0
    sample_size: int | None = None
    workers: int | None = None
    write_series: bool = False

    def __post_init__(self):
        if not self.methods:
            raise DomainError("methods list must not be empty")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise DomainError(f"unknown method {m!r}; choose from {ALL_METHODS}")
        for t in self.thetas:
            if not 0.0 < t < 1.0:
                raise DomainError(f"theta {t} must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class VarForecast:
    """One VaR value per test day for a single (asset, method, theta)."""

    asset_id: str
    method: str
    theta: float
    start_index: int
    values: np.ndarray


@dataclass(frozen=True)
class MethodSummary:
    """Cross-asset aggregate for one method at one quantile level."""

    method: str
    n_assets: int
    exceedance_mean: float
    exceedance_median: float
    exceedance_sd: float
    dq_rejection_rate_01: float
    dq_rejection_rate_05: float
    mean_var: float


def derive_seed(master: int, *parts) -> int:
    """Stable per-task sub-seed from the master seed and task identity."""
    key = int(master).to_bytes(8, "little", signed=False)
    h = hashlib.blake2b(digest_size=8, key=key)
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def load_assets(cfg: ExperimentConfig) -> tuple[list[ReturnSeries], list[dict]]:
    """Load the manifest's price files into return series.

    Assets whose training segment is too short for windowing are skipped
    with a warning rather than aborting the run. Returns the usable series
    and a record of skips.
    """
    paths = load_manifest(cfg.manifest)
    if cfg.sample_size is not None and cfg.sample_size < len(paths):
        rng = np.random.default_rng(derive_seed(cfg.seed, "asset-sample"))
        chosen = sorted(rng.choice(len(paths), size=cfg.sample_size, replace=False))
        paths = [paths[i] for i in chosen]
    series_list: list[ReturnSeries] = []
    skipped: list[dict] = []
    for path in paths:
        try:
            series = log_returns(load_prices(path))
        except QvarError as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append({"asset": path.stem, "stage": "load", "reason": str(exc)})
            continue
        if series.split_index < cfg.window + 1:
            reason = (
                f"training segment has {series.split_index} returns, "
                f"need >= {cfg.window + 1}"
            )
            logger.warning("skipping %s: %s", series.asset_id, reason)
            skipped.append({"asset": series.asset_id, "stage": "load", "reason": reason})
            continue
        series_list.append(series)
    return series_list, skipped


def _train_config_for(cfg: ExperimentConfig, *parts) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, *parts))


def run_single(
    series: ReturnSeries,
    theta: float,
    method: str,
    cfg: ExperimentConfig,
    model: QcnnModel | None = None,
) -> tuple[VarForecast, BacktestResult]:
    """Fit one method on the training segment and forecast every test day.

    Each forecast uses only information available before its day; the
    constant method emits the same value daily. For joint_qcnn a trained
    model must be supplied.
    """
    returns = series.returns
    split = series.split_index
    train_returns = series.train

    if method == METHOD_CONSTANT:
        values = np.full(len(returns) - split, constant_var(train_returns, theta))
    elif method == METHOD_GARCH:
        params = fit_garch(train_returns)
        init_var = float(np.var(train_returns - params.mu))
        values = garch_var_path(params, returns, split, theta, init_var)
    elif method == METHOD_LINEAR_QR:
        coeffs = fit_linear_qr(train_returns, theta)
        values = linear_qr_var_path(coeffs, returns, split)
    elif method in (METHOD_QCNN, METHOD_JOINT_QCNN):
        scaler = fit_scaler(series)
        if method == METHOD_QCNN:
            windows = make_windows(series, scaler, window=cfg.window, stride=cfg.stride)
            model = train(
                windows, theta, _train_config_for(cfg, "qcnn", series.asset_id, theta)
            )
        elif model is None:
            raise DomainError("joint_qcnn needs the jointly trained model")
        values = predict_var_series(model, apply_scaler(returns, scaler), scaler, split)
    else:
        raise DomainError(f"unknown method {method!r}")

    forecast = VarForecast(
        asset_id=series.asset_id,
        method=method,
        theta=theta,
        start_index=split,
        values=np.asarray(values, dtype=float),
    )
    result = score_forecast(series.test, forecast.values, theta)
    return forecast, result


def run_joint_qcnn(
    series_list: list[ReturnSeries],
    theta: float,
    cfg: ExperimentConfig,
) -> tuple[dict[str, tuple[VarForecast, BacktestResult]], QcnnModel]:
    """Train one model on the pooled windows of every asset, then forecast each.

    Windows are scaled per asset before pooling; the training shuffle mixes
    them across assets. Predictions unscale with each asset's own scaler.
    """
    if len(series_list) < 2:
        raise InsufficientDataError("joint training needs at least 2 assets")
    window_sets = []
    for series in series_list:
        scaler = fit_scaler(series)
        window_sets.append(make_windows(series, scaler, window=cfg.window, stride=cfg.stride))
    pooled = pool_windows(window_sets)
    model = train(pooled, theta, _train_config_for(cfg, "joint_qcnn", theta))
    out = {}
    for series in series_list:
        out[series.asset_id] = run_single(series, theta, METHOD_JOINT_QCNN, cfg, model=model)
    return out, model


def aggregate(results: dict[str, list[BacktestResult]]) -> list[MethodSummary]:
    """Cross-asset summary per method: exceedance stats, DQ rejections, mean VaR.

    The SD is the population formula over assets; rejection at level s counts
    assets with p_value < s, which includes zero-exceedance assets (p = 0).
    """
    summaries = []
    for method, method_results in results.items():
        if not method_results:
            continue
        rates = np.array([r.exceedance_rate for r in method_results])
        pvals = np.array([r.p_value for r in method_results])
        summaries.append(
            MethodSummary(
                method=method,
                n_assets=len(method_results),
                exceedance_mean=float(np.mean(rates)),
                exceedance_median=float(np.median(rates)),
                exceedance_sd=float(np.std(rates)),
                dq_rejection_rate_01=float(np.mean(pvals < 0.01)),
                dq_rejection_rate_05=float(np.mean(pvals < 0.05)),
                mean_var=float(np.mean([r.mean_var for r in method_results])),
            )
        )
    return summaries


# ---------------------------------------------------------------------------
# full runs and report files
# ---------------------------------------------------------------------------


def _run_task(args):
    series, theta, method, cfg = args
    try:
        forecast, result = run_single(series, theta, method, cfg)
        return series.asset_id, theta, method, "ok", (forecast, result)
    except (InsufficientDataError, DegenerateDataError, FitError) as exc:
        return series.asset_id, theta, method, "skip", str(exc)


def _theta_tag(theta: float) -> str:
    return format(theta, "g")


def results_csv_path(output_dir: Path, method: str, theta: float) -> Path:
    return Path(output_dir) / f"results_{method}_theta{_theta_tag(theta)}.csv"


def summary_csv_path(output_dir: Path, theta: float) -> Path:
    return Path(output_dir) / f"summary_theta{_theta_tag(theta)}.csv"


def write_results_csv(path: Path, rows: list[tuple[str, BacktestResult]]) -> None:
    lines = ["asset_id,exceedance_rate,dq_stat,p_value,mean_var"]
    for asset_id, r in rows:
        lines.append(
            f"{asset_id},{r.exceedance_rate!r},{r.dq_statistic!r},{r.p_value!r},{r.mean_var!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def write_summary_csv(path: Path, summaries: list[MethodSummary]) -> None:
    lines = [
        "method,exceedance_mean,exceedance_median,exceedance_sd,"
        "dq_rejection_rate_0.01,dq_rejection_rate_0.05,mean_var"
    ]
    for s in summaries:
        lines.append(
            f"{s.method},{s.exceedance_mean!r},{s.exceedance_median!r},"
            f"{s.exceedance_sd!r},{s.dq_rejection_rate_01!r},"
            f"{s.dq_rejection_rate_05!r},{s.mean_var!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def _write_series_csv(output_dir: Path, forecast: VarForecast) -> None:
    path = Path(output_dir) / (
        f"series_{forecast.method}_theta{_theta_tag(forecast.theta)}_{forecast.asset_id}.csv"
    )
    lines = ["day_index,var"]
    for i, v in enumerate(forecast.values):
        lines.append(f"{forecast.start_index + i},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


def write_run_manifest(cfg: ExperimentConfig, assets: list[str], skips: list[dict]) -> None:
    import scipy

    from . import __version__

    payload = {
        "qvar_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "config": {
            "manifest": str(cfg.manifest),
            "output_dir": str(cfg.output_dir),
            "thetas": list(cfg.thetas),
            "methods": list(cfg.methods),
            "window": cfg.window,
            "stride": cfg.stride,
            "seed": cfg.seed,
            "sample_size": cfg.sample_size,
            "train": dataclasses.asdict(cfg.train),
        },
        "assets": assets,
        "skipped": skips,
    }
    path = Path(cfg.output_dir) / "run_manifest.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def run_experiment(cfg: ExperimentConfig) -> dict[float, list[MethodSummary]]:
    """Run every (asset, method, theta), write the report files, return summaries.

    Per-asset tasks are independent and run on a process pool when workers
    allow; the joint model trains once per theta in the main process. Output
    is deterministic for a fixed config and seed regardless of worker count.
    """
    output_dir = Path(cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    series_list, skips = load_assets(cfg)
    if not series_list:
        raise InsufficientDataError(f"no usable assets in manifest {cfg.manifest}")

    single_methods = [m for m in cfg.methods if m != METHOD_JOINT_QCNN]
    tasks = [
        (series, theta, method, cfg)
        for theta in cfg.thetas
        for method in single_methods
        for series in series_list
    ]
    workers = cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)
    workers = max(1, min(workers, len(tasks))) if tasks else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        outcomes = [_run_task(t) for t in tasks]

    by_key: dict[tuple[str, float, str], tuple[VarForecast, BacktestResult]] = {}
    for asset_id, theta, method, status, payload in outcomes:
        if status == "ok":
            by_key[(asset_id, theta, method)] = payload
        else:
            logger.warning("skipping %s/%s at theta=%s: %s", asset_id, method, theta, payload)
            skips.append(
                {"asset": asset_id, "stage": f"{method}@{_theta_tag(theta)}", "reason": payload}
            )

    summaries_by_theta: dict[float, list[MethodSummary]] = {}
    for theta in cfg.thetas:
        joint: dict[str, tuple[VarForecast, BacktestResult]] = {}
        if METHOD_JOINT_QCNN in cfg.methods:
            try:
                joint, joint_model = run_joint_qcnn(series_list, theta, cfg)
                save_model(joint_model, output_dir / f"joint_qcnn_theta{_theta_tag(theta)}.json")
            except (InsufficientDataError, DegenerateDataError, FitError) as exc:
                logger.warning("joint_qcnn skipped at theta=%s: %s", theta, exc)
                skips.append(
                    {
                        "asset": "*",
                        "stage": f"{METHOD_JOINT_QCNN}@{_theta_tag(theta)}",
                        "reason": str(exc),
                    }
                )

        per_method: dict[str, list[BacktestResult]] = {}
        for method in cfg.methods:
            rows: list[tuple[str, BacktestResult]] = []
            for series in series_list:
                if method == METHOD_JOINT_QCNN:
                    pair = joint.get(series.asset_id)
                else:
                    pair = by_key.get((series.asset_id, theta, method))
                if pair is None:
                    continue
                forecast, result = pair
                rows.append((series.asset_id, result))
                if cfg.write_series:
                    _write_series_csv(output_dir, forecast)
            per_method[method] = [r for _, r in rows]
            write_results_csv(results_csv_path(output_dir, method, theta), rows)
        summaries = aggregate(per_method)
        write_summary_csv(summary_csv_path(output_dir, theta), summaries)
        summaries_by_theta[theta] = summaries

    write_run_manifest(cfg, [s.asset_id for s in series_list], skips)
    return summaries_by_theta
