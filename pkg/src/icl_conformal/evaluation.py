"""Experiment harnesses: coverage, Wasserstein comparisons, shifts, timing.

Every experiment draws per-run child streams from one root seed, so
runs are independent, order-insensitive and replayable.  Aggregates are
medians with 2.5/97.5 percentile bands across runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .conformal import (
    IclPredictor,
    Predictor,
    RidgeOraclePredictor,
    build_grid,
    full_cp,
    split_cp,
)
from .errors import DegenerateDistributionError
from .taskgen import GenConfig, sample_task, spawn_rngs
from .ridge import bayes_lambda

__all__ = [
    "ExperimentConfig",
    "OodSweep",
    "EvalResult",
    "WdistRow",
    "OodRow",
    "BenchRow",
    "resolve_ridge_lambda",
    "run_coverage_experiment",
    "wasserstein_1d",
    "predictive_pmf",
    "pi_value_distance",
    "run_wdist_experiment",
    "run_ood_experiment",
    "benchmark_time",
    "coverage_runner",
]

METHODS = ("cp_icl", "cp_ridge", "split_cp_ridge")


@dataclass(frozen=True)
class OodSweep:
    """Inference-time override sweep: `param` is "a" or "sigma_w"."""

    param: str
    values: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if self.param not in ("a", "sigma_w"):
            raise ValueError(f"shift param must be 'a' or 'sigma_w', got {self.param!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared knobs for the experiment harnesses.

    One run = one fresh task providing n context points plus
    tests_per_run query points.  `ridge_lambda=None` resolves to the
    sigma_w^2/sigma_n^2 oracle value (or 0 when sigma_n = 0).
    """

    gen: GenConfig
    runs: int = 1000
    tests_per_run: int = 100
    alpha: float = 0.1
    method: str = "cp_ridge"
    grid_size: int = 1000
    ridge_lambda: float | None = None
    split_frac: float = 0.5
    context_sizes: tuple[int, ...] = ()
    shift: OodSweep | None = None
    wdist_mode: str = "pmf"

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.tests_per_run < 1:
            raise ValueError(f"tests_per_run must be >= 1, got {self.tests_per_run}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.split_frac < 1.0:
            raise ValueError(f"split_frac must lie in (0, 1), got {self.split_frac}")
        if self.wdist_mode not in ("pmf", "pi_values"):
            raise ValueError(f"wdist_mode must be 'pmf' or 'pi_values', got {self.wdist_mode!r}")


def resolve_ridge_lambda(cfg: ExperimentConfig, gen: GenConfig | None = None) -> float:
    gen = gen or cfg.gen
    if cfg.ridge_lambda is not None:
        return cfg.ridge_lambda
    if gen.sigma_n == 0.0:
        return 0.0
    return bayes_lambda(gen.sigma_w, gen.sigma_n)


def _sample_eval_task(gen: GenConfig, n: int, n_tests: int, rng: np.random.Generator):
    """n context points and n_tests query points drawn from one task."""
    task = sample_task(replace(gen, n=n + n_tests - 1), rng)
    return (
        task.X[:n],
        task.y[:n],
        task.X[n:],
        task.y[n:],
    )


@dataclass(frozen=True)
class EvalResult:
    """Per-run metrics and their aggregate bands."""

    method: str
    per_run: dict[str, np.ndarray]

    def aggregate(self, metric: str) -> tuple[float, float, float]:
        """(median, 2.5th, 97.5th percentile) across runs."""
        values = self.per_run[metric]
        med, lo, hi = np.percentile(values, [50.0, 2.5, 97.5])
        return float(med), float(lo), float(hi)

    def aggregates(self) -> dict[str, tuple[float, float, float]]:
        return {metric: self.aggregate(metric) for metric in self.per_run}


def _coverage_one_run(
    cfg: ExperimentConfig,
    predictor: Predictor | None,
    rng: np.random.Generator,
) -> tuple[float, float, float, float]:
    """One run: returns (coverage, median hull width, median set measure, seconds)."""
    gen = cfg.gen
    X_ctx, y_ctx, X_test, y_test = _sample_eval_task(gen, gen.n, cfg.tests_per_run, rng)
    t0 = time.perf_counter()
    if cfg.method == "split_cp_ridge":
        if gen.n < 2:
            raise ValueError("split conformal needs n >= 2 context points")
        lam = resolve_ridge_lambda(cfg)
        n_train = max(1, int(round(cfg.split_frac * gen.n)))
        n_train = min(n_train, gen.n - 1)
        covered = np.empty(cfg.tests_per_run, dtype=bool)
        widths = np.empty(cfg.tests_per_run)
        for j in range(cfg.tests_per_run):
            interval = split_cp(
                X_ctx[:n_train],
                y_ctx[:n_train],
                X_ctx[n_train:],
                y_ctx[n_train:],
                X_test[j],
                cfg.alpha,
                lam,
            )
            covered[j] = interval.covers(y_test[j])
            widths[j] = interval.width
        measures = widths
    else:
        if cfg.method == "cp_ridge" and predictor is None:
            predictor = RidgeOraclePredictor(resolve_ridge_lambda(cfg))
        if predictor is None:
            raise ValueError(f"method {cfg.method!r} requires a predictor")
        grid = build_grid(y_ctx, cfg.grid_size)
        covered = np.empty(cfg.tests_per_run, dtype=bool)
        widths = np.empty(cfg.tests_per_run)
        measures = np.empty(cfg.tests_per_run)
        for j in range(cfg.tests_per_run):
            pset = full_cp(predictor, X_ctx, y_ctx, X_test[j], cfg.alpha, grid)
            covered[j] = pset.covers(y_test[j])
            widths[j] = pset.hull_width
            measures[j] = pset.set_measure
    seconds = time.perf_counter() - t0
    return (
        float(np.mean(covered)),
        float(np.median(widths)),
        float(np.median(measures)),
        seconds,
    )


def run_coverage_experiment(
    cfg: ExperimentConfig,
    predictor: Predictor | None = None,
) -> EvalResult:
    """Coverage, interval width and wall-clock time across independent runs.

    Coverage of a run is the fraction of its test points whose true
    label falls inside the prediction interval.
    """
    rngs = spawn_rngs(cfg.gen.seed, cfg.runs)
    rows = [_coverage_one_run(cfg, predictor, rng) for rng in rngs]
    coverage, width, measure, seconds = map(np.array, zip(*rows))
    return EvalResult(
        method=cfg.method,
        per_run={
            "coverage": coverage,
            "width_hull": width,
            "set_measure": measure,
            "seconds": seconds,
        },
    )


def wasserstein_1d(
    pmf_a: tuple[np.ndarray, np.ndarray],
    pmf_b: tuple[np.ndarray, np.ndarray],
) -> float:
    """Wasserstein-1 distance between two pmfs on a shared grid.

    Computed by the one-dimensional closed form: the integral of the
    absolute difference of the cumulative distribution functions,

        W1 = sum_k |F_a(z_k) - F_b(z_k)| * (z_{k+1} - z_k).
    """
    grid_a, w_a = (np.asarray(v, dtype=float) for v in pmf_a)
    grid_b, w_b = (np.asarray(v, dtype=float) for v in pmf_b)
    if grid_a.shape != grid_b.shape or not np.array_equal(grid_a, grid_b):
        raise ValueError("pmfs must share one grid")
    if w_a.shape != grid_a.shape or w_b.shape != grid_b.shape:
        raise ValueError("weights must match the grid shape")
    for w in (w_a, w_b):
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1 within 1e-9, got {w.sum()!r}")
    cdf_diff = np.abs(np.cumsum(w_a) - np.cumsum(w_b))[:-1]
    return float(np.sum(cdf_diff * np.diff(grid_a)))


def predictive_pmf(pset) -> tuple[np.ndarray, np.ndarray]:
    """Typicalness curve normalized into a predictive pmf over the grid."""
    total = pset.typicalness.sum()
    if total <= 0.0:
        raise DegenerateDistributionError("typicalness is zero everywhere")
    return pset.grid.values, pset.typicalness / total


def pi_value_distance(pi_a: np.ndarray, pi_b: np.ndarray) -> float:
    """Wasserstein-1 between the bare multisets of typicalness values.

    Equal-size empirical distributions: mean absolute difference of the
    sorted values (the quantile-function form of W1).
    """
    pi_a = np.sort(np.asarray(pi_a, dtype=float))
    pi_b = np.sort(np.asarray(pi_b, dtype=float))
    if pi_a.shape != pi_b.shape:
        raise ValueError("typicalness vectors must have equal length")
    return float(np.mean(np.abs(pi_a - pi_b)))


@dataclass(frozen=True)
class WdistRow:
    d: int
    n: int
    ratio: float
    per_run_w1: np.ndarray

    @property
    def mean_w1(self) -> float:
        return float(np.mean(self.per_run_w1))


def _wdist_one_run(
    cfg: ExperimentConfig,
    n: int,
    icl: Predictor,
    oracle: Predictor,
    rng: np.random.Generator,
) -> float:
    """Mean W1 between the two methods' predictive pmfs over test points."""
    gen = cfg.gen
    X_ctx, y_ctx, X_test, _ = _sample_eval_task(gen, n, cfg.tests_per_run, rng)
    grid = build_grid(y_ctx, cfg.grid_size)
    dists = []
    for j in range(cfg.tests_per_run):
        set_icl = full_cp(icl, X_ctx, y_ctx, X_test[j], cfg.alpha, grid)
        set_orc = full_cp(oracle, X_ctx, y_ctx, X_test[j], cfg.alpha, grid)
        if cfg.wdist_mode == "pi_values":
            dists.append(pi_value_distance(set_icl.typicalness, set_orc.typicalness))
            continue
        try:
            pmf_icl = predictive_pmf(set_icl)
            pmf_orc = predictive_pmf(set_orc)
        except DegenerateDistributionError:
            continue
        dists.append(wasserstein_1d(pmf_icl, pmf_orc))
    return float(np.mean(dists)) if dists else float("nan")


def run_wdist_experiment(
    cfg: ExperimentConfig,
    icl_predictor: Predictor,
    ridge_predictor: Predictor | None = None,
) -> list[WdistRow]:
    """Mean W1 between in-context and oracle predictive pmfs per d/n ratio.

    Context sizes come from cfg.context_sizes; d is fixed by the
    generator, so each size n contributes the ratio d/n.
    """
    if not cfg.context_sizes:
        raise ValueError("cfg.context_sizes must be non-empty")
    if ridge_predictor is None:
        ridge_predictor = RidgeOraclePredictor(resolve_ridge_lambda(cfg))
    d = cfg.gen.d
    rows = []
    for n in cfg.context_sizes:
        rngs = spawn_rngs((cfg.gen.seed, n), cfg.runs)
        w1 = np.array(
            [_wdist_one_run(cfg, n, icl_predictor, ridge_predictor, rng) for rng in rngs]
        )
        rows.append(WdistRow(d=d, n=n, ratio=d / n, per_run_w1=w1))
    return rows


@dataclass(frozen=True)
class OodRow:
    param: str
    value: float
    coverage: tuple[float, float, float]
    per_run_coverage: np.ndarray
    per_run_w1: np.ndarray

    @property
    def mean_w1(self) -> float:
        return float(np.mean(self.per_run_w1))


def run_ood_experiment(
    cfg: ExperimentConfig,
    icl_predictor: Predictor,
) -> list[OodRow]:
    """Sweep an inference-time distribution parameter away from pre-training.

    Context and test points are drawn from the same shifted
    distribution; only the model's pre-training distribution stays
    fixed.  Records in-context coverage and W1 against a ridge oracle
    whose regularizer tracks the shifted weight scale.
    """
    if cfg.shift is None or len(cfg.shift.values) == 0:
        raise ValueError("cfg.shift must name a parameter and a non-empty sweep")
    param_key = {"a": 1, "sigma_w": 2}[cfg.shift.param]
    rows = []
    for idx, value in enumerate(cfg.shift.values):
        gen_v = replace(cfg.gen, **{cfg.shift.param: value})
        cfg_v = replace(cfg, gen=gen_v, method="cp_icl")
        oracle = RidgeOraclePredictor(resolve_ridge_lambda(cfg_v, gen_v))
        rngs_cov = spawn_rngs((cfg.gen.seed, param_key, idx, 0), cfg.runs)
        rngs_w1 = spawn_rngs((cfg.gen.seed, param_key, idx, 1), cfg.runs)
        cov = np.array(
            [_coverage_one_run(cfg_v, icl_predictor, rng)[0] for rng in rngs_cov]
        )
        w1 = np.array(
            [
                _wdist_one_run(cfg_v, gen_v.n, icl_predictor, oracle, rng)
                for rng in rngs_w1
            ]
        )
        med, lo, hi = np.percentile(cov, [50.0, 2.5, 97.5])
        rows.append(
            OodRow(
                param=cfg.shift.param,
                value=value,
                coverage=(float(med), float(lo), float(hi)),
                per_run_coverage=cov,
                per_run_w1=w1,
            )
        )
    return rows


@dataclass(frozen=True)
class BenchRow:
    method: str
    n: int
    median_s: float
    lo_s: float
    hi_s: float


def coverage_runner(
    method: str,
    *,
    alpha: float,
    grid_size: int,
    icl_params=None,
    lam: float = 1.0,
    split_frac: float = 0.5,
):
    """Build a callable (X_ctx, y_ctx, X_test) -> None for timing."""
    if method == "cp_icl":
        predictor = IclPredictor(icl_params)
    elif method == "cp_ridge":
        predictor = RidgeOraclePredictor(lam)
    elif method != "split_cp_ridge":
        raise ValueError(f"unknown method {method!r}")

    def run(X_ctx, y_ctx, X_test):
        n = y_ctx.size
        if method == "split_cp_ridge":
            n_train = max(1, min(int(round(split_frac * n)), n - 1))
            for x in X_test:
                split_cp(
                    X_ctx[:n_train], y_ctx[:n_train],
                    X_ctx[n_train:], y_ctx[n_train:],
                    x, alpha, lam,
                )
        else:
            grid = build_grid(y_ctx, grid_size)
            for x in X_test:
                full_cp(predictor, X_ctx, y_ctx, x, alpha, grid)

    return run


def benchmark_time(
    methods: dict[str, object],
    context_sizes: tuple[int, ...] = (50, 100, 300),
    repetitions: int = 30,
    *,
    gen: GenConfig,
    tests_per_batch: int = 10,
    warmup: int = 5,
) -> list[BenchRow]:
    """Wall-clock seconds per prediction-set construction over a test batch.

    Median and 2.5/97.5 percentile bands over `repetitions`, after
    `warmup` untimed iterations.  Absolute values are hardware-bound;
    only the quantile ordering is contractual.
    """
    if not methods:
        raise ValueError("methods must be non-empty")
    rows = []
    for name, runner in methods.items():
        for n in context_sizes:
            rng = spawn_rngs((gen.seed, n), 1)[0]
            X_ctx, y_ctx, X_test, _ = _sample_eval_task(gen, n, tests_per_batch, rng)
            for _ in range(warmup):
                runner(X_ctx, y_ctx, X_test)
            samples = np.empty(repetitions)
            for r in range(repetitions):
                t0 = time.perf_counter()
                runner(X_ctx, y_ctx, X_test)
                samples[r] = time.perf_counter() - t0
            med, lo, hi = np.percentile(samples, [50.0, 2.5, 97.5])
            rows.append(BenchRow(method=name, n=n, median_s=float(med), lo_s=float(lo), hi_s=float(hi)))
    return rows
