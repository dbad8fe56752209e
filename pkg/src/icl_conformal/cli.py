"""Command-line front end: config parsing, orchestration, artifact output.

One JSON config file feeds every command, with sections {gen, train,
experiment, scaling}.  Outputs are CSV/JSON files in the output
directory next to a manifest; CSV bodies are deterministic given
(config, seed) — timestamps live only in the manifest, and every CSV
row carries the config hash of the manifest that produced it.

Exit codes: 0 ok, 2 usage/config, 3 resource/budget, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import IclPredictor, RidgeOraclePredictor, build_grid, full_cp
from .errors import BudgetError, ConfigError, FitFailureError, RankDeficiencyError
from .evaluation import (
    ExperimentConfig,
    OodSweep,
    benchmark_time,
    coverage_runner,
    resolve_ridge_lambda,
    run_coverage_experiment,
    run_ood_experiment,
    run_wdist_experiment,
    _sample_eval_task,
)
from .lsa import TrainConfig, load_checkpoint, save_checkpoint, train
from .scaling import (
    ScalingDatapoint,
    ScalingFit,
    collect_scaling_data,
    fit_scaling_law,
    make_flops_model,
    optimal_allocation,
)
from .taskgen import GenConfig, spawn_rngs

SEED_ENV = "ICL_CONFORMAL_SEED"
OUT_ENV = "ICL_CONFORMAL_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_NUMERICAL = 4


def _fmt(value) -> str:
    """Floats with 17 significant digits so CSVs round-trip exactly."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _pick(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return {k: section[k] for k in section}


def _build_gen(section: dict, seed_override: int | None) -> GenConfig:
    kwargs = _pick(section, GenConfig.__dataclass_fields__, "gen")
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return GenConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad gen section: {exc}") from exc


def _build_train(section: dict, gen: GenConfig) -> TrainConfig:
    kwargs = _pick(section, TrainConfig.__dataclass_fields__, "train")
    kwargs.pop("gen", None)
    try:
        return TrainConfig(gen=gen, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def _build_experiment(section: dict, gen: GenConfig) -> ExperimentConfig:
    section = dict(section)
    shift = section.pop("shift", None)
    kwargs = _pick(section, ExperimentConfig.__dataclass_fields__, "experiment")
    kwargs.pop("gen", None)
    if "context_sizes" in kwargs:
        kwargs["context_sizes"] = tuple(kwargs["context_sizes"])
    if shift is not None:
        kwargs["shift"] = OodSweep(param=shift["param"], values=tuple(shift["values"]))
    try:
        return ExperimentConfig(gen=gen, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad experiment section: {exc}") from exc


class RunContext:
    """Loaded config plus the output directory and manifest bookkeeping."""

    def __init__(self, config_path: str, seed: int | None, out_dir: str | None, command: str):
        try:
            raw = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        try:
            self.config = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(self.config, dict):
            raise ConfigError("config root must be a JSON object")

        env_seed = os.environ.get(SEED_ENV)
        if seed is None and env_seed is not None:
            seed = int(env_seed)
        self.seed_override = seed
        self.gen = _build_gen(self.config.get("gen", {}), seed)

        out = out_dir or os.environ.get(OUT_ENV) or "out"
        self.out_dir = Path(out)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs: list[str] = []

        canonical = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        digest = hashlib.sha256(
            f"{canonical}|seed={self.gen.seed}".encode("utf-8")
        ).hexdigest()
        self.config_hash = digest[:16]

    def experiment(self) -> ExperimentConfig:
        return _build_experiment(self.config.get("experiment", {}), self.gen)

    def train_config(self) -> TrainConfig:
        return _build_train(self.config.get("train", {}), self.gen)

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def write_manifest(self) -> None:
        manifest = {
            "format_version": 1,
            "artifact_version": __version__,
            "config_hash": self.config_hash,
            "seed": self.gen.seed,
            "command": self.command,
            "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "outputs": self.outputs,
        }
        (self.out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


AGGREGATE_HEADER = ["experiment", "config_hash", "metric", "median", "lo", "hi"]


def _aggregate_rows(ctx: RunContext, experiment: str, entries: list[tuple[str, float, float, float]]):
    return [(experiment, ctx.config_hash, m, med, lo, hi) for m, med, lo, hi in entries]


def _load_predictor(ctx: RunContext, checkpoint: str | None, needed: bool):
    if checkpoint is None:
        if needed:
            raise ConfigError("this method requires --checkpoint")
        return None
    params, _ = load_checkpoint(checkpoint, expected_d=ctx.gen.d)
    return IclPredictor(params)


def cmd_train(ctx: RunContext) -> int:
    cfg = ctx.train_config()
    report = train(cfg, seed=ctx.gen.seed)
    ckpt_path = ctx.path("checkpoint.bin")
    save_checkpoint(ckpt_path, report.final_params, seed=ctx.gen.seed, cfg=cfg)
    report_path = ctx.path("train_report.json")
    payload = {
        "config_hash": ctx.config_hash,
        "N": report.N,
        "D": report.D,
        "flops_total": report.flops_total,
        "steps_executed": report.steps_executed,
        "final_loss": report.loss_curve[-1][1] if report.loss_curve else None,
        "loss_curve": [[s, _fmt(l)] for s, l in report.loss_curve],
    }
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    ctx.write_manifest()
    return EXIT_OK


def cmd_eval_coverage(ctx: RunContext, checkpoint: str | None) -> int:
    cfg = ctx.experiment()
    predictor = _load_predictor(ctx, checkpoint, needed=cfg.method == "cp_icl")
    result = run_coverage_experiment(cfg, predictor)
    entries = [
        (metric, *result.aggregate(metric))
        for metric in ("coverage", "width_hull", "set_measure")
    ]
    _write_csv(ctx.path("coverage.csv"), AGGREGATE_HEADER, _aggregate_rows(ctx, "coverage", entries))
    ctx.write_manifest()
    return EXIT_OK


def cmd_eval_wdist(ctx: RunContext, checkpoint: str | None) -> int:
    cfg = ctx.experiment()
    predictor = _load_predictor(ctx, checkpoint, needed=True)
    rows = run_wdist_experiment(cfg, predictor)
    entries = []
    for row in rows:
        med, lo, hi = np.percentile(row.per_run_w1, [50.0, 2.5, 97.5])
        entries.append((f"w1@n={row.n}", float(med), float(lo), float(hi)))
    _write_csv(ctx.path("wdist.csv"), AGGREGATE_HEADER, _aggregate_rows(ctx, "wdist", entries))
    ctx.write_manifest()
    return EXIT_OK


def cmd_eval_ood(ctx: RunContext, checkpoint: str | None) -> int:
    cfg = ctx.experiment()
    predictor = _load_predictor(ctx, checkpoint, needed=True)
    rows = run_ood_experiment(cfg, predictor)
    entries = []
    for row in rows:
        entries.append((f"coverage@{row.param}={_fmt(row.value)}", *row.coverage))
        med, lo, hi = np.percentile(row.per_run_w1, [50.0, 2.5, 97.5])
        entries.append((f"w1@{row.param}={_fmt(row.value)}", float(med), float(lo), float(hi)))
    _write_csv(ctx.path("ood.csv"), AGGREGATE_HEADER, _aggregate_rows(ctx, "ood", entries))
    ctx.write_manifest()
    return EXIT_OK


def cmd_eval_bench(ctx: RunContext, checkpoint: str | None) -> int:
    cfg = ctx.experiment()
    lam = resolve_ridge_lambda(cfg)
    methods: dict[str, object] = {}
    for method in ("cp_icl", "cp_ridge", "split_cp_ridge"):
        if method == "cp_icl":
            predictor = _load_predictor(ctx, checkpoint, needed=False)
            if predictor is None:
                continue
            methods[method] = coverage_runner(
                method, alpha=cfg.alpha, grid_size=cfg.grid_size,
                icl_params=predictor.params, lam=lam,
            )
        else:
            methods[method] = coverage_runner(
                method, alpha=cfg.alpha, grid_size=cfg.grid_size,
                lam=lam, split_frac=cfg.split_frac,
            )
    sizes = cfg.context_sizes or (50, 100, 300)
    rows = benchmark_time(
        methods, sizes, repetitions=30, gen=cfg.gen, tests_per_batch=cfg.tests_per_run
    )
    entries = [
        (f"seconds[{r.method}]@n={r.n}", r.median_s, r.lo_s, r.hi_s) for r in rows
    ]
    _write_csv(ctx.path("bench.csv"), AGGREGATE_HEADER, _aggregate_rows(ctx, "bench", entries))
    ctx.write_manifest()
    return EXIT_OK


def cmd_eval_point(ctx: RunContext, checkpoint: str | None) -> int:
    """Typicalness curves of both methods for a single query point."""
    cfg = ctx.experiment()
    predictor = _load_predictor(ctx, checkpoint, needed=True)
    rng = spawn_rngs((ctx.gen.seed, 0xB0), 1)[0]
    X_ctx, y_ctx, X_test, _ = _sample_eval_task(cfg.gen, cfg.gen.n, 1, rng)
    grid = build_grid(y_ctx, cfg.grid_size)
    oracle = RidgeOraclePredictor(resolve_ridge_lambda(cfg))
    set_icl = full_cp(predictor, X_ctx, y_ctx, X_test[0], cfg.alpha, grid)
    set_ridge = full_cp(oracle, X_ctx, y_ctx, X_test[0], cfg.alpha, grid)
    rows = [
        (z, pi_icl, pi_ridge)
        for z, pi_icl, pi_ridge in zip(
            grid.values, set_icl.typicalness, set_ridge.typicalness
        )
    ]
    _write_csv(ctx.path("point.csv"), ["z", "pi_icl", "pi_ridge"], rows)
    ctx.write_manifest()
    return EXIT_OK


def _scaling_section(ctx: RunContext) -> dict:
    section = ctx.config.get("scaling", {})
    allowed = {"lambda_asym", "n_starts", "budgets", "layers", "batch_size",
               "learning_rate", "steps", "eval_runs", "eval_tests"}
    return _pick(section, {k: None for k in allowed}, "scaling")


def cmd_scaling_sweep(ctx: RunContext) -> int:
    section = _scaling_section(ctx)
    budgets = section.get("budgets", [1e8, 3e8])
    layers = section.get("layers", [1, 2, 3, 4])
    train_cfgs = []
    for budget in budgets:
        for L in layers:
            train_cfgs.append(
                TrainConfig(
                    gen=ctx.gen,
                    steps=section.get("steps", 10_000_000),
                    batch_size=section.get("batch_size", 32),
                    learning_rate=section.get("learning_rate", 1e-3),
                    flop_budget=int(budget),
                    n_layers=int(L),
                )
            )
    eval_cfg = dataclasses.replace(
        ctx.experiment(),
        runs=section.get("eval_runs", 30),
        tests_per_run=section.get("eval_tests", 10),
        method="cp_icl",
    )
    datapoints, statuses = collect_scaling_data(train_cfgs, eval_cfg, seed=ctx.gen.seed)
    _write_csv(
        ctx.path("scaling_data.csv"),
        ["N", "D", "loss", "flops"],
        [(p.N, p.D, p.loss, p.flops) for p in datapoints],
    )
    failures = [s for s in statuses if not s.ok]
    for s in failures:
        print(f"config {s.index}: {s.message}", file=sys.stderr)
    ctx.write_manifest()
    return EXIT_OK


def read_scaling_csv(path) -> list[ScalingDatapoint]:
    """Read an (N, D, loss, flops) table, naming the offending row on error."""
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["N", "D", "loss", "flops"]:
            raise ConfigError(
                f"{path}: expected header N,D,loss,flops, got {reader.fieldnames}"
            )
        for i, row in enumerate(reader, start=2):
            try:
                points.append(
                    ScalingDatapoint(
                        N=float(row["N"]), D=float(row["D"]),
                        loss=float(row["loss"]), flops=float(row["flops"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad row {i}: {exc}") from exc
    return points


def _fit_to_dict(fit: ScalingFit) -> dict:
    return {
        "alpha": fit.alpha,
        "beta": fit.beta,
        "A": fit.A,
        "B": fit.B,
        "E": fit.E,
        "a": fit.a,
        "b": fit.b,
        "fit_loss": fit.fit_loss,
        "n_starts": fit.n_starts,
        "n_converged": fit.n_converged,
    }


def cmd_scaling_fit(ctx: RunContext, data_path: str) -> int:
    section = _scaling_section(ctx)
    points = read_scaling_csv(data_path)
    fit = fit_scaling_law(
        points,
        lambda_asym=section.get("lambda_asym", 0.1),
        n_starts=section.get("n_starts", 64),
    )
    ctx.path("scaling_fit.json").write_text(
        json.dumps({"config_hash": ctx.config_hash, **_fit_to_dict(fit)}, indent=2)
        + "\n",
        encoding="utf-8",
    )
    ctx.write_manifest()
    return EXIT_OK


def cmd_scaling_allocate(ctx: RunContext, fit_path: str) -> int:
    section = _scaling_section(ctx)
    raw = json.loads(Path(fit_path).read_text(encoding="utf-8"))
    fit = ScalingFit(
        alpha=raw["alpha"], beta=raw["beta"], A=raw["A"], B=raw["B"], E=raw["E"],
        fit_loss=raw.get("fit_loss", 0.0), n_starts=raw.get("n_starts", 0),
        n_converged=raw.get("n_converged", 0),
    )
    train_section = ctx.config.get("train", {})
    flops_model = make_flops_model(
        d=ctx.gen.d, n=ctx.gen.n, batch_size=train_section.get("batch_size", 64)
    )
    budgets = section.get("budgets", [1e8, 3e8])
    rows = []
    for C in budgets:
        N_hat, D_hat = optimal_allocation(fit, float(C), flops_model)
        rows.append((C, N_hat, D_hat))
    _write_csv(ctx.path("allocation.csv"), ["budget", "N_hat", "D_hat"], rows)
    ctx.write_manifest()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icl-conformal",
        description="Conformal prediction with in-context learning: train, evaluate, scale.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory (default ./out)")
    parser.add_argument(
        "--workers", type=int, default=os.cpu_count(),
        help="worker count for parallel maps (currently informational)",
    )
    parser.add_argument("--checkpoint", default=None, help="model checkpoint path")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="pre-train a model and write a checkpoint")
    eval_p = sub.add_parser("eval", help="run an evaluation experiment")
    eval_p.add_argument(
        "subcommand", choices=["coverage", "wdist", "ood", "bench", "point"]
    )
    scaling_p = sub.add_parser("scaling", help="scaling-law sweep/fit/allocate")
    scaling_p.add_argument("subcommand", choices=["sweep", "fit", "allocate"])
    scaling_p.add_argument("--data", default=None, help="datapoint CSV (fit)")
    scaling_p.add_argument("--fit", default=None, help="fit JSON (allocate)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        command = args.command
        if command == "eval":
            command = f"eval/{args.subcommand}"
        elif command == "scaling":
            command = f"scaling/{args.subcommand}"
        ctx = RunContext(args.config, args.seed, args.out, command)
        if args.command == "train":
            return cmd_train(ctx)
        if args.command == "eval":
            handler = {
                "coverage": cmd_eval_coverage,
                "wdist": cmd_eval_wdist,
                "ood": cmd_eval_ood,
                "bench": cmd_eval_bench,
                "point": cmd_eval_point,
            }[args.subcommand]
            return handler(ctx, args.checkpoint)
        if args.command == "scaling":
            if args.subcommand == "sweep":
                return cmd_scaling_sweep(ctx)
            if args.subcommand == "fit":
                if args.data is None:
                    raise ConfigError("scaling fit requires --data CSV")
                return cmd_scaling_fit(ctx, args.data)
            if args.data is None and args.fit is None:
                raise ConfigError("scaling allocate requires --fit JSON")
            return cmd_scaling_allocate(ctx, args.fit)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (FitFailureError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
