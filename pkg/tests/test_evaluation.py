import numpy as np
import pytest
import scipy.optimize

from icl_conformal.conformal import PredictionSet, Grid, RidgeOraclePredictor, build_grid
from icl_conformal.errors import DegenerateDistributionError
from icl_conformal.evaluation import (
    ExperimentConfig,
    OodSweep,
    benchmark_time,
    coverage_runner,
    pi_value_distance,
    predictive_pmf,
    resolve_ridge_lambda,
    run_coverage_experiment,
    run_ood_experiment,
    run_wdist_experiment,
    wasserstein_1d,
)
from icl_conformal.taskgen import GenConfig, rng_from_seed


def transport_lp(grid, wa, wb) -> float:
    """Independent oracle: solve the optimal-transport linear program."""
    K = len(grid)
    cost = np.abs(grid[:, None] - grid[None, :]).ravel()
    A_eq = []
    b_eq = []
    for i in range(K):  # row sums = wa
        row = np.zeros((K, K))
        row[i, :] = 1.0
        A_eq.append(row.ravel())
        b_eq.append(wa[i])
    for j in range(K):  # column sums = wb
        col = np.zeros((K, K))
        col[:, j] = 1.0
        A_eq.append(col.ravel())
        b_eq.append(wb[j])
    res = scipy.optimize.linprog(cost, A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=(0, None))
    assert res.success
    return float(res.fun)


class TestWasserstein1d:
    def test_identical_pmfs(self):
        grid = np.linspace(-1, 1, 7)
        w = np.full(7, 1 / 7)
        assert wasserstein_1d((grid, w), (grid, w)) == 0.0

    def test_point_mass_translation(self):
        grid = np.array([0.0, 1.0, 2.0, 3.0])
        a = np.array([1.0, 0.0, 0.0, 0.0])
        b = np.array([0.0, 0.0, 0.0, 1.0])
        assert wasserstein_1d((grid, a), (grid, b)) == pytest.approx(3.0)

    def test_three_point_lp_oracle(self):
        grid = np.array([-1.0, 0.5, 2.0])
        wa = np.array([0.2, 0.5, 0.3])
        wb = np.array([0.6, 0.1, 0.3])
        ours = wasserstein_1d((grid, wa), (grid, wb))
        assert abs(ours - transport_lp(grid, wa, wb)) < 1e-9

    def test_random_pmfs_against_lp(self):
        rng = rng_from_seed(0)
        for _ in range(10):
            K = int(rng.integers(2, 6))
            grid = np.sort(rng.uniform(-3, 3, size=K))
            while np.any(np.diff(grid) <= 0):
                grid = np.sort(rng.uniform(-3, 3, size=K))
            wa = rng.dirichlet(np.ones(K))
            wb = rng.dirichlet(np.ones(K))
            ours = wasserstein_1d((grid, wa), (grid, wb))
            assert abs(ours - transport_lp(grid, wa, wb)) < 1e-9

    def test_metric_properties_on_random_triples(self):
        rng = rng_from_seed(1)
        grid = np.linspace(-2, 2, 9)
        for _ in range(25):
            a, b, c = (rng.dirichlet(np.ones(9)) for _ in range(3))
            dab = wasserstein_1d((grid, a), (grid, b))
            dba = wasserstein_1d((grid, b), (grid, a))
            dac = wasserstein_1d((grid, a), (grid, c))
            dcb = wasserstein_1d((grid, c), (grid, b))
            assert abs(dab - dba) <= 1e-9
            assert dab <= dac + dcb + 1e-9

    def test_grid_mismatch_rejected(self):
        g1 = np.array([0.0, 1.0])
        g2 = np.array([0.0, 2.0])
        w = np.array([0.5, 0.5])
        with pytest.raises(ValueError):
            wasserstein_1d((g1, w), (g2, w))

    def test_unnormalized_rejected(self):
        grid = np.array([0.0, 1.0])
        with pytest.raises(ValueError):
            wasserstein_1d((grid, np.array([0.6, 0.6])), (grid, np.array([0.5, 0.5])))


def make_pset(grid_values, pi, alpha=0.1):
    pi = np.asarray(pi, dtype=float)
    accepted = pi >= alpha
    idx = np.flatnonzero(accepted)
    interval = (
        (float(grid_values[idx[0]]), float(grid_values[idx[-1]])) if idx.size else None
    )
    return PredictionSet(
        grid=Grid(values=np.asarray(grid_values, dtype=float)),
        typicalness=pi,
        alpha=alpha,
        accepted=accepted,
        interval=interval,
        contiguous=True,
    )


class TestPredictivePmf:
    def test_uniform_typicalness(self):
        pset = make_pset(np.linspace(0, 1, 5), np.full(5, 0.4))
        _, w = predictive_pmf(pset)
        np.testing.assert_allclose(w, np.full(5, 0.2))

    def test_weights_sum_to_one(self):
        rng = rng_from_seed(2)
        pset = make_pset(np.linspace(0, 1, 8), rng.uniform(0, 1, 8))
        _, w = predictive_pmf(pset)
        assert w.sum() == pytest.approx(1.0)

    def test_single_spike(self):
        pi = np.zeros(6)
        pi[2] = 0.7
        pset = make_pset(np.linspace(0, 5, 6), pi)
        grid, w = predictive_pmf(pset)
        assert w[2] == 1.0 and w.sum() == 1.0

    def test_degenerate(self):
        pset = make_pset(np.linspace(0, 1, 4), np.zeros(4))
        with pytest.raises(DegenerateDistributionError):
            predictive_pmf(pset)


class TestPiValueDistance:
    def test_identical(self):
        pi = np.array([0.1, 0.5, 0.9])
        assert pi_value_distance(pi, pi) == 0.0

    def test_shift(self):
        a = np.array([0.1, 0.2, 0.3])
        assert pi_value_distance(a, a + 0.2) == pytest.approx(0.2)


class TestCoverageExperiment:
    def test_single_run_aggregates_equal_run(self):
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=12, seed=5),
            runs=1, tests_per_run=10, alpha=0.1, method="cp_ridge", grid_size=60,
        )
        res = run_coverage_experiment(cfg)
        med, lo, hi = res.aggregate("coverage")
        assert med == lo == hi == res.per_run["coverage"][0]

    def test_half_alpha_coverage(self):
        # Second significance level: alpha=0.5 should cover about half.
        cfg = ExperimentConfig(
            gen=GenConfig(d=3, n=19, sigma_n=0.5, seed=6),
            runs=150, tests_per_run=20, alpha=0.5, method="cp_ridge", grid_size=120,
        )
        res = run_coverage_experiment(cfg)
        assert abs(res.aggregate("coverage")[0] - 0.5) <= 0.05

    def test_seed_reproducibility(self):
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=10, seed=7),
            runs=4, tests_per_run=5, method="cp_ridge", grid_size=40,
        )
        a = run_coverage_experiment(cfg)
        b = run_coverage_experiment(cfg)
        np.testing.assert_array_equal(a.per_run["coverage"], b.per_run["coverage"])
        np.testing.assert_array_equal(a.per_run["width_hull"], b.per_run["width_hull"])

    def test_disjoint_seed_blocks_self_consistent(self):
        # The estimator agrees with itself across disjoint seed blocks
        # within binomial noise.
        base = dict(runs=120, tests_per_run=20, alpha=0.1, method="cp_ridge", grid_size=120)
        r1 = run_coverage_experiment(
            ExperimentConfig(gen=GenConfig(d=2, n=19, seed=100), **base)
        )
        r2 = run_coverage_experiment(
            ExperimentConfig(gen=GenConfig(d=2, n=19, seed=200), **base)
        )
        m1 = float(np.mean(r1.per_run["coverage"]))
        m2 = float(np.mean(r2.per_run["coverage"]))
        # ~2400 points per block; 4 sigma of a 0.9 binomial mean.
        tol = 4 * np.sqrt(0.9 * 0.1 / 2400) * np.sqrt(2)
        assert abs(m1 - m2) <= tol

    def test_split_method_runs_without_predictor(self):
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=20, seed=8),
            runs=5, tests_per_run=8, method="split_cp_ridge",
        )
        res = run_coverage_experiment(cfg)
        assert res.per_run["coverage"].shape == (5,)

    def test_icl_method_needs_predictor(self):
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=10, seed=9), runs=2, tests_per_run=2, method="cp_icl"
        )
        with pytest.raises(ValueError):
            run_coverage_experiment(cfg, predictor=None)


class TestResolveLambda:
    def test_explicit_override_wins(self):
        cfg = ExperimentConfig(gen=GenConfig(d=2, n=5), ridge_lambda=2.5)
        assert resolve_ridge_lambda(cfg) == 2.5

    def test_noiseless_resolves_to_zero(self):
        cfg = ExperimentConfig(gen=GenConfig(d=2, n=5, sigma_n=0.0))
        assert resolve_ridge_lambda(cfg) == 0.0

    def test_default_is_scale_ratio(self):
        cfg = ExperimentConfig(gen=GenConfig(d=2, n=5, sigma_w=1.0, sigma_n=0.5))
        assert resolve_ridge_lambda(cfg) == pytest.approx(4.0)


class TestWdistExperiment:
    def test_identical_predictors_zero_distance(self):
        oracle = RidgeOraclePredictor(1.0)
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=8, seed=10),
            runs=3, tests_per_run=4, grid_size=50, context_sizes=(8, 4),
        )
        rows = run_wdist_experiment(cfg, oracle, oracle)
        assert len(rows) == 2
        for row in rows:
            assert row.mean_w1 == 0.0

    def test_one_row_per_context_size(self):
        oracle = RidgeOraclePredictor(1.0)
        cfg = ExperimentConfig(
            gen=GenConfig(d=4, n=8, seed=11),
            runs=2, tests_per_run=2, grid_size=40, context_sizes=(16, 8, 2),
        )
        rows = run_wdist_experiment(cfg, oracle, oracle)
        assert [r.n for r in rows] == [16, 8, 2]
        np.testing.assert_allclose([r.ratio for r in rows], [0.25, 0.5, 2.0])

    def test_empty_context_sizes_rejected(self):
        cfg = ExperimentConfig(gen=GenConfig(d=2, n=8, seed=1), runs=2, tests_per_run=2)
        with pytest.raises(ValueError):
            run_wdist_experiment(cfg, RidgeOraclePredictor(1.0))


class TestOodExperiment:
    def test_empty_sweep_rejected(self):
        cfg = ExperimentConfig(gen=GenConfig(d=2, n=8, seed=1), runs=2, tests_per_run=2)
        with pytest.raises(ValueError):
            run_ood_experiment(cfg, RidgeOraclePredictor(1.0))
        with pytest.raises(ValueError):
            run_ood_experiment(
                ExperimentConfig(
                    gen=GenConfig(d=2, n=8, seed=1), runs=2, tests_per_run=2,
                    shift=OodSweep(param="a", values=()),
                ),
                RidgeOraclePredictor(1.0),
            )

    def test_sweep_param_validation(self):
        with pytest.raises(ValueError):
            OodSweep(param="bogus", values=(1.0,))

    def test_rows_cover_sweep(self):
        # A ridge predictor stands in for the model: the harness only
        # needs some symmetric predictor to drive the sweep plumbing.
        cfg = ExperimentConfig(
            gen=GenConfig(d=2, n=10, seed=12),
            runs=3, tests_per_run=3, grid_size=40,
            shift=OodSweep(param="a", values=(0.5, 1.0)),
        )
        rows = run_ood_experiment(cfg, RidgeOraclePredictor(1.0))
        assert [r.value for r in rows] == [0.5, 1.0]
        for row in rows:
            assert row.param == "a"
            assert 0.0 <= row.coverage[0] <= 1.0
            assert np.isfinite(row.mean_w1)


class TestBenchmark:
    def test_quantiles_ordered_and_presets_supported(self):
        gen = GenConfig(d=2, n=10, seed=13)
        methods = {
            "cp_ridge": coverage_runner("cp_ridge", alpha=0.1, grid_size=30, lam=1.0),
            "split_cp_ridge": coverage_runner(
                "split_cp_ridge", alpha=0.1, grid_size=30, lam=1.0
            ),
        }
        rows = benchmark_time(
            methods, (50, 100, 300), repetitions=5, gen=gen, tests_per_batch=2, warmup=1
        )
        assert {r.n for r in rows} == {50, 100, 300}
        for row in rows:
            assert row.lo_s <= row.median_s <= row.hi_s
            # Absolute times are hardware-dependent and not asserted.

    def test_empty_methods_rejected(self):
        with pytest.raises(ValueError):
            benchmark_time({}, (10,), repetitions=2, gen=GenConfig(d=2, n=5, seed=1))
