import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_conformal.conformal import (
    Grid,
    IclPredictor,
    RidgeOraclePredictor,
    build_grid,
    conformity_scores,
    full_cp,
    max_accepted_rank,
    split_cp,
    typicalness,
)
from icl_conformal.errors import DimensionError
from icl_conformal.lsa import LsaLayer, LsaParams
from icl_conformal.ridge import ridge_fit, ridge_fit_augmented, ridge_predict
from icl_conformal.taskgen import GenConfig, rng_from_seed, sample_task


def zero_icl(d: int) -> IclPredictor:
    m = d + 1
    return IclPredictor(LsaParams((LsaLayer(*(np.zeros((m, m)) for _ in range(4))),)))


class TestBuildGrid:
    def test_quarter_span_rule(self):
        grid = build_grid(np.array([0.0, 4.0]), 5)
        np.testing.assert_allclose(grid.values, [-1.0, 0.5, 2.0, 3.5, 5.0])

    def test_default_size(self):
        assert len(build_grid(np.array([0.0, 1.0]))) == 1000

    def test_constant_labels_fallback(self):
        grid = build_grid(np.array([3.0, 3.0, 3.0]), 3)
        np.testing.assert_allclose(grid.values, [2.0, 3.0, 4.0])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            build_grid(np.array([0.0, 1.0]), 1)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            Grid(values=np.array([1.0, 1.0, 2.0]))
        with pytest.raises(ValueError):
            Grid(values=np.array([1.0]))


class TestConformityScores:
    def test_perfect_predictions(self):
        y = np.array([1.0, -2.0, 0.5])
        preds = np.array([1.0, -2.0, 0.5, 7.0])
        np.testing.assert_array_equal(conformity_scores(y, preds, 7.0), np.zeros(4))

    def test_zero_predictions(self):
        y = np.array([1.0, -2.0])
        scores = conformity_scores(y, np.zeros(3), -3.0)
        np.testing.assert_array_equal(scores, [1.0, 2.0, 3.0])

    def test_elementwise_recompute(self):
        rng = rng_from_seed(0)
        y = rng.normal(size=6)
        preds = rng.normal(size=7)
        z = float(rng.normal())
        scores = conformity_scores(y, preds, z)
        expected = [abs(y[i] - preds[i]) for i in range(6)] + [abs(z - preds[6])]
        np.testing.assert_allclose(scores, expected, rtol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            conformity_scores(np.zeros(3), np.zeros(3), 0.0)


class TestTypicalness:
    def test_candidate_strictly_largest(self):
        scores = np.append(np.arange(9, dtype=float), 100.0)
        assert typicalness(scores) == 0.0

    def test_candidate_strictly_smallest(self):
        scores = np.append(np.arange(1, 10, dtype=float), 0.5)
        assert typicalness(scores) == 0.9

    def test_all_tied(self):
        # Ties count via <=, so four equal scores give rank 4 and pi 0.
        assert typicalness(np.ones(4)) == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_unit_rank_step(self, seed):
        # pi drops by exactly 1/(n+1) per unit rank increase.
        rng = rng_from_seed(seed)
        n = int(rng.integers(1, 12))
        scores = rng.normal(size=n + 1)
        m = n + 1
        rank = int(np.sum(scores <= scores[-1]))
        assert typicalness(scores) == (m - rank) / m


class TestMaxAcceptedRank:
    def test_integral_boundary_matches_plain_predicate(self):
        # (1-alpha)(n+1) integral: identical to pi >= alpha.
        assert max_accepted_rank(0.1, 10) == 9

    def test_fractional_boundary_rounds_up(self):
        assert max_accepted_rank(0.1, 21) == 19

    def test_float_alpha_boundary_is_exact(self):
        # 1 - 0.2 is not representable; exact rationals keep the
        # boundary where real arithmetic puts it.
        assert max_accepted_rank(0.2, 10) == 8

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            max_accepted_rank(0.0, 10)


def brute_force_accepted(X_ctx, y_ctx, x_new, alpha, zs, lam):
    """From-scratch reimplementation: solve the augmented least squares
    by np.linalg.solve per candidate and apply the rank rule directly."""
    n = len(y_ctx)
    accepted = np.zeros(len(zs), dtype=bool)
    for k, z in enumerate(zs):
        Xa = np.vstack([X_ctx, x_new])
        ya = np.append(y_ctx, z)
        w = np.linalg.solve(Xa.T @ Xa + lam * np.eye(Xa.shape[1]), Xa.T @ ya)
        preds = Xa @ w
        R = np.abs(ya - preds)
        rank = int(np.sum(R <= R[n]))
        accepted[k] = Fraction(rank) <= math.ceil((1 - Fraction(alpha)) * (n + 1))
    return accepted


class TestFullCp:
    def setup_method(self):
        rng = rng_from_seed(1)
        self.task = sample_task(GenConfig(d=2, n=8, sigma_n=0.3, seed=1), rng)
        self.X_ctx, self.y_ctx = self.task.X[:8], self.task.y[:8]
        self.x_new = self.task.X[8]

    def test_tiny_alpha_accepts_entire_grid(self):
        pset = full_cp(
            RidgeOraclePredictor(1.0),
            self.X_ctx, self.y_ctx, self.x_new,
            alpha=1e-9, grid_size=31,
        )
        assert pset.accepted.all()
        assert pset.contiguous

    def test_alpha_above_max_typicalness(self):
        # Only candidates whose score is the strict minimum can survive:
        # the accepted set shrinks to rank-1 candidates (often empty).
        pset = full_cp(
            RidgeOraclePredictor(1.0),
            self.X_ctx, self.y_ctx, self.x_new,
            alpha=0.95, grid_size=31,
        )
        n = len(self.y_ctx)
        assert max_accepted_rank(0.95, n + 1) == 1
        ranks = (n + 1) * (1.0 - pset.typicalness)
        assert np.all(np.rint(ranks[pset.accepted]) == 1)

    def test_empty_set_is_reported_not_raised(self):
        # A constant predictor ties every score, so every rank is n+1
        # and nothing is accepted.
        pset = full_cp(zero_icl(2), self.X_ctx, np.zeros(8), np.zeros(2), 0.5, grid_size=21)
        assert pset.is_empty
        assert pset.interval is None
        assert pset.hull_width == 0.0

    def test_matches_brute_force_oracle(self):
        rng = rng_from_seed(42)
        for trial in range(100):
            d = int(rng.integers(1, 4))
            n = int(rng.integers(2, 9))
            K = int(rng.integers(5, 22))
            lam = float(rng.uniform(0.05, 4.0))
            alpha = float(rng.uniform(0.05, 0.6))
            task = sample_task(GenConfig(d=d, n=n, sigma_n=0.4, seed=trial), rng)
            X_ctx, y_ctx, x_new = task.X[:n], task.y[:n], task.X[n]
            grid = build_grid(y_ctx, K)
            pset = full_cp(RidgeOraclePredictor(lam), X_ctx, y_ctx, x_new, alpha, grid)
            expected = brute_force_accepted(X_ctx, y_ctx, x_new, alpha, grid.values, lam)
            np.testing.assert_array_equal(pset.accepted, expected)

    def test_fast_and_plain_oracle_agree(self):
        rng = rng_from_seed(7)
        for trial in range(25):
            d = int(rng.integers(1, 4))
            n = int(rng.integers(2, 9))
            task = sample_task(GenConfig(d=d, n=n, sigma_n=0.4, seed=trial), rng)
            X_ctx, y_ctx, x_new = task.X[:n], task.y[:n], task.X[n]
            grid = build_grid(y_ctx, 15)
            fast = full_cp(RidgeOraclePredictor(0.8, fast=True), X_ctx, y_ctx, x_new, 0.2, grid)
            plain = full_cp(RidgeOraclePredictor(0.8, fast=False), X_ctx, y_ctx, x_new, 0.2, grid)
            np.testing.assert_array_equal(fast.accepted, plain.accepted)
            np.testing.assert_allclose(fast.typicalness, plain.typicalness, atol=1e-12)

    def test_interval_and_measure(self):
        pset = full_cp(RidgeOraclePredictor(1.0), self.X_ctx, self.y_ctx, self.x_new, 0.1, grid_size=101)
        assert pset.interval is not None
        lo, hi = pset.interval
        assert lo <= hi
        assert pset.set_measure <= pset.hull_width + pset.grid.step

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            full_cp(RidgeOraclePredictor(1.0), self.X_ctx, self.y_ctx, self.x_new, 1.5)


class TestSplitCp:
    def test_zero_residuals_degenerate_interval(self):
        # Calibration labels generated by the fitted model itself.
        rng = rng_from_seed(2)
        X_train = rng.normal(size=(6, 2))
        y_train = rng.normal(size=6)
        model = ridge_fit(X_train, y_train, 0.5)
        X_cal = rng.normal(size=(5, 2))
        y_cal = ridge_predict(model, X_cal)
        x = rng.normal(size=2)
        interval = split_cp(X_train, y_train, X_cal, y_cal, x, 0.5, 0.5)
        assert interval.q == 0.0
        assert interval.lo == interval.hi == interval.center

    def test_quantile_rule_hand_evaluated(self):
        # n_cal=9, alpha=0.1: index ceil(0.9 * 10) = 9, the largest of 9.
        rng = rng_from_seed(3)
        X_train = rng.normal(size=(6, 2))
        y_train = rng.normal(size=6)
        X_cal = rng.normal(size=(9, 2))
        y_cal = rng.normal(size=9)
        interval = split_cp(X_train, y_train, X_cal, y_cal, rng.normal(size=2), 0.1, 1.0)
        model = ridge_fit(X_train, y_train, 1.0)
        residuals = np.abs(y_cal - ridge_predict(model, X_cal))
        assert interval.q == pytest.approx(float(np.max(residuals)), rel=1e-15)

    def test_width_is_twice_q(self):
        rng = rng_from_seed(4)
        interval = split_cp(
            rng.normal(size=(5, 2)), rng.normal(size=5),
            rng.normal(size=(7, 2)), rng.normal(size=7),
            rng.normal(size=2), 0.3, 1.0,
        )
        assert interval.width == pytest.approx(2 * interval.q)
        assert not interval.unbounded

    def test_unbounded_sentinel(self):
        # ceil(0.99 * 4) = 4 > n_cal = 3: the whole line, flagged.
        rng = rng_from_seed(5)
        interval = split_cp(
            rng.normal(size=(5, 2)), rng.normal(size=5),
            rng.normal(size=(3, 2)), rng.normal(size=3),
            rng.normal(size=2), 0.01, 1.0,
        )
        assert interval.unbounded
        assert interval.q == math.inf
        assert interval.covers(1e300)


class TestIclPredictor:
    def test_zero_weights_echo_and_zero_scores(self):
        # Untrained zero model echoes the label row, so every score ties
        # at 0 and the typicalness collapses to 0 (rank counts all ties).
        rng = rng_from_seed(6)
        task = sample_task(GenConfig(d=2, n=5, seed=6), rng)
        pred = zero_icl(2)
        labels = pred.predict_labels(task.X[:5], task.y[:5], task.X[5], 1.5)
        np.testing.assert_array_equal(labels, np.append(task.y[:5], 1.5))
        scores = conformity_scores(task.y[:5], labels, 1.5)
        np.testing.assert_array_equal(scores, np.zeros(6))
        assert typicalness(scores) == 0.0

    def test_output_length_and_determinism(self):
        rng = rng_from_seed(8)
        m = 4
        params = LsaParams(
            (LsaLayer(*(0.2 * rng.standard_normal((m, m)) for _ in range(4))),)
        )
        pred = IclPredictor(params)
        task = sample_task(GenConfig(d=3, n=6, seed=8), rng)
        a = pred.predict_labels(task.X[:6], task.y[:6], task.X[6], 0.3)
        b = pred.predict_labels(task.X[:6], task.y[:6], task.X[6], 0.3)
        assert a.shape == (7,)
        np.testing.assert_array_equal(a, b)

    def test_grid_path_matches_loop(self):
        rng = rng_from_seed(9)
        m = 3
        params = LsaParams(
            tuple(
                LsaLayer(*(0.3 * rng.standard_normal((m, m)) for _ in range(4)))
                for _ in range(2)
            )
        )
        pred = IclPredictor(params)
        task = sample_task(GenConfig(d=2, n=5, seed=9), rng)
        zs = np.linspace(-2, 2, 9)
        batched = pred.predict_labels_grid(task.X[:5], task.y[:5], task.X[5], zs)
        looped = np.stack(
            [pred.predict_labels(task.X[:5], task.y[:5], task.X[5], z) for z in zs]
        )
        np.testing.assert_allclose(batched, looped, atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            zero_icl(3).predict_labels(np.zeros((4, 2)), np.zeros(4), np.zeros(2), 0.0)


class TestRidgeOraclePredictor:
    def test_interpolation_regime_near_zero_scores(self):
        # Plenty of noiseless data and lam=0: the oracle interpolates.
        rng = rng_from_seed(10)
        task = sample_task(GenConfig(d=2, n=30, sigma_n=0.0, seed=10), rng)
        pred = RidgeOraclePredictor(0.0)
        z = float(task.X[30] @ task.w)
        labels = pred.predict_labels(task.X[:30], task.y[:30], task.X[30], z)
        scores = conformity_scores(task.y[:30], labels, z)
        assert np.max(scores) < 1e-8

    def test_matches_manual_composition(self):
        rng = rng_from_seed(11)
        task = sample_task(GenConfig(d=3, n=7, seed=11), rng)
        X_ctx, y_ctx, x_new = task.X[:7], task.y[:7], task.X[7]
        pred = RidgeOraclePredictor(0.9)
        labels = pred.predict_labels(X_ctx, y_ctx, x_new, 0.4)
        model = ridge_fit_augmented(X_ctx, y_ctx, x_new, 0.4, 0.9)
        manual = ridge_predict(model, np.vstack([X_ctx, x_new]))
        np.testing.assert_allclose(labels, manual, rtol=1e-12)

    def test_two_point_pencil_and_paper(self):
        # d=1, n=2: w(z) = (x1 y1 + x2 y2 + x3 z) / (x1^2 + x2^2 + x3^2).
        X_ctx = np.array([[1.0], [2.0]])
        y_ctx = np.array([1.0, 5.0])
        x_new = np.array([3.0])
        z, lam = 2.0, 0.0
        w = (1 * 1 + 2 * 5 + 3 * z) / (1 + 4 + 9)
        expected = np.array([w, 2 * w, 3 * w])
        labels = RidgeOraclePredictor(lam).predict_labels(X_ctx, y_ctx, x_new, z)
        np.testing.assert_allclose(labels, expected, rtol=1e-12)
