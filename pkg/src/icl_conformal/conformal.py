"""Full and split conformal prediction over a candidate-label grid.

Full conformal prediction scans a grid of candidate labels z.  For each
z the predictor produces labels for all n+1 points of the augmented
context, absolute residuals become conformity scores, and the
candidate's typicalness is

    pi(z) = 1 - rank(R_{n+1}(z)) / (n+1),
    rank  = #{ i : R_i(z) <= R_{n+1}(z) }   (ties count, including i = n+1).

A candidate joins the prediction set when

    rank <= ceil((1 - alpha) * (n+1)),

computed in exact rational arithmetic.  The ceiling is what makes the
set valid: the rank of an exchangeable point is uniform on {1..n+1}, so
this boundary is the smallest one with acceptance probability >= 1-alpha
(the floor variant would cover only floor((1-alpha)(n+1))/(n+1), which
drops to 6/7 at alpha=0.1, n=20).  It is the same finite-sample
convention as the split-CP calibration quantile below; when
(1-alpha)(n+1) is an integer it coincides with the plain predicate
pi(z) >= alpha.

Two predictors share this code path: the in-context model (one forward
pass per candidate, no refitting) and the ridge oracle (one refit per
candidate).  Both are symmetric in the context points, the premise of
the marginal coverage guarantee.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import lsa, ridge
from .errors import DimensionError
from .taskgen import tokenize

__all__ = [
    "Predictor",
    "IclPredictor",
    "RidgeOraclePredictor",
    "Grid",
    "PredictionSet",
    "SplitInterval",
    "build_grid",
    "conformity_scores",
    "typicalness",
    "max_accepted_rank",
    "full_cp",
    "split_cp",
]

DEFAULT_GRID_SIZE = 1000


@dataclass(frozen=True)
class Grid:
    """Strictly increasing candidate labels."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 2:
            raise ValueError(f"grid needs at least 2 values, got shape {values.shape}")
        if not np.all(np.diff(values) > 0):
            raise ValueError("grid values must be strictly increasing")

    def __len__(self) -> int:
        return self.values.size

    @property
    def step(self) -> float:
        return float((self.values[-1] - self.values[0]) / (len(self) - 1))


def build_grid(y_ctx: np.ndarray, K: int = DEFAULT_GRID_SIZE) -> Grid:
    """K equally spaced candidates spanning the context labels plus margin.

    The span is [min(y) - 0.25*delta, max(y) + 0.25*delta] with
    delta = max(y) - min(y): the sample range already contains a fresh
    draw with probability >= 1 - 2/(n+1), and the 25% margin on each
    side absorbs discretization and boundary effects.  Constant labels
    (delta = 0) fall back to [y-1, y+1].
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    y_ctx = np.asarray(y_ctx, dtype=float)
    if y_ctx.ndim != 1 or y_ctx.size < 1:
        raise ValueError(f"y_ctx must be a non-empty vector, got shape {y_ctx.shape}")
    lo, hi = float(y_ctx.min()), float(y_ctx.max())
    delta = hi - lo
    if delta == 0.0:
        lo, hi = lo - 1.0, hi + 1.0
    else:
        lo, hi = lo - 0.25 * delta, hi + 0.25 * delta
    return Grid(values=np.linspace(lo, hi, K))


class Predictor(abc.ABC):
    """Maps an augmented context to predicted labels for all n+1 points.

    Implementations must be deterministic and symmetric in the n context
    points; symmetry is what transfers the coverage guarantee from the
    exact oracle to arbitrary models.
    """

    @abc.abstractmethod
    def predict_labels(
        self,
        X_ctx: np.ndarray,
        y_ctx: np.ndarray,
        x_new: np.ndarray,
        z: float,
    ) -> np.ndarray:
        """Predicted labels, length n+1, for the context plus (x_new, z)."""

    def predict_labels_grid(
        self,
        X_ctx: np.ndarray,
        y_ctx: np.ndarray,
        x_new: np.ndarray,
        zs: np.ndarray,
    ) -> np.ndarray:
        """Predicted labels for every candidate, shape (len(zs), n+1).

        The default loops over candidates; subclasses override it with a
        batched path that must agree with the loop.
        """
        return np.stack(
            [self.predict_labels(X_ctx, y_ctx, x_new, float(z)) for z in zs]
        )


class IclPredictor(Predictor):
    """In-context predictions from a trained linear self-attention model.

    Each candidate z costs one forward pass; the grid path batches all
    candidates through a single stacked forward.
    """

    def __init__(self, params: lsa.LsaParams):
        self.params = params

    def _check_d(self, X_ctx: np.ndarray) -> None:
        if X_ctx.shape[1] != self.params.d:
            raise DimensionError(
                f"model expects d={self.params.d}, context has d={X_ctx.shape[1]}"
            )

    def predict_labels(self, X_ctx, y_ctx, x_new, z):
        X_ctx = np.asarray(X_ctx, dtype=float)
        self._check_d(X_ctx)
        E = tokenize(X_ctx, y_ctx, x_new, z)
        return lsa.predict_labels(self.params, E)

    def predict_labels_grid(self, X_ctx, y_ctx, x_new, zs):
        X_ctx = np.asarray(X_ctx, dtype=float)
        self._check_d(X_ctx)
        zs = np.asarray(zs, dtype=float)
        base = tokenize(X_ctx, y_ctx, x_new, 0.0)
        tokens = np.broadcast_to(base, (zs.size,) + base.shape).copy()
        tokens[:, -1, -1] = zs
        return lsa.predict_labels(self.params, tokens)


class RidgeOraclePredictor(Predictor):
    """Exact oracle: refit ridge on the augmented context for every z.

    With the candidate label appended, the fitted weights are affine in
    z: w(z) = M^{-1}(X^T y + z x_new) with M = X_aug^T X_aug + lam I
    independent of z.  The fast grid path factors M once and evaluates
    that affine map; `fast=False` refits from scratch per candidate.
    The two paths are kept equivalent by test.
    """

    def __init__(self, lam: float, fast: bool = True):
        if lam < 0:
            raise ValueError(f"lam must be >= 0, got {lam}")
        self.lam = float(lam)
        self.fast = fast

    def predict_labels(self, X_ctx, y_ctx, x_new, z):
        model = ridge.ridge_fit_augmented(X_ctx, y_ctx, x_new, z, self.lam)
        X_all = np.vstack([X_ctx, np.asarray(x_new, dtype=float)])
        return ridge.ridge_predict(model, X_all)

    def predict_labels_grid(self, X_ctx, y_ctx, x_new, zs):
        if not self.fast:
            return super().predict_labels_grid(X_ctx, y_ctx, x_new, zs)
        import scipy.linalg

        X_ctx = np.asarray(X_ctx, dtype=float)
        y_ctx = np.asarray(y_ctx, dtype=float)
        x_new = np.asarray(x_new, dtype=float)
        zs = np.asarray(zs, dtype=float)
        X_all = np.vstack([X_ctx, x_new])
        d = X_all.shape[1]
        M = X_all.T @ X_all + self.lam * np.eye(d)
        try:
            cho = scipy.linalg.cho_factor(M, lower=True)
        except np.linalg.LinAlgError as exc:
            from .errors import RankDeficiencyError

            raise RankDeficiencyError(
                f"augmented design is rank-deficient at lam={self.lam}"
            ) from exc
        u = scipy.linalg.cho_solve(cho, X_ctx.T @ y_ctx)
        v = scipy.linalg.cho_solve(cho, x_new)
        # w(z) = u + z v, so predictions are base + z * slope.
        base = X_all @ u
        slope = X_all @ v
        return base[None, :] + zs[:, None] * slope[None, :]


def conformity_scores(y_ctx: np.ndarray, y_pred: np.ndarray, z: float) -> np.ndarray:
    """Absolute residuals; the candidate plays the role of its own label."""
    y_ctx = np.asarray(y_ctx, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_pred.shape != (y_ctx.size + 1,):
        raise DimensionError(
            f"y_pred must have length {y_ctx.size + 1}, got shape {y_pred.shape}"
        )
    return np.abs(np.append(y_ctx, z) - y_pred)


def typicalness(scores: np.ndarray) -> float:
    """1 - rank/(n+1) where rank counts scores <= the candidate's score."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError(f"scores must be a non-empty vector, got shape {scores.shape}")
    m = scores.size
    rank = int(np.count_nonzero(scores <= scores[-1]))
    return (m - rank) / m


def max_accepted_rank(alpha: float, m: int) -> int:
    """Largest rank accepted at level alpha among m scores.

    ceil((1-alpha) * m) over exact rationals: the smallest boundary
    whose acceptance probability for a uniform rank is >= 1-alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return math.ceil((1 - Fraction(alpha)) * m)


@dataclass(frozen=True)
class PredictionSet:
    """Typicalness over a grid and the accepted candidates at level alpha.

    `interval` is the hull (min, max) of the accepted candidates, or
    None when nothing is accepted (a valid outcome, not an error: with
    large alpha and tied scores no candidate need clear the rank
    boundary); `contiguous` records whether the accepted mask has no
    holes.  `set_measure` is the total length of grid cells accepted,
    which can be smaller than the hull width when the mask has holes.
    """

    grid: Grid
    typicalness: np.ndarray
    alpha: float
    accepted: np.ndarray
    interval: tuple[float, float] | None
    contiguous: bool

    @property
    def is_empty(self) -> bool:
        return self.interval is None

    @property
    def hull_width(self) -> float:
        if self.interval is None:
            return 0.0
        return self.interval[1] - self.interval[0]

    @property
    def set_measure(self) -> float:
        return float(np.count_nonzero(self.accepted)) * self.grid.step

    def covers(self, y: float) -> bool:
        """Hull membership, the interval notion used by the experiments."""
        return self.interval is not None and self.interval[0] <= y <= self.interval[1]


def full_cp(
    predictor: Predictor,
    X_ctx: np.ndarray,
    y_ctx: np.ndarray,
    x_new: np.ndarray,
    alpha: float,
    grid: Grid | None = None,
    grid_size: int = DEFAULT_GRID_SIZE,
) -> PredictionSet:
    """Full conformal prediction set for one query point.

    For every candidate z on the grid: predict labels for the augmented
    context, score absolute residuals, rank the candidate's score, and
    accept z when its typicalness clears alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    y_ctx = np.asarray(y_ctx, dtype=float)
    n = y_ctx.size
    if grid is None:
        grid = build_grid(y_ctx, grid_size)
    zs = grid.values

    preds = predictor.predict_labels_grid(X_ctx, y_ctx, x_new, zs)
    if preds.shape != (zs.size, n + 1):
        raise DimensionError(
            f"predictor returned shape {preds.shape}, expected {(zs.size, n + 1)}"
        )
    r_ctx = np.abs(y_ctx[None, :] - preds[:, :n])
    r_query = np.abs(zs - preds[:, n])
    ranks = 1 + np.count_nonzero(r_ctx <= r_query[:, None], axis=1)
    pi = (n + 1 - ranks) / (n + 1)
    accepted = ranks <= max_accepted_rank(alpha, n + 1)

    if accepted.any():
        idx = np.flatnonzero(accepted)
        interval = (float(zs[idx[0]]), float(zs[idx[-1]]))
        contiguous = bool(idx[-1] - idx[0] + 1 == idx.size)
    else:
        interval = None
        contiguous = True
    return PredictionSet(
        grid=grid,
        typicalness=pi,
        alpha=alpha,
        accepted=accepted,
        interval=interval,
        contiguous=contiguous,
    )


@dataclass(frozen=True)
class SplitInterval:
    """Symmetric interval around the point prediction.

    `unbounded` flags the small-calibration case where the required
    quantile index exceeds the calibration size; q is then +inf and the
    interval is the whole line.
    """

    center: float
    q: float
    unbounded: bool = False

    @property
    def lo(self) -> float:
        return self.center - self.q

    @property
    def hi(self) -> float:
        return self.center + self.q

    @property
    def width(self) -> float:
        return 2.0 * self.q

    def covers(self, y: float) -> bool:
        return self.lo <= y <= self.hi


def split_cp(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_cal: np.ndarray,
    y_cal: np.ndarray,
    x_new: np.ndarray,
    alpha: float,
    lam: float,
) -> SplitInterval:
    """Split conformal interval: one ridge fit, one calibration quantile.

    q is the ceil((1-alpha)(n_cal+1))-th smallest calibration residual,
    the finite-sample-valid quantile convention; the index is computed
    in exact rational arithmetic.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    y_cal = np.asarray(y_cal, dtype=float)
    n_cal = y_cal.size
    if n_cal < 1:
        raise ValueError("calibration set must be non-empty")
    model = ridge.ridge_fit(X_train, y_train, lam)
    center = float(ridge.ridge_predict(model, np.asarray(x_new, dtype=float)))
    residuals = np.abs(y_cal - ridge.ridge_predict(model, X_cal))
    k = math.ceil((1 - Fraction(alpha)) * (n_cal + 1))
    if k > n_cal:
        return SplitInterval(center=center, q=float("inf"), unbounded=True)
    q = float(np.sort(residuals)[k - 1])
    return SplitInterval(center=center, q=q, unbounded=False)
