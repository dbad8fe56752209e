"""Closed-form ridge regression, the exact conformal oracle.

Dimensions stay small here (d <= 50 in the experiments), so every fit
solves the normal equations through a Cholesky factorization of
X^T X + lambda I.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, RankDeficiencyError

__all__ = [
    "RidgeModel",
    "ridge_fit",
    "ridge_fit_augmented",
    "ridge_predict",
    "bayes_lambda",
]


@dataclass(frozen=True)
class RidgeModel:
    w_hat: np.ndarray
    lam: float


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> RidgeModel:
    """Minimize sum (y_i - w.x_i)^2 + lam * ||w||^2.

    lam = 0 requires a full-column-rank design; a singular system
    raises RankDeficiencyError rather than silently pseudo-inverting.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"incompatible shapes X {X.shape}, y {y.shape}")
    if X.shape[0] < 1:
        raise ValueError("at least one sample is required")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    d = X.shape[1]
    G = X.T @ X + lam * np.eye(d)
    try:
        cho = scipy.linalg.cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            f"X^T X + lam*I is singular (lam={lam}); the design is rank-deficient"
        ) from exc
    w_hat = scipy.linalg.cho_solve(cho, X.T @ y)
    return RidgeModel(w_hat=w_hat, lam=float(lam))


def ridge_fit_augmented(
    X_ctx: np.ndarray,
    y_ctx: np.ndarray,
    x_new: np.ndarray,
    z: float,
    lam: float,
) -> RidgeModel:
    """Fit on the context plus one candidate point (x_new, z)."""
    X_ctx = np.asarray(X_ctx, dtype=float)
    y_ctx = np.asarray(y_ctx, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    if x_new.shape != (X_ctx.shape[1],):
        raise DimensionError(
            f"x_new must have shape ({X_ctx.shape[1]},), got {x_new.shape}"
        )
    X_aug = np.vstack([X_ctx, x_new])
    y_aug = np.append(y_ctx, z)
    return ridge_fit(X_aug, y_aug, lam)


def ridge_predict(model: RidgeModel, X_any: np.ndarray) -> np.ndarray:
    """Predictions X_any @ w_hat; accepts one row or a matrix of rows."""
    X_any = np.asarray(X_any, dtype=float)
    if X_any.shape[-1] != model.w_hat.shape[0]:
        raise DimensionError(
            f"feature dimension {X_any.shape[-1]} does not match fitted "
            f"dimension {model.w_hat.shape[0]}"
        )
    return X_any @ model.w_hat


def bayes_lambda(sigma_w: float, sigma_n: float) -> float:
    """Regularizer sigma_w^2 / sigma_n^2 used by the oracle on noisy tasks.

    For noiseless targets (sigma_n = 0) the oracle uses lam = 0 instead;
    that case is rejected here so callers choose it explicitly.
    """
    if not sigma_w > 0:
        raise ValueError(f"sigma_w must be positive, got {sigma_w}")
    if not sigma_n > 0:
        raise ValueError(
            f"sigma_n must be positive (got {sigma_n}); use lam=0 for noiseless targets"
        )
    return sigma_w**2 / sigma_n**2
