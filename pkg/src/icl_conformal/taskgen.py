"""Synthetic noisy linear-regression tasks and prompt tokenization.

A task is a random linear function y = x.w + noise with inputs drawn
uniformly from a box.  Contexts are laid out as (d+1) x (n+1) token
matrices: one column per point, features stacked on top of the label,
and the query label slot holding a candidate value z (0 during
pre-training, where the label is masked).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "GenConfig",
    "TaskSample",
    "rng_from_seed",
    "spawn_rngs",
    "sample_task",
    "tokenize",
    "sample_batch",
]


def rng_from_seed(seed: int) -> np.random.Generator:
    """One reproducible stream from a 64-bit seed.

    Philox is counter-based, so streams are cheap to fork and every
    experiment is replayable from (seed, config) alone.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int | tuple[int, ...], k: int) -> list[np.random.Generator]:
    """k independent child streams of `seed` (an integer or a key tuple).

    Child i depends only on (seed, i), so per-run streams are stable no
    matter how many runs execute or in which order they are consumed.
    """
    children = np.random.SeedSequence(seed).spawn(k)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


@dataclass(frozen=True)
class GenConfig:
    """Task distribution: x ~ U(-a, a)^d, w ~ N(0, sigma_w^2 I), eps ~ N(0, sigma_n^2).

    Parameters
    ----------
    d : input dimension.
    n : context size (points visible to the predictor).
    a : half-range of the uniform input box.
    sigma_w : prior standard deviation of the latent weights.
    sigma_n : label noise standard deviation (0 = noiseless).
    seed : root seed for streams derived from this config.
    """

    d: int
    n: int
    a: float = 1.0
    sigma_w: float = 1.0
    sigma_n: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            raise ConfigError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ConfigError(f"n must be a positive integer, got {self.n!r}")
        if not self.a > 0:
            raise ConfigError(f"a must be positive, got {self.a!r}")
        if not self.sigma_w > 0:
            raise ConfigError(f"sigma_w must be positive, got {self.sigma_w!r}")
        if self.sigma_n < 0:
            raise ConfigError(f"sigma_n must be non-negative, got {self.sigma_n!r}")


@dataclass(frozen=True)
class TaskSample:
    """One synthetic task: n+1 points of a noisy linear function.

    X has shape (n+1, d); row n (0-based) is the query input.  y are the
    noisy labels and w the latent weight vector that generated them.
    """

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray


def sample_task(cfg: GenConfig, rng: np.random.Generator) -> TaskSample:
    """Draw one task: w, then X, then the noise, in that fixed order.

    The draw order is part of the determinism contract; `sample_batch`
    replays it verbatim once per element.
    """
    w = cfg.sigma_w * rng.standard_normal(cfg.d)
    X = rng.uniform(-cfg.a, cfg.a, size=(cfg.n + 1, cfg.d))
    eps = cfg.sigma_n * rng.standard_normal(cfg.n + 1)
    return TaskSample(X=X, y=X @ w + eps, w=w)


def tokenize(
    X_ctx: np.ndarray,
    y_ctx: np.ndarray,
    x_query: np.ndarray,
    z: float,
) -> np.ndarray:
    """Lay out a context plus query as a (d+1) x (n+1) token matrix.

    Column i < n is [x_i; y_i]; the last column is [x_query; z].
    """
    X_ctx = np.asarray(X_ctx, dtype=float)
    y_ctx = np.asarray(y_ctx, dtype=float)
    x_query = np.asarray(x_query, dtype=float)
    if X_ctx.ndim != 2:
        raise DimensionError(f"X_ctx must be 2-D, got shape {X_ctx.shape}")
    n, d = X_ctx.shape
    if y_ctx.shape != (n,):
        raise DimensionError(f"y_ctx must have shape ({n},), got {y_ctx.shape}")
    if x_query.shape != (d,):
        raise DimensionError(f"x_query must have shape ({d},), got {x_query.shape}")
    E = np.empty((d + 1, n + 1))
    E[:d, :n] = X_ctx.T
    E[d, :n] = y_ctx
    E[:d, n] = x_query
    E[d, n] = z
    return E


def sample_batch(
    cfg: GenConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, float]]:
    """Sample `batch_size` tasks tokenized with the query label masked to 0.

    Returns (token matrix, true query label) pairs; the target never
    appears inside the tokens.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    batch = []
    for _ in range(batch_size):
        task = sample_task(cfg, rng)
        E = tokenize(task.X[: cfg.n], task.y[: cfg.n], task.X[cfg.n], 0.0)
        batch.append((E, float(task.y[cfg.n])))
    return batch
