"""Shared exception types used across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or configuration file."""


class DimensionError(ValueError):
    """Array shapes inconsistent with an operation's contract."""


class BudgetError(RuntimeError):
    """Compute budget too small to execute a single training step."""


class RankDeficiencyError(RuntimeError):
    """Unregularized least squares on a rank-deficient design matrix."""


class FitFailureError(RuntimeError):
    """Every optimizer restart failed to produce a usable fit."""


class DegenerateDistributionError(ValueError):
    """A distribution carrying no mass where mass is required."""
