"""Input validation helpers shared by the estimators and the free functions."""

import numbers

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class ConfigError(ValueError):
    """Raised for invalid configuration values (grid, network, training)."""


def check_points(points, n_cols=4, name="points", dtype=np.float32):
    """Coerce ``points`` to a 2-D array with ``n_cols`` columns.

    A (N, 3) array is padded with a zero intensity column when ``n_cols`` is 4.
    """
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, n_cols)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols == 4 and arr.shape[1] == 3:
        arr = np.hstack([arr, np.zeros((arr.shape[0], 1), dtype=dtype)])
    if arr.shape[1] != n_cols:
        raise ContractError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    return arr


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = "non-negative" if allow_zero else "positive"
        raise ConfigError(f"{name} must be {bound}, got {value!r}")
    return value


def check_int(value, name, minimum=0):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_unit_interval(value, name, open_ends=False):
    check_positive(value, name, allow_zero=not open_ends)
    if value > 1 or (open_ends and value >= 1):
        raise ConfigError(f"{name} must lie in {'(0, 1)' if open_ends else '[0, 1]'}, got {value!r}")
    return value


def check_sorted(times, name):
    t = np.asarray(times, dtype=np.float64)
    if t.size > 1 and np.any(np.diff(t) < 0):
        raise ContractError(f"{name} must be sorted by time")
    return t


def check_random_state(seed):
    """Return a numpy Generator from an int seed, a Generator, or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(check_int(seed, "seed"))
