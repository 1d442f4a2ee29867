"""Small input-validation helpers shared across modules."""

import math

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, DimensionMismatchError


def check_state(u, n_dof=None, name="state"):
    """Return ``u`` as a finite 1-D float64 array, optionally of length ``n_dof``."""
    u = check_array(u, ensure_2d=False, dtype=np.float64, input_name=name)
    if u.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {u.shape}")
    if n_dof is not None and u.shape[0] != n_dof:
        raise DimensionMismatchError(
            f"{name} has length {u.shape[0]}, expected {n_dof}")
    return u


def check_positive(value, name, allow_zero=False):
    value = float(value)
    if not math.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigurationError(f"{name} must be finite and {bound}, got {value}",
                                 field=name)
    return value


def check_fraction(value, name):
    """Energy fractions live in (0, 1]."""
    value = float(value)
    if not (0.0 < value <= 1.0):
        raise ConfigurationError(f"{name} must lie in (0, 1], got {value}", field=name)
    return value


def integral_ratio(span, step, name, rtol=1e-9):
    """Return ``span / step`` as an int, or raise if it is not integral to ``rtol``."""
    ratio = span / step
    count = int(round(ratio))
    if count < 0 or abs(ratio - count) > rtol * max(1.0, abs(ratio)):
        raise ConfigurationError(
            f"{name}: span {span!r} is not an integer multiple of step {step!r}",
            field=name)
    return count
