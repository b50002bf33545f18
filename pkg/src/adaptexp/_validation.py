"""Input validation helpers shared by the modules and estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ConfigError, NonFiniteValue
from .tensor import first_nonfinite


def check_tensor(x, *, name="tensor", allow_empty=True) -> np.ndarray:
    """Coerce ``x`` (Tensor or array-like) to a finite float64 ndarray."""
    arr = np.asarray(x, dtype=np.float64)
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name} is empty")
    idx = first_nonfinite(arr)
    if idx is not None:
        raise NonFiniteValue(idx, float(arr.reshape(-1)[idx]))
    return arr


def nonzero_magnitudes(x) -> np.ndarray:
    arr = np.abs(check_tensor(x)).reshape(-1)
    return arr[arr > 0]


def check_bits(bits) -> int:
    if isinstance(bits, bool) or not isinstance(bits, numbers.Integral):
        raise ConfigError(f"bitwidth must be an integer, got {bits!r}")
    if not 3 <= bits <= 7:
        raise ConfigError(f"bitwidth must be in [3, 7], got {bits}")
    return int(bits)


def check_fraction(value, name, *, allow_inf=False) -> float:
    value = float(value)
    if not value > 0 or (np.isinf(value) and not allow_inf) or np.isnan(value):
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return value
