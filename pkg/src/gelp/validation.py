"""Input validation helpers shared across the public API."""
from __future__ import annotations

import numpy as np


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def as_samples(x, name: str = "samples") -> np.ndarray:
    """Coerce to a finite 1-D float array."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return check_finite(x, name)


def as_frames(x, name: str = "frames") -> np.ndarray:
    """Coerce to a finite 2-D float array (frames x channels)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return check_finite(x, name)


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_in_range(value, lo, hi, name: str, *, inclusive_hi: bool = False):
    ok = lo <= value < hi or (inclusive_hi and value == hi)
    if not ok:
        bound = "<=" if inclusive_hi else "<"
        raise ValueError(f"{name} must satisfy {lo} <= {name} {bound} {hi}, got {value}")
    return value
