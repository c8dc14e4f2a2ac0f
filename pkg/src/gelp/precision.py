"""Global numeric precision selection.

Two modes: float32 for training and inference, float64 for verification
(gradient checks always run in 64-bit). The default is taken from the
GELP_PRECISION environment variable ("f32" or "f64") at import time and can
be changed programmatically with `set_precision`.
"""
from __future__ import annotations

import os

import numpy as np

_NAMES = {"f32": np.float32, "f64": np.float64}

_default_dtype = _NAMES.get(os.environ.get("GELP_PRECISION", "f32"))
if _default_dtype is None:
    raise ValueError(
        f"GELP_PRECISION must be one of {sorted(_NAMES)}, "
        f"got {os.environ.get('GELP_PRECISION')!r}"
    )


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_precision(name: str) -> None:
    """Set the process-wide default dtype ("f32" or "f64")."""
    global _default_dtype
    try:
        _default_dtype = _NAMES[name]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(_NAMES)}, got {name!r}")


def resolve_dtype(dtype=None) -> np.dtype:
    """Return `dtype` if given, else the process default."""
    return np.dtype(dtype) if dtype is not None else default_dtype()
