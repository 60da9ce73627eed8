"""Kernel backend selection.

Imports the compiled kernels when the extension built, otherwise the NumPy
fallback. SPEECHCOT_KERNELS=numpy|compiled forces a choice (useful for the
parity tests and the benchmark); asking for the compiled backend when it is
unavailable is an error rather than a silent downgrade.
"""
from __future__ import annotations

import os

from . import _kernels_py
from .errors import ConfigError

_CHOICES = ("auto", "numpy", "compiled")


def _load(name: str):
    if name == "numpy":
        return _kernels_py
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        if name == "compiled":
            raise ConfigError(
                "SPEECHCOT_KERNELS=compiled but the extension is not built"
            ) from None
        return _kernels_py
    return _kernels


_requested = os.environ.get("SPEECHCOT_KERNELS", "auto").strip().lower()
if _requested not in _CHOICES:
    raise ConfigError(
        f"SPEECHCOT_KERNELS must be one of {_CHOICES}, got {_requested!r}"
    )

kernels = _load(_requested)
BACKEND = "compiled" if kernels.IS_COMPILED else "numpy"


def load_backend(name: str):
    """Explicit loader for benchmarks and tests; bypasses the env default."""
    if name not in ("numpy", "compiled"):
        raise ConfigError(f"unknown backend {name!r}")
    return _load(name)
