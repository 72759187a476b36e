"""Hot-path kernels: compiled core with a NumPy fallback.

The backend is picked once at import time from the HARDREID_KERNELS
environment variable: "native" requires the compiled extension and fails
loudly if it is missing, "python" forces the NumPy reference, and "auto"
(the default) prefers the extension and falls back silently. Callers that
need to switch later (benchmarks, backend-equivalence tests) can use
:func:`use_backend`.
"""

import os

from ..errors import ConfigError
from . import pyref

MINING_BATCH_HARD = pyref.MINING_BATCH_HARD
MINING_BATCH_ALL = pyref.MINING_BATCH_ALL

_MINING_CODES = {"batch_hard": MINING_BATCH_HARD, "batch_all": MINING_BATCH_ALL}


def _load(name):
    if name == "python":
        return pyref
    try:
        from . import _native
    except ImportError:
        if name == "native":
            raise ImportError(
                "HARDREID_KERNELS=native but the compiled extension is not "
                "available; build it or unset the variable"
            )
        return pyref
    return _native


_choice = os.environ.get("HARDREID_KERNELS", "auto")
if _choice not in ("auto", "native", "python"):
    raise ImportError(
        f"HARDREID_KERNELS must be 'auto', 'native' or 'python', got {_choice!r}"
    )
_impl = _load(_choice)


def active_backend():
    """Name of the backend in use, 'native' or 'python'."""
    return _impl.BACKEND_NAME


def use_backend(name):
    """Switch backends at runtime; returns the previous backend's name."""
    global _impl
    previous = _impl.BACKEND_NAME
    _impl = _load(name)
    return previous


def mining_code(strategy):
    """Map a mining strategy name onto the integer code the kernels take."""
    try:
        return _MINING_CODES[strategy]
    except KeyError:
        raise ConfigError(f"unknown mining strategy: {strategy!r}") from None


def pairwise_distance(features, eps):
    return _impl.pairwise_distance(features, eps)


def pairwise_distance_backward(features, dist, grad_dist):
    return _impl.pairwise_distance_backward(features, dist, grad_dist)


def triplet_forward_backward(dist, labels, margin, mining):
    return _impl.triplet_forward_backward(dist, labels, margin, mining)
