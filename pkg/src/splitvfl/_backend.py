"""Kernel backend selection.

The hot convolution and pooling loops are compiled with numba when it is
importable.  Setting ``SPLITVFL_DISABLE_NUMBA=1`` forces the pure-numpy path,
which is slower but has no compile step.  Both paths compute the same
functions; they are not guaranteed to round identically.
"""

import os

_TRUTHY = {"1", "true", "yes", "on"}

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SPLITVFL_DISABLE_NUMBA", "").lower() not in _TRUTHY


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    """Switch kernels at runtime (used by tests and the benchmark)."""
    global USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
