"""Backend selection for the grid kernels.

The compiled extension is used when it imports; ``PLANMAX_PURE_PYTHON=1``
forces the numpy implementation.  ``use_backend`` switches at runtime (tests
and the benchmark compare both).
"""

import os

from planmax import _pykernels

try:
    from planmax import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FUNCS = (
    "solve_inferred",
    "solve_goal",
    "propagate_inferred",
    "propagate_goal",
    "sample_plans",
    "assign_nearest",
)

BACKEND = None


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use_backend(name):
    """Bind the module-level kernel functions to ``name`` ("cython" or "python")."""
    global BACKEND
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        impl = _ckernels
    elif name == "python":
        impl = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    g = globals()
    for f in _FUNCS:
        g[f] = getattr(impl, f)
    BACKEND = name


use_backend(
    "cython" if _ckernels is not None and not os.environ.get("PLANMAX_PURE_PYTHON") else "python"
)
