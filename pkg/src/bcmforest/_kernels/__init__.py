"""Kernel backend selection.

The sampler's hot loops call through this module's namespace
(``kernels.route_rows`` etc.), so the backend can be switched at runtime
with :func:`use_backend`.  The compiled extension is preferred when it
imports; set ``BCMFOREST_BACKEND=python`` (or ``c``) to force a choice at
import time.
"""

import os

from . import numpy_backend

_FUNCTIONS = (
    "route_rows",
    "leaf_stats",
    "rows_where",
    "rows_where2",
    "split_stats",
    "paired_stats",
    "partial_residual",
    "tree_residual",
    "distinct_sorted",
    "apply_fit_delta",
    "accumulate_fit",
    "assign_split",
    "assign_fill",
)

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_active = None


def available_backends():
    out = ["python"]
    if _ckernels is not None:
        out.insert(0, "c")
    return out


def use_backend(name):
    """Bind the named backend's kernels into this module's namespace."""
    global _active
    if name == "c":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        impl = _ckernels
    elif name == "python":
        impl = numpy_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    for fn in _FUNCTIONS:
        globals()[fn] = getattr(impl, fn)
    _active = name


def current_backend():
    return _active


def get_backend_module(name):
    if name == "c":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        return _ckernels
    if name == "python":
        return numpy_backend
    raise ValueError(f"unknown backend {name!r}")


_requested = os.environ.get("BCMFOREST_BACKEND", "auto")
if _requested == "auto":
    use_backend("c" if _ckernels is not None else "python")
else:
    use_backend(_requested)
