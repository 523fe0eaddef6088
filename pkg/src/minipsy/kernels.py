"""Backend selection for the column kernels.

The compiled extension is used when it imports; ``MINIPSY_BACKEND=python``
forces the numpy implementation.  Both expose the same functions with the
same arithmetic order.
"""
from __future__ import annotations

import importlib
import os

from . import _pykernels

__all__ = ["backend", "load_backend", "available_backends", "BACKEND_NAME"]

_FUNCS = ("matrix_vector", "enforce_bc", "advect_upwind", "helmholtz_apply",
          "tri_apply", "tri_solve")


def _try_compiled():
    try:
        return importlib.import_module("minipsy._ckernels")
    except ImportError:
        return None


def available_backends() -> list[str]:
    names = ["python"]
    if _try_compiled() is not None:
        names.insert(0, "cython")
    return names


def load_backend(name: str | None = None):
    """Return the kernel module for ``name`` ('cython', 'python' or None for auto)."""
    if name is None or name == "auto":
        name = os.environ.get("MINIPSY_BACKEND", "auto").lower()
    if name == "python":
        return _pykernels
    mod = _try_compiled()
    if mod is None:
        if name == "cython":
            raise ImportError("compiled kernels are not built; reinstall with Cython available")
        return _pykernels
    missing = [f for f in _FUNCS if not hasattr(mod, f)]
    if missing:
        raise ImportError(f"compiled kernels lack {missing}")
    return mod


backend = load_backend()
BACKEND_NAME = backend.NAME
