"""Per-column tridiagonal operators.

A :class:`ColumnTriMatrix` holds, for each of ``ncol`` vertical columns of
``nlayers`` cells, the sub-diagonal ``lo``, diagonal ``di`` and
super-diagonal ``up``.  ``lo[c, k]`` couples layer ``k + 1`` to ``k`` and
``up[c, k]`` couples layer ``k`` to ``k + 1``.  There are no cross-column
entries, so every column is an independent unit of work.
"""
from __future__ import annotations

import numpy as np

from ..kernels import backend as _default_backend

__all__ = [
    "ColumnSolveError",
    "ColumnTriMatrix",
    "tri_add",
    "tri_scale",
    "tri_apply",
    "tri_solve",
    "column_view",
]


class ColumnSolveError(ArithmeticError):
    def __init__(self, column: int):
        super().__init__(f"zero pivot in column {column}")
        self.column = column


class ColumnTriMatrix:
    def __init__(self, lo, di, up):
        di = np.ascontiguousarray(di, dtype=float)
        if di.ndim != 2 or di.shape[1] < 1:
            raise ValueError("diagonal must have shape (ncol, nlayers)")
        ncol, L = di.shape
        lo = np.ascontiguousarray(lo, dtype=float).reshape(ncol, L - 1)
        up = np.ascontiguousarray(up, dtype=float).reshape(ncol, L - 1)
        self.lo, self.di, self.up = lo, di, up

    @property
    def ncol(self) -> int:
        return self.di.shape[0]

    @property
    def nlayers(self) -> int:
        return self.di.shape[1]

    @property
    def shape(self):
        return self.di.shape

    @classmethod
    def identity(cls, ncol: int, nlayers: int):
        return cls(np.zeros((ncol, nlayers - 1)), np.ones((ncol, nlayers)), np.zeros((ncol, nlayers - 1)))

    def copy(self):
        return ColumnTriMatrix(self.lo.copy(), self.di.copy(), self.up.copy())

    def dense(self, column: int) -> np.ndarray:
        """Dense ``(nlayers, nlayers)`` matrix of one column."""
        c = column
        return (np.diag(self.di[c]) + np.diag(self.lo[c], -1) + np.diag(self.up[c], 1))

    def __add__(self, other):
        return tri_add(self, other)

    def __mul__(self, alpha):
        return tri_scale(self, alpha)

    __rmul__ = __mul__


def _check_pair(m: ColumnTriMatrix, n: ColumnTriMatrix):
    if m.shape != n.shape:
        raise ValueError(f"column matrices differ in shape: {m.shape} vs {n.shape}")


def tri_add(m: ColumnTriMatrix, n: ColumnTriMatrix) -> ColumnTriMatrix:
    _check_pair(m, n)
    return ColumnTriMatrix(m.lo + n.lo, m.di + n.di, m.up + n.up)


def tri_scale(m: ColumnTriMatrix, alpha: float) -> ColumnTriMatrix:
    return ColumnTriMatrix(alpha * m.lo, alpha * m.di, alpha * m.up)


def _as_columns(m, x):
    x = np.asarray(x, dtype=float)
    if x.shape != m.shape:
        raise ValueError(f"column data of shape {x.shape} does not match matrix {m.shape}")
    return np.ascontiguousarray(x)


def column_view(field) -> np.ndarray:
    """Owned columns of a one-dof-per-cell field as an ``(ncol, nlayers)`` view."""
    space = field.space
    ncol, L = space.mesh.n_owned, space.nlayers
    if space.ndf != 1:
        raise ValueError(f"column view needs one dof per cell, {space.kind} has {space.ndf}")
    bases = space.dofmap[:ncol, 0]
    if ncol and not np.array_equal(bases, np.arange(ncol) * L):
        raise ValueError("owned columns are not stored contiguously")
    return field.data[: ncol * L].reshape(ncol, L)


def tri_apply(m: ColumnTriMatrix, x, backend=None):
    """Banded product.  ``x`` is an ``(ncol, nlayers)`` array or a field;
    a field argument returns a new field (halo dirty)."""
    be = backend or _default_backend
    if hasattr(x, "space"):
        out = x.zeros_like()
        be.tri_apply(m.lo, m.di, m.up, _as_columns(m, column_view(x)), column_view(out))
        out.set_dirty()
        return out
    xc = _as_columns(m, x)
    y = np.empty_like(xc)
    be.tri_apply(m.lo, m.di, m.up, xc, y)
    return y


def tri_solve(m: ColumnTriMatrix, b, backend=None):
    """Thomas-algorithm solve in every column.

    Raises :class:`ColumnSolveError` naming the first column with a zero pivot.
    """
    be = backend or _default_backend
    field_arg = hasattr(b, "space")
    rhs = _as_columns(m, column_view(b) if field_arg else b)
    if field_arg:
        out = b.zeros_like()
        x = column_view(out)
    else:
        x = np.empty_like(rhs)
    work = np.empty((m.ncol, max(m.nlayers - 1, 1)))
    bad = be.tri_solve(m.lo, m.di, m.up, rhs, x, work)
    if bad >= 0:
        raise ColumnSolveError(int(bad))
    if field_arg:
        out.set_dirty()
        return out
    return x
