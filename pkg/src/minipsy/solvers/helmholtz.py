"""Model Helmholtz operator on cell-centred (W3) fields and its vertical
line preconditioner.

The operator is ``lam*I - ch*Dh - gamma*Dv`` where ``Dh`` is the graph
Laplacian over edge neighbours and ``Dv`` the vertical second difference
with zero-flux top and bottom.  It is symmetric positive definite for
``lam > 0``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..kernels import backend as _default_backend
from .columns import ColumnTriMatrix, column_view, tri_solve

__all__ = [
    "HelmholtzOperator",
    "LinePreconditioner",
    "helmholtz_operator",
    "vertical_line_preconditioner",
]


def _chunks(n: int, parts: int):
    bounds = [(i * n) // parts for i in range(parts + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(parts) if bounds[i + 1] > bounds[i]]


class HelmholtzOperator:
    """``y = (lam - ch*Dh - gamma*Dv) x`` over the owned columns of ``space``.

    Parameters
    ----------
    space : FunctionSpace
        A W3 space; its mesh must carry at least one halo layer when
        partitioned, since the stencil reads edge neighbours.
    lam, gamma : float
        Mass shift (> 0) and vertical coupling.
    ch : float
        Horizontal coupling weight, 1 on the finest mesh.
    threads : int
        Columns are split into this many static chunks.
    """

    def __init__(self, space, lam: float, gamma: float, ch: float = 1.0, threads: int = 1, backend=None):
        if space.kind != "W3":
            raise ValueError(f"Helmholtz operator acts on W3 fields, not {space.kind}")
        if not lam > 0:
            raise ValueError("lam must be positive")
        self.space = space
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.ch = float(ch)
        self.threads = max(int(threads), 1)
        self.backend = backend or _default_backend
        mesh = space.mesh
        self._cells = np.arange(mesh.n_owned, dtype=np.int64)
        self._nbr = mesh.local_neighbours()
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.applies = 0

    def _kernel(self, cells, y, x):
        self.backend.helmholtz_apply(cells, self.space.nlayers, y.data, x.data, self.space.dofmap,
                                     self._nbr, self.lam, self.ch, self.gamma)

    def apply(self, x):
        if x.space is not self.space:
            raise ValueError("field does not belong to the operator's space")
        if self.space.mesh.max_halo_depth >= 1 and x.is_dirty(1):
            x.halo_exchange(1)
        y = x.zeros_like()
        if self._pool is None:
            self._kernel(self._cells, y, x)
        else:
            futs = [self._pool.submit(self._kernel, self._cells[a:b], y, x)
                    for a, b in _chunks(len(self._cells), self.threads)]
            for f in futs:
                f.result()
        y.set_dirty()
        self.applies += 1
        return y

    def neighbour_counts(self) -> np.ndarray:
        return (self._nbr[: self.space.mesh.n_owned] >= 0).sum(axis=1)

    def column_part(self, include_horizontal_diagonal: bool = False) -> ColumnTriMatrix:
        """Tridiagonal part ``lam - gamma*Dv`` of every owned column.

        With ``include_horizontal_diagonal`` the diagonal of ``-ch*Dh`` is
        added, giving the exact diagonal blocks of the operator.
        """
        ncol, L = self.space.mesh.n_owned, self.space.nlayers
        nv = np.full(L, 2.0)
        if L == 1:
            nv[:] = 0.0
        else:
            nv[0] = nv[-1] = 1.0
        di = np.tile(self.lam + self.gamma * nv, (ncol, 1))
        if include_horizontal_diagonal:
            di = di + (self.ch * self.neighbour_counts())[:, None]
        off = np.full((ncol, L - 1), -self.gamma)
        return ColumnTriMatrix(off, di, off.copy())

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


class LinePreconditioner:
    """Vertical line relaxation: an exact solve with the column part of ``A``.

    ``A`` is any operator with a ``column_part(include_horizontal_diagonal)``
    method returning a :class:`ColumnTriMatrix`.
    """

    def __init__(self, A, include_horizontal_diagonal: bool = True):
        self.A = A
        self.include_horizontal_diagonal = include_horizontal_diagonal
        self.matrix = A.column_part(include_horizontal_diagonal)
        self.backend = getattr(A, "backend", None) or _default_backend

    def apply(self, b):
        return tri_solve(self.matrix, b, self.backend)


def helmholtz_operator(space, lam: float, gamma: float, **kw) -> HelmholtzOperator:
    return HelmholtzOperator(space, lam, gamma, **kw)


def vertical_line_preconditioner(A: HelmholtzOperator, include_horizontal_diagonal: bool = True):
    return LinePreconditioner(A, include_horizontal_diagonal)
