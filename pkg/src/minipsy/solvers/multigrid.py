"""Horizontal geometric multigrid with vertical line smoothing.

Levels come from repeated 2x horizontal coarsening of the global mesh; the
vertical grid is never coarsened.  One V-cycle per ``apply``:

* pre-smooth: one damped line-relaxation sweep from a zero guess,
* restrict the residual by averaging the four children of each coarse cell,
* recurse, prolong the correction by injection to the children,
* post-smooth: one damped line-relaxation sweep.

The coarsest level is solved by line-preconditioned CG to a loose
relative tolerance.  The coarse operators are rediscretised with the same
``lam`` and ``gamma`` and a horizontal weight halved per level, which is
the coupling the average/injection pair sees on a 2x coarser mesh.
Serial meshes only.
"""
from __future__ import annotations

import numpy as np

from ..fields import Field, make_function_space
from ..mesh import MeshError, coarsen, extrude, partition
from .columns import column_view
from .helmholtz import HelmholtzOperator, LinePreconditioner
from .krylov import cg

__all__ = ["MultigridPreconditioner", "multigrid_preconditioner"]


class _Level:
    def __init__(self, space, A, smoother, parent=None):
        self.space = space
        self.A = A
        self.smoother = smoother
        self.parent = parent        # fine local cell -> coarse local cell (for the next level)


class MultigridPreconditioner:
    """V-cycle preconditioner for :class:`HelmholtzOperator`.

    Parameters
    ----------
    A : HelmholtzOperator
        Finest-level operator.  Its mesh must hold every cell on one rank.
    levels : int
        Number of levels including the finest; ``levels=1`` is exactly the
        line preconditioner.
    omega : float
        Damping of the line-relaxation smoother.
    coarse_tol : float
        Relative tolerance of the coarsest-level CG solve.
    """

    def __init__(self, A: HelmholtzOperator, levels: int = 3, omega: float = 0.8,
                 coarse_tol: float = 1e-2, coarse_maxit: int = 500):
        if levels < 1:
            raise ValueError("levels must be >= 1")
        mesh = A.space.mesh
        gm = mesh.global_mesh
        if mesh.n_owned != gm.ncells:
            raise MeshError("multigrid needs the whole mesh on one rank")
        self.omega = float(omega)
        self.coarse_tol = float(coarse_tol)
        self.coarse_maxit = int(coarse_maxit)
        self.levels = [_Level(A.space, A, LinePreconditioner(A, True))]
        self.coarse_reports = []
        L = A.space.nlayers
        fine_gm, fine_mesh, ch = gm, mesh, A.ch
        for _ in range(levels - 1):
            try:
                coarse_gm, parent = coarsen(fine_gm)
            except MeshError as exc:
                raise MeshError(f"{levels} multigrid levels impossible: {exc}") from None
            cmesh = extrude(coarse_gm, partition(coarse_gm, 1, fine_mesh.max_halo_depth), 0, L)
            # local numbering: map local fine cells to local coarse cells
            gparent = parent[fine_mesh.cells[: fine_mesh.n_owned]]
            self.levels[-1].parent = cmesh.global_to_local[gparent]
            ch *= 0.5
            space = make_function_space(cmesh, "W3")
            Ac = HelmholtzOperator(space, A.lam, A.gamma, ch=ch, backend=A.backend)
            self.levels.append(_Level(space, Ac, LinePreconditioner(Ac, True)))
            fine_gm, fine_mesh = coarse_gm, cmesh
        self.nlevels = levels

    # transfer operators on (ncol, L) column arrays ---------------------
    def restrict(self, lvl: int, r: Field) -> Field:
        fine, coarse = self.levels[lvl], self.levels[lvl + 1]
        out = Field(coarse.space)
        rc = column_view(r)
        oc = column_view(out)
        np.add.at(oc, fine.parent, rc)
        oc *= 0.25
        out.set_dirty()
        return out

    def prolong(self, lvl: int, e: Field) -> Field:
        fine = self.levels[lvl]
        out = Field(fine.space)
        column_view(out)[:] = column_view(e)[fine.parent]
        out.set_dirty()
        return out

    def _smooth(self, lvl: int, x: Field, b: Field):
        level = self.levels[lvl]
        r = level.A.apply(x)
        r.aypx(-1.0, b)
        x.axpy(self.omega, level.smoother.apply(r))

    def _cycle(self, lvl: int, b: Field) -> Field:
        level = self.levels[lvl]
        if lvl == self.nlevels - 1:
            x, rep = cg(level.A, level.smoother, b, tol=self.coarse_tol, maxit=self.coarse_maxit)
            self.coarse_reports.append(rep)
            return x
        x = level.smoother.apply(b)
        x.scale(self.omega)
        r = level.A.apply(x)
        r.aypx(-1.0, b)
        ec = self._cycle(lvl + 1, self.restrict(lvl, r))
        x.axpy(1.0, self.prolong(lvl, ec))
        self._smooth(lvl, x, b)
        return x

    def apply(self, b: Field) -> Field:
        if b.space is not self.levels[0].space:
            raise ValueError("field does not belong to the finest multigrid level")
        if self.nlevels == 1:
            return self.levels[0].smoother.apply(b)
        return self._cycle(0, b)


def multigrid_preconditioner(A: HelmholtzOperator, levels: int = 3, **kw) -> MultigridPreconditioner:
    return MultigridPreconditioner(A, levels, **kw)
