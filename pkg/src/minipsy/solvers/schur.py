"""Reduced mixed velocity/pressure system and its Schur-complement preconditioner.

The system acts on ``FieldVector([u, p])`` with ``u`` in W2 and ``p`` in W3::

    [ M      tau*G ] [u]   [f]
    [ tau*D  lam*I ] [p] = [g]

``D`` is the cell divergence (outward face fluxes) and ``G = -D^T`` the
gradient.  Faces on the rigid lid and floor, and side faces on an open
lateral boundary, carry no flux: their rows are identity rows and they are
left out of ``D`` and ``G``.  The velocity mass is ``M = diag(m) + eps*K``
where ``K`` couples the four side faces of a cell like a 4-cycle graph
Laplacian, so ``eps = 0`` gives a diagonal mass.

The preconditioner lumps ``M`` by row sums into ``Ml``, solves the
pressure Schur complement ``S = lam + tau^2 G^T Ml^-1 G`` with a supplied
inner solver and back-substitutes ``u``.
"""
from __future__ import annotations

import numpy as np

from .columns import ColumnTriMatrix
from .krylov import SolverReport, cg
from .vectors import FieldVector

__all__ = [
    "MixedOperator",
    "SchurOperator",
    "SchurPreconditioner",
    "InnerSolver",
    "schur_pressure_preconditioner",
]


class MixedOperator:
    """Block operator of the reduced mixed system.

    Parameters
    ----------
    uspace, pspace : FunctionSpace
        W2 and W3 spaces on the same mesh (one halo layer needed when
        partitioned).
    lam, tau : float
        Pressure mass shift and gradient coupling.
    m_side, m_vert : float
        Diagonal mass of side and horizontal faces.
    eps : float
        Strength of the side-face coupling in the mass matrix.
    """

    def __init__(self, uspace, pspace, lam=1.0, tau=1.0, m_side=1.0, m_vert=1.0, eps=0.0):
        if uspace.kind != "W2" or pspace.kind != "W3":
            raise ValueError("mixed operator needs (W2, W3) spaces")
        if uspace.mesh is not pspace.mesh:
            raise ValueError("spaces live on different meshes")
        self.uspace, self.pspace = uspace, pspace
        self.lam, self.tau, self.eps = float(lam), float(tau), float(eps)
        mesh = uspace.mesh
        L = mesh.nlayers
        self.nlayers = L
        n1 = mesh.last_cell(min(1, mesh.max_halo_depth))
        # depth-1 cells in ascending global id: accumulation order is then
        # the same on every partition
        self._cells = np.argsort(mesh.cells[:n1], kind="stable").astype(np.int64)
        self._owned = np.arange(mesh.n_owned, dtype=np.int64)
        ks = np.arange(L)
        dm = uspace.dofmap
        self._side = dm[:, :4, None] + ks                           # (ncells, 4, L)
        self._bot = dm[:, 4, None] + ks                             # (ncells, L)
        self._top = self._bot + 1
        self._p = pspace.dofmap[:, 0, None] + ks
        self._sign = mesh.local_edge_sign().astype(float)          # (ncells, 4)
        bnd = np.zeros(uspace.undf, dtype=bool)
        side_b = np.broadcast_to(uspace.boundary[:, :4, None], self._side.shape)
        bnd[self._side[side_b]] = True
        bnd[dm[:, 4]] = True
        bnd[dm[:, 4] + L] = True
        self.boundary = bnd
        self.interior = (~bnd).astype(float)
        m = np.ones(uspace.undf)
        m[self._side.ravel()] = m_side
        m[self._bot.ravel()] = m_vert
        m[self._top.ravel()] = m_vert
        m[bnd] = 1.0
        self.mass_diag = m

    # blocks ------------------------------------------------------------
    def _fresh(self, space):
        from ..fields import Field
        f = Field(space)
        f.set_dirty()
        return f

    def divergence(self, u):
        """``D u`` on owned cells; reads only depth-0 velocity dofs."""
        ui = u.data * self.interior
        c = self._owned
        t = self._sign[c, 0, None] * ui[self._side[c, 0]]
        for e in range(1, 4):
            t = t + self._sign[c, e, None] * ui[self._side[c, e]]
        t = t + ui[self._top[c]]
        t = t - ui[self._bot[c]]
        out = self._fresh(self.pspace)
        out.data[self._p[c]] = t
        return out

    def gradient(self, p):
        """``G p = -D^T p`` on owned and annexed velocity dofs."""
        if p.is_dirty(1) and p.max_depth >= 1:
            p.halo_exchange(1)
        c = self._cells
        pc = p.data[self._p[c]]
        acc = np.zeros(self.uspace.undf)
        idx = np.concatenate([self._side[c].transpose(0, 2, 1).reshape(len(c), -1),
                              self._top[c], self._bot[c]], axis=1)
        val = np.concatenate([(-self._sign[c][:, None, :] * pc[:, :, None]).reshape(len(c), -1),
                              -pc, pc], axis=1)
        np.add.at(acc, idx.ravel(), val.ravel())
        out = self._fresh(self.uspace)
        out.data[:] = acc * self.interior
        return out

    def mass(self, u):
        """``M u``; the side coupling needs velocity clean to depth 1."""
        out = self._fresh(self.uspace)
        out.data[:] = self.mass_diag * u.data
        if self.eps != 0.0:
            if u.is_dirty(1) and u.max_depth >= 1:
                u.halo_exchange(1)
            c = self._cells
            ui = u.data * self.interior
            s = ui[self._side[c]]                                       # (n, 4, L)
            ks = 2.0 * s - np.roll(s, 1, axis=1) - np.roll(s, -1, axis=1)
            acc = np.zeros(self.uspace.undf)
            np.add.at(acc, self._side[c].ravel(), (self.eps * ks).ravel())
            out.data[:] = out.data + acc * self.interior
        return out

    def lumped_mass(self) -> np.ndarray:
        """Row sums of ``M`` on the local dofs (valid on owned and annexed dofs)."""
        from ..fields import Field
        ones = Field(self.uspace, np.ones(self.uspace.undf))
        return self.mass(ones).data

    # operator ----------------------------------------------------------
    def apply(self, x: FieldVector) -> FieldVector:
        u, p = x[0], x[1]
        if u.space is not self.uspace or p.space is not self.pspace:
            raise ValueError("vector does not match the mixed operator's spaces")
        yu = self.mass(u)
        yu.axpy(self.tau, self.gradient(p))
        yp = self.divergence(u)
        yp.scale(self.tau)
        yp.axpy(self.lam, p)
        yu.set_dirty()
        yp.set_dirty()
        return FieldVector([yu, yp], x.names)

    def vector(self, u=None, p=None) -> FieldVector:
        from ..fields import Field
        return FieldVector([u if u is not None else Field(self.uspace, name="u"),
                            p if p is not None else Field(self.pspace, name="p")], ["u", "p"])


class SchurOperator:
    """``S p = lam p + tau^2 G^T Ml^-1 G p`` on W3."""

    def __init__(self, system: MixedOperator):
        self.system = system
        self.space = system.pspace
        self.inv_lumped = 1.0 / system.lumped_mass()
        self.backend = None

    def apply(self, p):
        sysm = self.system
        if p.space is not self.space:
            raise ValueError("field does not belong to the Schur operator's space")
        w = sysm.gradient(p)
        w.data *= self.inv_lumped
        y = sysm.divergence(w)                  # G^T = -D
        y.scale(-sysm.tau * sysm.tau)
        y.axpy(sysm.lam, p)
        y.set_dirty()
        return y

    def column_part(self, include_horizontal_diagonal: bool = True) -> ColumnTriMatrix:
        """Vertical couplings of ``S`` per owned column, optionally with the
        horizontal contributions to the diagonal."""
        s = self.system
        c = np.arange(s.pspace.mesh.n_owned)
        t2 = s.tau * s.tau
        inv = self.inv_lumped * s.interior
        wt = inv[s._top[c]]                 # (ncol, L), zero on the lid
        wb = inv[s._bot[c]]                 # zero on the floor
        di = s.lam + t2 * (wt + wb)
        if include_horizontal_diagonal:
            di = di + t2 * inv[s._side[c]].sum(axis=1)
        off = -t2 * wt[:, :-1]
        return ColumnTriMatrix(off, di, off.copy())


class InnerSolver:
    """Krylov solve of the pressure problem, used inside the preconditioner."""

    def __init__(self, A, P=None, method=cg, tol=1e-6, maxit=500):
        self.A, self.P, self.method = A, P, method
        self.tol, self.maxit = tol, maxit

    def __call__(self, rhs):
        return self.method(self.A, self.P, rhs, tol=self.tol, maxit=self.maxit)


class SchurPreconditioner:
    """Approximate block solve through the lumped-mass Schur complement.

    ``inner`` maps a W3 right-hand side to ``(p, SolverReport)``.  Inner
    non-convergence does not raise; it is counted in ``failures`` and the
    latest report is kept in ``last_report``.
    """

    def __init__(self, system: MixedOperator, inner):
        self.system = system
        self.inner = inner
        self.inv_lumped = 1.0 / system.lumped_mass()
        self.failures = 0
        self.applies = 0
        self.last_report: SolverReport | None = None

    def apply(self, b: FieldVector) -> FieldVector:
        s = self.system
        f, g = b[0], b[1]
        w = f.copy()
        w.data *= self.inv_lumped
        w.set_dirty()
        rhs = s.divergence(w)
        rhs.scale(-s.tau)
        rhs.axpy(1.0, g)
        p, rep = self.inner(rhs)
        self.applies += 1
        self.last_report = rep
        if not rep.converged:
            self.failures += 1
        u = s.gradient(p)
        u.aypx(-s.tau, f)
        u.data *= self.inv_lumped
        u.set_dirty()
        p.set_dirty()
        return FieldVector([u, p], b.names)


def schur_pressure_preconditioner(system: MixedOperator, helmholtz_solver=None) -> SchurPreconditioner:
    """Schur preconditioner; the default inner solver is line-preconditioned CG to 1e-6."""
    if helmholtz_solver is None:
        from .helmholtz import LinePreconditioner
        S = SchurOperator(system)
        helmholtz_solver = InnerSolver(S, LinePreconditioner(S))
    return SchurPreconditioner(system, helmholtz_solver)

