"""Krylov solvers written once against the vector/operator/preconditioner contracts.

Operators and preconditioners expose ``apply(x) -> new vector``.  Iteration
control uses the recurrence residual; once it drops below ``tol`` the true
residual ``||b - A x|| / ||b||`` is recomputed and the iteration only stops
if that also meets the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .vectors import ArrayVector

__all__ = [
    "SolverReport",
    "IdentityPreconditioner",
    "MatrixOperator",
    "cg",
    "gmres",
    "bicgstab",
]


@dataclass
class SolverReport:
    method: str
    iterations: int = 0
    residual: float = math.nan              # true relative residual at exit
    recurrence_residual: float = math.nan
    converged: bool = False
    breakdown: bool = False
    reductions: int = 0                      # reductions during the iterations
    setup_reductions: int = 0                # initial and final residual checks
    reductions_per_iteration: list = field(default_factory=list)
    history: list = field(default_factory=list)   # relative recurrence residual per iteration

    def summary(self) -> str:
        state = "converged" if self.converged else ("breakdown" if self.breakdown else "not converged")
        return (f"{self.method}: {state} after {self.iterations} iterations, "
                f"relative residual {self.residual:.3e}")


class IdentityPreconditioner:
    def apply(self, b):
        return b.copy()


class MatrixOperator:
    """Dense matrix acting on :class:`ArrayVector`."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("MatrixOperator needs a square matrix")

    def apply(self, x):
        if len(x.data) != self.matrix.shape[1]:
            raise ValueError(f"operator of size {self.matrix.shape[1]} applied to vector of size {len(x.data)}")
        return ArrayVector(self.matrix @ x.data, x.comm)


class _Counter:
    """Reduction count through a vector's communicator, minus excluded work."""

    def __init__(self, vec):
        self.comm = vec.comm
        self.start = self.comm.reductions
        self.excluded = 0

    def __call__(self):
        return self.comm.reductions - self.start - self.excluded

    def exclude(self, fn, *args):
        before = self.comm.reductions
        out = fn(*args)
        self.excluded += self.comm.reductions - before
        return out


def _residual(A, b, x):
    r = A.apply(x)
    r.aypx(-1.0, b)
    return r


def _true_rel(A, b, x, bnorm):
    return _residual(A, b, x).norm() / bnorm


def _start(name, A, P, b, x0, tol, maxit):
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxit < 0:
        raise ValueError("maxit must be non-negative")
    count = _Counter(b)
    x = b.zeros_like() if x0 is None else x0.copy()
    rep = SolverReport(name)
    bnorm = count.exclude(b.norm)
    if bnorm == 0.0:
        x.set_zero()
        rep.residual = rep.recurrence_residual = 0.0
        rep.converged = True
        return x, None, bnorm, rep, count
    r = _residual(A, b, x)
    rel = count.exclude(r.norm) / bnorm
    rep.residual = rep.recurrence_residual = rel
    rep.converged = rel <= tol
    return x, r, bnorm, rep, count


def _finish(rep, A, b, x, bnorm, count, tol):
    total = count()
    rep.residual = count.exclude(_true_rel, A, b, x, bnorm)
    rep.reductions = total
    rep.setup_reductions = count.excluded
    rep.converged = bool(rep.residual <= tol)
    return rep


def cg(A, P, b, x0=None, tol=1e-6, maxit=1000):
    """Preconditioned conjugate gradients.

    ``A`` and ``P`` must be symmetric positive definite.  Three reductions
    per iteration: ``(p, Ap)``, ``||r||`` and ``(r, z)``.
    """
    P = P or IdentityPreconditioner()
    x, r, bnorm, rep, count = _start("cg", A, P, b, x0, tol, maxit)
    if rep.converged:
        return x, rep
    z = P.apply(r)
    p = z.copy()
    rz = count.exclude(r.dot, z)
    for it in range(1, maxit + 1):
        c0 = count()
        q = A.apply(p)
        pq = p.dot(q)
        if pq == 0.0 or not math.isfinite(pq):
            rep.breakdown = True
            rep.reductions_per_iteration.append(count() - c0)
            break
        alpha = rz / pq
        x.axpy(alpha, p)
        r.axpy(-alpha, q)
        rel = r.norm() / bnorm
        rep.iterations = it
        rep.history.append(rel)
        rep.recurrence_residual = rel
        if rel <= tol and count.exclude(_true_rel, A, b, x, bnorm) <= tol:
            rep.reductions_per_iteration.append(count() - c0)
            break
        z = P.apply(r)
        rz_new = r.dot(z)
        rep.reductions_per_iteration.append(count() - c0)
        if rz == 0.0:
            rep.breakdown = True
            break
        beta = rz_new / rz
        rz = rz_new
        p.aypx(beta, z)
    return x, _finish(rep, A, b, x, bnorm, count, tol)


def bicgstab(A, P, b, x0=None, tol=1e-6, maxit=1000):
    """Right-preconditioned BiCGStab.

    Each iteration performs exactly five reductions, in order ``(r0, r)``,
    ``(r0, v)``, ``(t, s)``, ``(t, t)`` and ``||r||``.
    """
    P = P or IdentityPreconditioner()
    x, r, bnorm, rep, count = _start("bicgstab", A, P, b, x0, tol, maxit)
    if rep.converged:
        return x, rep
    r0 = r.copy()
    p = r.zeros_like()
    v = r.zeros_like()
    rho_old = alpha = omega = 1.0
    for it in range(1, maxit + 1):
        c0 = count()
        rho = r0.dot(r)
        if rho == 0.0 or omega == 0.0:
            rep.breakdown = True
            rep.reductions_per_iteration.append(count() - c0)
            break
        if it == 1:
            p.assign(r)
        else:
            beta = (rho / rho_old) * (alpha / omega)
            p.axpy(-omega, v)
            p.aypx(beta, r)
        phat = P.apply(p)
        v = A.apply(phat)
        r0v = r0.dot(v)
        if r0v == 0.0:
            rep.breakdown = True
            rep.reductions_per_iteration.append(count() - c0)
            break
        alpha = rho / r0v
        s = r.copy()
        s.axpy(-alpha, v)
        shat = P.apply(s)
        t = A.apply(shat)
        ts = t.dot(s)
        tt = t.dot(t)
        omega = ts / tt if tt != 0.0 else 0.0
        x.axpy(alpha, phat)
        x.axpy(omega, shat)
        r = s
        r.axpy(-omega, t)
        rel = r.norm() / bnorm
        rho_old = rho
        rep.iterations = it
        rep.history.append(rel)
        rep.recurrence_residual = rel
        rep.reductions_per_iteration.append(count() - c0)
        if rel <= tol and count.exclude(_true_rel, A, b, x, bnorm) <= tol:
            break
    return x, _finish(rep, A, b, x, bnorm, count, tol)


def gmres(A, P, b, x0=None, tol=1e-6, maxit=1000, restart=30):
    """Right-preconditioned restarted GMRES with modified Gram-Schmidt
    and Givens rotations.  Iteration ``j`` of a cycle costs ``j + 2``
    reductions."""
    P = P or IdentityPreconditioner()
    if restart < 1:
        raise ValueError("restart must be >= 1")
    x, r, bnorm, rep, count = _start("gmres", A, P, b, x0, tol, maxit)
    if rep.converged:
        return x, rep
    it = 0
    while it < maxit:
        beta = count.exclude(r.norm)
        V = [r]
        V[0].scale(1.0 / beta)
        Z = []
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        m = 0
        happy = False
        for j in range(restart):
            c0 = count()
            z = P.apply(V[j])
            w = A.apply(z)
            Z.append(z)
            for i in range(j + 1):
                H[i, j] = w.dot(V[i])
                w.axpy(-H[i, j], V[i])
            hn = w.norm()
            H[j + 1, j] = hn
            for i in range(j):
                h0, h1 = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * h0 + sn[i] * h1
                H[i + 1, j] = -sn[i] * h0 + cs[i] * h1
            rep.reductions_per_iteration.append(count() - c0)
            denom = math.hypot(H[j, j], hn)
            if denom == 0.0 or not math.isfinite(denom):
                rep.breakdown = True
                break
            cs[j], sn[j] = H[j, j] / denom, hn / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            m = j + 1
            rel = float(abs(g[j + 1]) / bnorm)
            rep.iterations = it
            rep.history.append(rel)
            rep.recurrence_residual = rel
            happy = hn == 0.0
            if rel <= tol or it >= maxit or happy:
                break
            w.scale(1.0 / hn)
            V.append(w)
        if m:
            y = _back_substitute(H, g, m)
            for i in range(m):
                x.axpy(y[i], Z[i])
        if rep.breakdown:
            break
        r = _residual(A, b, x)
        if rep.recurrence_residual <= tol or happy:
            true = count.exclude(r.norm) / bnorm
            if true <= tol:
                break
            if happy:
                # exact Krylov space exhausted without reaching tol: no progress possible
                rep.breakdown = True
                break
    return x, _finish(rep, A, b, x, bnorm, count, tol)


def _back_substitute(H, g, n):
    y = np.zeros(n)
    for i in range(n - 1, -1, -1):
        acc = g[i]
        for k in range(i + 1, n):
            acc -= H[i, k] * y[k]
        y[i] = acc / H[i, i]
    return y
