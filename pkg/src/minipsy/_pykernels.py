"""Pure numpy column kernels.

Vectorised over cells and layers, but every dof value is produced by the
same sequence of floating-point operations as the compiled kernels, and
accumulations into shared dofs happen in (cell, layer, df) order.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def matrix_vector(cells, nlayers, v, vmap, s, smap, op):
    if len(cells) == 0:
        return
    ks = np.arange(nlayers)
    sv = s[smap[cells][:, None, :] + ks[None, :, None]]       # (n, L, nfrom)
    o = op[cells]                                             # (n, L, nto, nfrom)
    t = o[..., 0] * sv[:, :, None, 0]
    for j in range(1, o.shape[3]):
        t = t + o[..., j] * sv[:, :, None, j]
    vidx = vmap[cells][:, None, :] + ks[None, :, None]        # (n, L, nto)
    np.add.at(v, vidx.ravel(), t.ravel())


def enforce_bc(cells, nlayers, v, vmap, mask):
    if len(cells) == 0:
        return
    bases = vmap[cells][mask[cells].astype(bool)]
    v[(bases[:, None] + np.arange(nlayers)).ravel()] = 0.0


def advect_upwind(cells, nlayers, rho, rmap, rho_old, omap, u, umap, nbr, sign, dt):
    if len(cells) == 0:
        return
    ks = np.arange(nlayers)
    own = rho_old[omap[cells, 0][:, None] + ks]
    total = np.zeros_like(own)
    for e in range(4):
        m = nbr[cells, e]
        ok = (m >= 0)[:, None]
        f = u[umap[cells, e][:, None] + ks] * sign[cells, e][:, None]
        other = rho_old[omap[np.where(m >= 0, m, 0), 0][:, None] + ks]
        q = np.where(f > 0.0, own, other)
        total = np.where(ok, total + f * q, total)
    if nlayers > 1:
        below = np.concatenate([own[:, :1], own[:, :-1]], axis=1)
        above = np.concatenate([own[:, 1:], own[:, -1:]], axis=1)
        f = -u[umap[cells, 4][:, None] + ks]
        q = np.where(f > 0.0, own, below)
        total = np.where(ks > 0, total + f * q, total)
        f = u[umap[cells, 5][:, None] + ks]
        q = np.where(f > 0.0, own, above)
        total = np.where(ks < nlayers - 1, total + f * q, total)
    rho[rmap[cells, 0][:, None] + ks] = own - dt * total


def helmholtz_apply(cells, nlayers, y, x, xmap, nbr, lam, ch, gamma):
    if len(cells) == 0:
        return
    ks = np.arange(nlayers)
    xc = x[xmap[cells, 0][:, None] + ks]
    t = lam * xc
    for e in range(4):
        m = nbr[cells, e]
        xn = x[xmap[np.where(m >= 0, m, 0), 0][:, None] + ks]
        t = np.where((m >= 0)[:, None], t + ch * (xc - xn), t)
    if nlayers > 1:
        below = np.concatenate([xc[:, :1], xc[:, :-1]], axis=1)
        above = np.concatenate([xc[:, 1:], xc[:, -1:]], axis=1)
        t = np.where(ks > 0, t + gamma * (xc - below), t)
        t = np.where(ks < nlayers - 1, t + gamma * (xc - above), t)
    y[xmap[cells, 0][:, None] + ks] = t


def tri_apply(lo, di, up, x, y):
    t = di * x
    if di.shape[1] > 1:
        t[:, 1:] = t[:, 1:] + lo * x[:, :-1]
        t[:, :-1] = t[:, :-1] + up * x[:, 1:]
    y[...] = t


def tri_solve(lo, di, up, rhs, x, work):
    """Thomas algorithm per column; returns the first column with a zero pivot or -1."""
    ncol, L = di.shape
    bad = np.zeros(ncol, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        piv = di[:, 0].copy()
        bad |= piv == 0.0
        x[:, 0] = rhs[:, 0] / piv
        for k in range(1, L):
            work[:, k - 1] = up[:, k - 1] / piv
            piv = di[:, k] - lo[:, k - 1] * work[:, k - 1]
            bad |= piv == 0.0
            x[:, k] = (rhs[:, k] - lo[:, k - 1] * x[:, k - 1]) / piv
        for k in range(L - 2, -1, -1):
            x[:, k] = x[:, k] - work[:, k] * x[:, k + 1]
    hit = np.flatnonzero(bad)
    return int(hit[0]) if len(hit) else -1
