# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled column kernels.

Every routine mirrors the arithmetic order of its counterpart in
``_pykernels`` exactly, so the two backends agree bitwise.  All loops run
without the GIL so threaded loops over disjoint cell chunks scale.
"""
from libc.stdint cimport int64_t, uint8_t

NAME = "cython"


def matrix_vector(const int64_t[::1] cells, int nlayers, double[::1] v,
                  const int64_t[:, ::1] vmap, const double[::1] s,
                  const int64_t[:, ::1] smap, const double[:, :, :, ::1] op):
    cdef Py_ssize_t n = cells.shape[0], nto = op.shape[2], nfrom = op.shape[3]
    cdef Py_ssize_t ic, k, i, j, c
    cdef double t
    with nogil:
        for ic in range(n):
            c = cells[ic]
            for k in range(nlayers):
                for i in range(nto):
                    t = op[c, k, i, 0] * s[smap[c, 0] + k]
                    for j in range(1, nfrom):
                        t = t + op[c, k, i, j] * s[smap[c, j] + k]
                    v[vmap[c, i] + k] = v[vmap[c, i] + k] + t


def enforce_bc(const int64_t[::1] cells, int nlayers, double[::1] v,
               const int64_t[:, ::1] vmap, const uint8_t[:, ::1] mask):
    cdef Py_ssize_t n = cells.shape[0], ndf = vmap.shape[1]
    cdef Py_ssize_t ic, k, d, c
    with nogil:
        for ic in range(n):
            c = cells[ic]
            for d in range(ndf):
                if mask[c, d]:
                    for k in range(nlayers):
                        v[vmap[c, d] + k] = 0.0


def advect_upwind(const int64_t[::1] cells, int nlayers, double[::1] rho,
                  const int64_t[:, ::1] rmap, const double[::1] rho_old,
                  const int64_t[:, ::1] omap, const double[::1] u,
                  const int64_t[:, ::1] umap, const int64_t[:, ::1] nbr,
                  const int64_t[:, ::1] sign, double dt):
    cdef Py_ssize_t n = cells.shape[0]
    cdef Py_ssize_t ic, k, e, c, m
    cdef double f, q, total
    with nogil:
        for ic in range(n):
            c = cells[ic]
            for k in range(nlayers):
                total = 0.0
                for e in range(4):
                    m = nbr[c, e]
                    if m < 0:
                        continue
                    f = u[umap[c, e] + k] * sign[c, e]
                    if f > 0.0:
                        q = rho_old[omap[c, 0] + k]
                    else:
                        q = rho_old[omap[m, 0] + k]
                    total = total + f * q
                if k > 0:
                    f = -u[umap[c, 4] + k]
                    if f > 0.0:
                        q = rho_old[omap[c, 0] + k]
                    else:
                        q = rho_old[omap[c, 0] + k - 1]
                    total = total + f * q
                if k < nlayers - 1:
                    f = u[umap[c, 5] + k]
                    if f > 0.0:
                        q = rho_old[omap[c, 0] + k]
                    else:
                        q = rho_old[omap[c, 0] + k + 1]
                    total = total + f * q
                rho[rmap[c, 0] + k] = rho_old[omap[c, 0] + k] - dt * total


def helmholtz_apply(const int64_t[::1] cells, int nlayers, double[::1] y,
                    const double[::1] x, const int64_t[:, ::1] xmap,
                    const int64_t[:, ::1] nbr, double lam, double ch, double gamma):
    cdef Py_ssize_t n = cells.shape[0]
    cdef Py_ssize_t ic, k, e, c, m, b
    cdef double t, xc
    with nogil:
        for ic in range(n):
            c = cells[ic]
            b = xmap[c, 0]
            for k in range(nlayers):
                xc = x[b + k]
                t = lam * xc
                for e in range(4):
                    m = nbr[c, e]
                    if m >= 0:
                        t = t + ch * (xc - x[xmap[m, 0] + k])
                if k > 0:
                    t = t + gamma * (xc - x[b + k - 1])
                if k < nlayers - 1:
                    t = t + gamma * (xc - x[b + k + 1])
                y[b + k] = t


def tri_apply(const double[:, ::1] lo, const double[:, ::1] di, const double[:, ::1] up,
              const double[:, ::1] x, double[:, ::1] y):
    cdef Py_ssize_t ncol = di.shape[0], L = di.shape[1]
    cdef Py_ssize_t col, k
    cdef double t
    with nogil:
        for col in range(ncol):
            for k in range(L):
                t = di[col, k] * x[col, k]
                if k > 0:
                    t = t + lo[col, k - 1] * x[col, k - 1]
                if k < L - 1:
                    t = t + up[col, k] * x[col, k + 1]
                y[col, k] = t


def tri_solve(const double[:, ::1] lo, const double[:, ::1] di, const double[:, ::1] up,
              const double[:, ::1] rhs, double[:, ::1] x, double[:, ::1] work):
    """Thomas algorithm per column; returns the first column with a zero pivot or -1."""
    cdef Py_ssize_t ncol = di.shape[0], L = di.shape[1]
    cdef Py_ssize_t col, k
    cdef double piv
    cdef Py_ssize_t bad = -1
    with nogil:
        for col in range(ncol):
            piv = di[col, 0]
            if piv == 0.0:
                bad = col
                break
            x[col, 0] = rhs[col, 0] / piv
            for k in range(1, L):
                work[col, k - 1] = up[col, k - 1] / piv
                piv = di[col, k] - lo[col, k - 1] * work[col, k - 1]
                if piv == 0.0:
                    bad = col
                    break
                x[col, k] = (rhs[col, k] - lo[col, k - 1] * x[col, k - 1]) / piv
            if bad >= 0:
                break
            for k in range(L - 2, -1, -1):
                x[col, k] = x[col, k] - work[col, k] * x[col, k + 1]
    return bad
