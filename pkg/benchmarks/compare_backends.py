"""Time the compiled and numpy column kernels on the same inputs.

Usage: python3 benchmarks/compare_backends.py [--mesh C48] [--nlayers 20] [--repeats 5]

Prints one row per kernel with the best-of-N time of each backend, the
speedup and whether the outputs agree bitwise.
"""
import argparse
import time

import numpy as np

from minipsy import _pykernels
from minipsy.demos import gid_noise
from minipsy.fields import make_function_space
from minipsy.kernels import available_backends, load_backend
from minipsy.mesh import extrude, parse_mesh_spec, partition


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cases(mesh):
    W2 = make_function_space(mesh, "W2")
    W3 = make_function_space(mesh, "W3")
    L = mesh.nlayers
    cells = np.arange(mesh.n_owned, dtype=np.int64)
    nbr, sign = mesh.local_neighbours(), mesh.local_edge_sign()
    s = gid_noise(W2.dof_gid, 1)
    op = np.ascontiguousarray(gid_noise(np.arange(mesh.ncells * L * 36), 2).reshape(mesh.ncells, L, 6, 6))
    rho_old = 1.0 + 0.5 * gid_noise(W3.dof_gid, 3)
    u = 0.1 * gid_noise(W2.dof_gid, 4)
    x = gid_noise(W3.dof_gid, 5)
    ncol = mesh.n_owned
    lo = np.full((ncol, L - 1), -1.0)
    di = np.full((ncol, L), 4.0)
    rhs = np.ascontiguousarray(x[: ncol * L].reshape(ncol, L))

    def mv(k):
        v = np.zeros(W2.undf)
        return lambda: k.matrix_vector(cells, L, v, W2.dofmap, s, W2.dofmap, op), v

    def adv(k):
        rho = np.zeros(W3.undf)
        return lambda: k.advect_upwind(cells, L, rho, W3.dofmap, rho_old, W3.dofmap, u, W2.dofmap,
                                       nbr, sign, 0.1), rho

    def helm(k):
        y = np.zeros(W3.undf)
        return lambda: k.helmholtz_apply(cells, L, y, x, W3.dofmap, nbr, 1.0, 1.0, 100.0), y

    def tri(k):
        out, work = np.empty_like(rhs), np.empty((ncol, L - 1))
        return lambda: k.tri_solve(lo, di, lo, rhs, out, work), out

    return {"matrix_vector": mv, "advect_upwind": adv, "helmholtz_apply": helm, "tri_solve": tri}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mesh", default="C48")
    ap.add_argument("--nlayers", type=int, default=20)
    ap.add_argument("--repeats", type=int, default=5)
    a = ap.parse_args()
    gm = parse_mesh_spec(a.mesh)
    mesh = extrude(gm, partition(gm, 1, 1), 0, a.nlayers)
    if "cython" not in available_backends():
        print("compiled kernels not built; only the numpy backend is available")
        return
    compiled = load_backend("cython")
    print(f"mesh {a.mesh}, {a.nlayers} layers, {mesh.n_owned} columns, best of {a.repeats}")
    print(f"{'kernel':<18}{'cython ms':>12}{'python ms':>12}{'speedup':>10}  bitwise")
    for name, make in cases(mesh).items():
        fc, outc = make(compiled)
        fp, outp = make(_pykernels)
        # matrix_vector accumulates: time on fresh zero output each run
        tc = best_of(lambda: (outc.fill(0.0), fc()), a.repeats)
        tp = best_of(lambda: (outp.fill(0.0), fp()), a.repeats)
        same = np.array_equal(outc.view(np.uint64), outp.view(np.uint64))
        print(f"{name:<18}{tc:>12.3f}{tp:>12.3f}{tp / tc:>10.1f}  {same}")


if __name__ == "__main__":
    main()
