"""The compiled and numpy kernel backends must agree bitwise."""
import numpy as np
import pytest

from minipsy import _pykernels
from minipsy.executor import build_contexts
from minipsy.kernels import available_backends, load_backend
from minipsy.mesh import build_cubed_sphere, build_planar

pytestmark = pytest.mark.skipif("cython" not in available_backends(), reason="compiled kernels not built")

L = 5


@pytest.fixture(scope="module")
def ck():
    return load_backend("cython")


@pytest.fixture(scope="module", params=["C3", "open"])
def setup(request):
    gm = build_cubed_sphere(3) if request.param == "C3" else build_planar(5, 4, False, False)
    (ctx,) = build_contexts(gm, 1, L, kinds=("W2", "W3"))
    local = ctx.mesh
    return dict(w2=ctx.space("W2"), w3=ctx.space("W3"), nbr=np.ascontiguousarray(local.local_neighbours(),
                np.int64), sign=np.ascontiguousarray(local.local_edge_sign(), np.int64),
                cells=np.arange(local.n_owned, dtype=np.int64))


def both(ck, name, mutate, *args):
    """Run ``name`` on both backends with private copies of the mutable arguments."""
    outs = []
    for mod in (ck, _pykernels):
        a = [x.copy() if i in mutate else x for i, x in enumerate(args)]
        r = getattr(mod, name)(*a)
        outs.append(([a[i] for i in mutate], r))
    return outs


def test_selection():
    assert load_backend("python") is _pykernels
    assert load_backend("python").NAME == "python"


def test_matrix_vector(ck, setup, rng):
    w2 = setup["w2"]
    cells = setup["cells"][::-1].copy()       # order matters for shared dofs
    op = rng.standard_normal((w2.mesh.ncells, L, 6, 6))
    v, s = rng.standard_normal(w2.undf), rng.standard_normal(w2.undf)
    (a, _), (b, _) = both(ck, "matrix_vector", {2}, cells, L, v, w2.dofmap, s, w2.dofmap, op)
    assert np.array_equal(a[0], b[0])


def test_enforce_bc(ck, setup, rng):
    w2 = setup["w2"]
    mask = np.ascontiguousarray(w2.boundary, np.uint8)
    v = rng.standard_normal(w2.undf)
    (a, _), (b, _) = both(ck, "enforce_bc", {2}, setup["cells"], L, v, w2.dofmap, mask)
    assert np.array_equal(a[0], b[0])


def test_advect_upwind(ck, setup, rng):
    w2, w3 = setup["w2"], setup["w3"]
    rho_old = rng.random(w3.undf) + 1.0
    u = rng.standard_normal(w2.undf) * 0.1
    rho = np.zeros(w3.undf)
    (a, _), (b, _) = both(ck, "advect_upwind", {2}, setup["cells"], L, rho, w3.dofmap, rho_old, w3.dofmap,
                          u, w2.dofmap, setup["nbr"], setup["sign"], 0.3)
    assert np.array_equal(a[0], b[0])


def test_helmholtz_apply(ck, setup, rng):
    w3 = setup["w3"]
    x = rng.standard_normal(w3.undf)
    y = np.zeros(w3.undf)
    (a, _), (b, _) = both(ck, "helmholtz_apply", {2}, setup["cells"], L, y, x, w3.dofmap, setup["nbr"],
                          2.0, 0.7, 1.3)
    assert np.array_equal(a[0], b[0])


@pytest.mark.parametrize("nl", [1, 2, 7])
def test_tri_apply_and_solve(ck, rng, nl):
    ncol = 11
    lo, up = rng.standard_normal((ncol, nl - 1)), rng.standard_normal((ncol, nl - 1))
    di = rng.standard_normal((ncol, nl)) + 5.0
    x = rng.standard_normal((ncol, nl))
    (a, _), (b, _) = both(ck, "tri_apply", {4}, lo, di, up, x, np.zeros((ncol, nl)))
    assert np.array_equal(a[0], b[0])
    (a, ra), (b, rb) = both(ck, "tri_solve", {4, 5}, lo, di, up, x, np.zeros((ncol, nl)),
                            np.zeros((ncol, max(nl - 1, 1))))
    assert ra == rb == -1
    assert np.array_equal(a[0], b[0])


def test_tri_solve_zero_pivot(ck):
    di = np.ones((4, 3))
    di[2, 0] = 0.0
    lo = up = np.zeros((4, 2))
    out = [mod.tri_solve(lo, di, up, np.ones((4, 3)), np.zeros((4, 3)), np.zeros((4, 2)))
           for mod in (ck, _pykernels)]
    assert out == [2, 2]
