import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minipsy.fields import (SPACE_KINDS, Field, FieldError, LocalOperator, dof_index, make_field,
                            make_function_space, set_clean, set_dirty)
from minipsy.mesh import build_cubed_sphere, build_planar, partition

from conftest import local_meshes, serial_mesh, serial_space


def torus_undf(kind, nx, ny, L):
    f = nx * ny
    return {"W0": f * (L + 1), "W1": 2 * f * (L + 1) + f * L, "W2": 2 * f * L + f * (L + 1),
            "W3": f * L, "Wtheta": f * (L + 1)}[kind]


def sphere_undf(kind, n, L):
    f, e, v = 6 * n * n, 12 * n * n, 6 * n * n + 2
    return {"W0": v * (L + 1), "W1": e * (L + 1) + v * L, "W2": e * L + f * (L + 1),
            "W3": f * L, "Wtheta": f * (L + 1)}[kind]


NDF = {"W0": 8, "W1": 12, "W2": 6, "W3": 1, "Wtheta": 2}


def test_space_examples(torus4):
    w3 = serial_space(torus4, "W3", 10)
    assert (w3.undf, w3.ndf) == (160, 1)
    assert serial_space(torus4, "Wtheta", 10).undf == 176
    assert serial_space(torus4, "W2", 10).undf == 496


@pytest.mark.parametrize("kind", SPACE_KINDS)
@pytest.mark.parametrize("nx,ny,L", [(3, 3, 1), (4, 5, 3), (6, 4, 7)])
def test_undf_torus(kind, nx, ny, L):
    sp = serial_space(build_planar(nx, ny), kind, L)
    assert sp.ndf == NDF[kind]
    assert sp.undf == torus_undf(kind, nx, ny, L) == sp.nglobal


@pytest.mark.parametrize("kind", SPACE_KINDS)
@pytest.mark.parametrize("n,L", [(1, 2), (2, 4), (3, 1)])
def test_undf_sphere(kind, n, L):
    sp = serial_space(build_cubed_sphere(n), kind, L)
    assert sp.undf == sphere_undf(kind, n, L)


@pytest.mark.parametrize("kind", SPACE_KINDS)
def test_indices_cover_and_contiguous(kind):
    sp = serial_space(build_cubed_sphere(2), kind, 3)
    L = sp.nlayers
    seen = set()
    for col in range(sp.mesh.ncells):
        for df in range(sp.ndf):
            kmax = sp.df_extent[df] - sp.df_top[df]
            idx = [dof_index(sp, df, col, k) for k in range(kmax)]
            assert idx == list(range(idx[0], idx[0] + kmax))
        for k in range(L):
            # within one 3D cell every df is a different dof
            cell = [int(sp.dofmap[col, df]) + k for df in range(sp.ndf)]
            assert len(cell) == len(set(cell))
            seen.update(cell)
    assert seen == set(range(sp.undf))


def test_shared_vertex_dof_consistency():
    gm = build_cubed_sphere(2)
    sp = serial_space(gm, "W0", 4)
    for v, cells in enumerate(gm.vertex_cells):
        bases = set()
        for c in cells:
            slot = int(np.flatnonzero(gm.cell_vertices[c] == v)[0])
            bases.add(dof_index(sp, slot, int(c), 2))
            # top-of-cell vertex df sits one level above the bottom one
            assert dof_index(sp, slot + 4, int(c), 2) == dof_index(sp, slot, int(c), 3)
        assert len(bases) == 1


def test_shared_side_face_consistency():
    gm = build_planar(4, 4)
    sp = serial_space(gm, "W2", 3)
    for e in range(gm.nedges):
        a, b = gm.edge_cells[e]
        sa = int(np.flatnonzero(gm.cell_edges[a] == e)[0])
        sb = int(np.flatnonzero(gm.cell_edges[b] == e)[0])
        assert sp.dofmap[a, sa] == sp.dofmap[b, sb]


def test_dof_index_direct():
    sp = serial_space(build_planar(3, 3), "W3", 5)
    col = 4
    b = int(sp.dofmap[col, 0])
    assert dof_index(sp, 0, col, 0) == b
    assert dof_index(sp, 0, col, 3) == b + 3


@pytest.mark.parametrize("args", [(1, 0, 0), (-1, 0, 0), (0, 9, 0), (0, 0, 5), (0, 0, -1)])
def test_dof_index_range(args):
    sp = serial_space(build_planar(3, 3), "W3", 5)
    with pytest.raises(FieldError):
        dof_index(sp, *args)


@pytest.mark.parametrize("kind", SPACE_KINDS)
@pytest.mark.parametrize("nranks", [2, 4, 6])
def test_cross_rank_ownership(kind, nranks):
    gm = build_cubed_sphere(2)
    part = partition(gm, nranks, 2)
    serial = serial_space(gm, kind, 2)
    # ownership rule: the owner of the lowest-id cell touching the dof
    min_cell = np.full(serial.nglobal, gm.ncells)
    for c in range(gm.ncells):
        for df in range(serial.ndf):
            kmax = serial.df_extent[df] - serial.df_top[df]
            g = serial.dof_gid[serial.dofmap[c, df] + np.arange(kmax)]
            min_cell[g] = np.minimum(min_cell[g], c)
    owners = {}
    spaces = [make_function_space(m, kind) for m in local_meshes(gm, nranks, 2, 2)]
    for r, sp in enumerate(spaces):
        assert np.all(sp.dof_owner[: sp.last_owned] == r)
        assert np.all(sp.dof_owner[sp.last_owned:] != r)
        assert np.array_equal(sp.dof_owner, part.owner[min_cell[sp.dof_gid]])
        for g in sp.owned_gids().tolist():
            assert g not in owners
            owners[g] = r
        # halo groups follow the owned prefix, grouped by depth
        assert sp.last_owned <= sp.halo_end[0] <= sp.halo_end[1] <= sp.halo_end[2] == sp.undf
    assert sorted(owners) == list(range(serial.nglobal))
    for sp in spaces:
        assert all(g in owners for g in sp.dof_gid.tolist())


def test_make_field_examples(torus4):
    sp = serial_space(torus4, "W2", 3)
    z = make_field(sp, 0.0)
    assert np.all(z.data == 0.0) and z.clean_halo_depth == z.max_depth
    f = make_field(sp, 1.5)
    assert np.all(f.data == 1.5)
    g = make_field(sp, 1.5)
    g.data[0] = 7.0
    assert f.data[0] == 1.5


def test_cleanliness_transitions():
    m = local_meshes(build_planar(6, 6), 2, 2, 2)[0]
    f = make_field(make_function_space(m, "W3"))
    set_clean(f, 2)
    set_dirty(f)
    assert f.clean_halo_depth == 0
    f.set_dirty()
    f.set_clean(1)
    assert f.clean_halo_depth == 1
    f.set_clean(2)
    assert f.clean_halo_depth == 2
    f.set_clean(1)                       # never lowers
    assert f.clean_halo_depth == 2
    for bad in (-1, 3):
        with pytest.raises(FieldError):
            f.set_clean(bad)


def test_field_linear_algebra(rng):
    sp = serial_space(build_planar(3, 4), "W0", 2)
    x = Field(sp, rng.standard_normal(sp.undf))
    y = Field(sp, rng.standard_normal(sp.undf))
    assert x.dot(y) == y.dot(x)
    assert x.norm() ** 2 == pytest.approx(x.dot(x), rel=1e-15)
    z = x.copy()
    z.axpy(0.0, y)
    assert np.array_equal(z.data, x.data)
    z.aypx(2.0, y)
    assert np.allclose(z.data, 2 * x.data + y.data)
    with pytest.raises(FieldError):
        Field(sp, np.zeros(sp.undf - 1))


def test_local_operator_shapes():
    m = serial_mesh(build_planar(3, 3), 4)
    w2, w3 = make_function_space(m, "W2"), make_function_space(m, "W3")
    op = LocalOperator(w2, w3)
    assert op.local.shape == (9, 4, 1, 6)
    ident = LocalOperator.identity(w2)
    assert np.array_equal(ident.local[5, 2], np.eye(6))
    with pytest.raises(FieldError):
        LocalOperator(w2, w3, np.zeros((9, 4, 6, 1)))
    other = make_function_space(serial_mesh(build_planar(3, 3), 4), "W3")
    with pytest.raises(FieldError):
        LocalOperator(w2, other)


@given(st.sampled_from(SPACE_KINDS), st.integers(3, 6), st.integers(3, 6), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_undf_property(kind, nx, ny, L):
    assert serial_space(build_planar(nx, ny), kind, L).undf == torus_undf(kind, nx, ny, L)
