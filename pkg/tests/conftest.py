import numpy as np
import pytest

from minipsy.compiler import compile_plan, compile_program
from minipsy.demos import builtin_metas, gid_noise, load_program
from minipsy.exchange import run_ranks
from minipsy.executor import build_contexts, demo_registry, run
from minipsy.fields import make_function_space
from minipsy.mesh import build_cubed_sphere, build_planar, extrude, partition


def serial_mesh(gm, nlayers=1, depth=1):
    return extrude(gm, partition(gm, 1, depth), 0, nlayers)


def local_meshes(gm, nranks, nlayers=1, depth=1):
    part = partition(gm, nranks, depth)
    return [extrude(gm, part, r, nlayers) for r in range(nranks)]


def serial_space(gm, kind, nlayers=1, depth=1):
    return make_function_space(serial_mesh(gm, nlayers, depth), kind)


def shares_vertex_pairs(gm, cells_a, cells_b=None):
    """Brute-force list of cell pairs sharing a vertex (independent of the mesh tables)."""
    verts = [set(map(int, gm.cell_vertices[c])) for c in range(gm.ncells)]
    out = []
    cells_b = cells_a if cells_b is None else cells_b
    for a in cells_a:
        for b in cells_b:
            if a < b and verts[a] & verts[b]:
                out.append((a, b))
    return out


def execute(text, gm, nranks=1, nlayers=3, recipe=None, threads=1, field_init=None, operator_init=None,
            registry=None, metas=None, debug=False, max_depth=1, naive=False, schedule=None):
    """Compile ``text`` and run it once on ``nranks`` ranks; returns the contexts."""
    metas = metas or builtin_metas()
    resolved = load_program(text, metas)
    sched = schedule or compile_program(resolved, max_depth, recipe, naive)
    ctxs = build_contexts(gm, nranks, nlayers, resolved, max_depth, threads, debug=debug,
                          field_init=field_init, operator_init=operator_init)
    reg = registry or demo_registry()
    plans = [compile_plan(sched, reg, c.ensure_colouring()) for c in ctxs]
    if nranks == 1:
        run(plans[0], ctxs[0])
    else:
        run_ranks(nranks, lambda r, h: run(plans[r], ctxs[r]), ctxs[0].comm.harness)
    return ctxs


def noise_init(seed=0):
    return lambda name, sp: gid_noise(sp.dof_gid, seed + sum(map(ord, name)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def torus4():
    return build_planar(4, 4)


@pytest.fixture(scope="session")
def c2():
    return build_cubed_sphere(2)


# acceptance verdicts, repeated as one block at the end of the run
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
