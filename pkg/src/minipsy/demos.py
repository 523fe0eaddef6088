"""Ready-made runs used by the command line, the tests and the benchmarks.

Every demo builds its per-rank state in the constructor and does the
numerical work in :meth:`run`, so timings can exclude setup.  Initial data
is a function of global dof ids only, which makes results comparable
across partitions.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
import time

import numpy as np

from . import kernels
from .compiler import compile_plan, compile_program
from .dsl import parse_algorithm, parse_kernel_meta, validate
from .exchange import run_ranks
from .executor import build_contexts, demo_registry, run
from .fields import Field
from .solvers import FieldVector, bicgstab, cg, gmres
from .solvers.helmholtz import HelmholtzOperator, LinePreconditioner
from .solvers.multigrid import MultigridPreconditioner
from .solvers.schur import InnerSolver, MixedOperator, SchurOperator, SchurPreconditioner

__all__ = [
    "DEMOS",
    "DemoResult",
    "resource_text",
    "builtin_metas",
    "load_program",
    "gid_noise",
    "field_checksum",
    "MatVecDemo",
    "AdvectionDemo",
    "HelmholtzDemo",
    "MixedDemo",
    "make_demo",
]

SOLVERS = {"cg": cg, "gmres": gmres, "bicgstab": bicgstab}


# -- packaged sources ---------------------------------------------------------
def resource_text(name: str) -> str:
    return resources.files("minipsy").joinpath("programs", name).read_text()


def builtin_metas() -> dict:
    """Kernel metadata shipped with the package, by kernel name."""
    out = {}
    for entry in sorted(resources.files("minipsy").joinpath("programs").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".kmeta"):
            meta = parse_kernel_meta(entry.read_text())
            out[meta.name] = meta
    return out


def load_program(text: str, metas=None):
    metas = builtin_metas() if metas is None else metas
    return validate(parse_algorithm(text, metas), metas)


def recipe_source(recipe):
    """Recipe text from a packaged name ('openmp', 'redundant'), a path, or None."""
    if recipe is None or recipe == "" or recipe == "none":
        return None
    if "\n" in recipe:
        return recipe
    if "/" not in recipe and not recipe.endswith(".recipe"):
        return resource_text(recipe + ".recipe")
    with open(recipe) as fh:
        return fh.read()


# -- deterministic data ---------------------------------------------------------
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(x):
    """splitmix64 finaliser on uint64 arrays."""
    with np.errstate(over="ignore"):
        x = x + _GOLD
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def gid_noise(ids, seed: int = 0) -> np.ndarray:
    """Uniform values in [-1, 1) determined by integer ids and ``seed``."""
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(ids ^ _mix(np.full_like(ids, np.uint64(seed))))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53) * 2.0 - 1.0


def field_checksum(f: Field) -> float:
    """Sum of owned values in ascending global id order (partition invariant)."""
    return f.space.comm.allreduce_sums([(f.space.owned_gids(), f.owned_values())])[0]


def _cell_centres(gm) -> np.ndarray:
    if gm.kind == "cubed-sphere":
        c = gm.coords[gm.cell_vertices].mean(axis=1)
        return c / np.linalg.norm(c, axis=1)[:, None]
    return gm.cell_index[:, 1:3].astype(float) + 0.5


@dataclass
class DemoResult:
    demo: str
    rows: list = field(default_factory=list)        # one dict per step or solve
    checksums: dict = field(default_factory=dict)
    iterations: int | None = None
    residual: float | None = None
    converged: bool | None = None
    stats: Counter = field(default_factory=Counter)
    wall_ms: float = 0.0
    history: list = field(default_factory=list)


class _Demo:
    name = ""

    def __init__(self, mesh, nlayers: int, nranks: int = 1, threads: int = 1, seed: int = 0,
                 mode: str = "threads", backend=None, debug=None, max_depth: int = 1):
        self.gm = mesh
        self.nlayers = int(nlayers)
        self.nranks = int(nranks)
        self.threads = int(threads)
        self.seed = int(seed)
        self.mode = mode
        self.debug = debug
        self.max_depth = max_depth
        self.backend = kernels.load_backend(backend) if isinstance(backend, str) or backend is None else backend

    def _on_ranks(self, fn):
        if self.nranks == 1:
            return [fn(0)]
        return run_ranks(self.nranks, lambda r, _h: fn(r), self.ctxs[0].comm.harness)

    def run(self) -> DemoResult:
        t0 = time.perf_counter()
        res = self._run()
        res.wall_ms = (time.perf_counter() - t0) * 1e3
        for c in self.ctxs:
            res.stats.update(c.stats)
            res.stats["reductions"] += c.comm.reductions
            res.stats["comm_exchanges"] += c.comm.exchanges
        return res

    def close(self):
        for c in self.ctxs:
            c.close()


class MatVecDemo(_Demo):
    """Repeated ``v = mm * s`` with ``s <- v`` between steps."""

    name = "listing1"

    def __init__(self, mesh, nlayers, steps: int = 1, recipe=None, naive: bool = False, **kw):
        super().__init__(mesh, nlayers, **kw)
        self.steps = int(steps)
        self.resolved = load_program(resource_text("matvec.alg"))
        self.schedule = compile_program(self.resolved, self.max_depth, recipe_source(recipe), naive)
        seed = self.seed

        def field_init(name, space):
            if name == "s":
                return gid_noise(space.dof_gid, seed)
            return np.zeros(space.undf)

        def operator_init(name, to_sp, from_sp):
            gids = to_sp.mesh.cells
            L, nt, nf = to_sp.nlayers, to_sp.ndf, from_sp.ndf
            ids = (gids[:, None, None, None] * L + np.arange(L)[None, :, None, None]) * (nt * nf) \
                + (np.arange(nt)[:, None] * nf + np.arange(nf))[None, None]
            return (1.0 + gid_noise(ids, seed + 1)) / (2.0 * nf)

        self.ctxs = build_contexts(mesh, self.nranks, self.nlayers, self.resolved, self.max_depth,
                                   self.threads, mode=self.mode, debug=self.debug,
                                   field_init=field_init, operator_init=operator_init)
        reg = demo_registry(self.backend)
        self.plans = [compile_plan(self.schedule, reg, c.ensure_colouring()) for c in self.ctxs]

    def _run(self):
        res = DemoResult(self.name)

        def prog(r):
            ctx, plan = self.ctxs[r], self.plans[r]
            out = []
            for step in range(1, self.steps + 1):
                run(plan, ctx)
                out.append(ctx.checksum("v"))
                if step < self.steps:
                    ctx.fields["s"].assign(ctx.fields["v"])
            return out

        sums = self._on_ranks(prog)[0]
        for step, cs in enumerate(sums, 1):
            res.rows.append({"step": step, "field": "v", "checksum": cs})
        res.checksums["v"] = sums[-1] if sums else 0.0
        return res


def solid_body_velocity(u: Field, speed: float = 1.0, vertical: float = 0.0):
    """Divergence-free horizontal flux plus a uniform interior vertical flux.

    Planar meshes get a uniform flow ``speed * (1, 0.5)`` projected on the
    edge normals; the sphere gets the edge differences of the streamfunction
    ``speed * n * z`` (solid-body rotation about the z axis).
    """
    space = u.space
    mesh = space.mesh
    gm = mesh.global_mesh
    L = space.nlayers
    data = u.data
    for c in range(mesh.ncells):
        g = mesh.cells[c]
        for e in range(4):
            edge = gm.cell_edges[g, e]
            if gm.edge_cells[edge, 0] != g:
                continue
            if gm.kind == "cubed-sphere":
                n = gm.shape[0]
                va, vb = gm.cell_vertices[g, e], gm.cell_vertices[g, (e + 1) % 4]
                flux = speed * n * (gm.coords[vb, 2] - gm.coords[va, 2])
            else:
                normal = ((0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0))[e]
                flux = speed * (normal[0] + 0.5 * normal[1])
            base = space.dofmap[c, e]
            data[base:base + L] = flux
        bot = space.dofmap[c, 4]
        data[bot + 1:bot + L] = vertical
    u.set_clean(u.max_depth)
    return u


class AdvectionDemo(_Demo):
    """Upwind transport of a smooth bump; rows report mass and its drift."""

    name = "advection"

    def __init__(self, mesh, nlayers, steps: int = 100, dt: float | None = None, recipe=None,
                 speed: float = 1.0, **kw):
        super().__init__(mesh, nlayers, **kw)
        self.steps = int(steps)
        self.resolved = load_program(resource_text("advection.alg"))
        self.schedule = compile_program(self.resolved, self.max_depth, recipe_source(recipe))
        centres = _cell_centres(mesh)
        if mesh.kind == "cubed-sphere":
            d2 = ((centres - np.array([1.0, 0.0, 0.0])) ** 2).sum(axis=1)
            width2 = 0.25
        else:
            nx, ny = mesh.shape
            d2 = ((centres - np.array([nx / 4, ny / 2])) ** 2).sum(axis=1)
            width2 = (max(nx, ny) / 8) ** 2
        bump = 1.0 + np.exp(-d2 / width2)
        L = self.nlayers

        vert = 1.0 + 0.1 * np.cos(np.pi * (np.arange(L) + 0.5) / L)

        def field_init(name, space):
            data = np.zeros(space.undf)
            if name != "u":
                idx = space.dofmap[:, 0, None] + np.arange(L)
                data[idx] = bump[space.mesh.cells][:, None] * vert
            return data

        self.ctxs = build_contexts(mesh, self.nranks, self.nlayers, self.resolved, self.max_depth,
                                   self.threads, mode=self.mode, debug=self.debug, field_init=field_init)
        for c in self.ctxs:
            solid_body_velocity(c.fields["u"], speed, vertical=0.05 * speed)
            if dt is not None:
                c.scalars["dt"] = float(dt)
        reg = demo_registry(self.backend)
        self.plans = [compile_plan(self.schedule, reg, c.ensure_colouring()) for c in self.ctxs]

    def _run(self):
        res = DemoResult(self.name)

        def prog(r):
            ctx, plan = self.ctxs[r], self.plans[r]
            m0 = ctx.checksum("rho")
            out = []
            for step in range(1, self.steps + 1):
                run(plan, ctx)
                out.append(ctx.checksum("rho"))
            return m0, out

        m0, masses = self._on_ranks(prog)[0]
        for step, m in enumerate(masses, 1):
            res.rows.append({"step": step, "field": "rho", "checksum": m,
                             "mass_drift": abs(m - m0) / abs(m0)})
        res.checksums["rho"] = masses[-1] if masses else m0
        res.checksums["mass0"] = m0
        return res


def _solve(method, A, P, b, tol, maxit, restart):
    fn = SOLVERS[method]
    if method == "gmres":
        return fn(A, P, b, tol=tol, maxit=maxit, restart=restart)
    return fn(A, P, b, tol=tol, maxit=maxit)


class HelmholtzDemo(_Demo):
    """One solve of ``(lam - Dh - gamma Dv) x = b`` with ``b`` from gid noise."""

    name = "helmholtz"

    def __init__(self, mesh, nlayers, lam: float = 1.0, gamma: float = 1e4, method: str = "cg",
                 precond: str = "line", tol: float = 1e-6, maxit: int = 1000, restart: int = 30,
                 levels: int = 3, **kw):
        super().__init__(mesh, nlayers, **kw)
        if method not in SOLVERS:
            raise ValueError(f"unknown solver {method!r}; choose from {sorted(SOLVERS)}")
        if precond not in ("none", "line", "mg"):
            raise ValueError(f"unknown preconditioner {precond!r}; choose none, line or mg")
        if precond == "mg" and self.nranks > 1:
            raise ValueError("the multigrid preconditioner runs on one rank only")
        self.method, self.precond = method, precond
        self.tol, self.maxit, self.restart = tol, maxit, restart
        self.ctxs = build_contexts(mesh, self.nranks, self.nlayers, max_depth=self.max_depth,
                                   threads=self.threads, mode=self.mode, kinds=("W3",), debug=self.debug)
        self.ops, self.pcs, self.rhs = [], [], []
        for c in self.ctxs:
            V = c.space("W3")
            A = HelmholtzOperator(V, lam, gamma, threads=self.threads, backend=self.backend)
            if precond == "line":
                P = LinePreconditioner(A)
            elif precond == "mg":
                P = MultigridPreconditioner(A, levels)
            else:
                P = None
            self.ops.append(A)
            self.pcs.append(P)
            self.rhs.append(Field(V, gid_noise(V.dof_gid, self.seed), "b"))

    def _run(self):
        res = DemoResult(self.name)

        def prog(r):
            x, rep = _solve(self.method, self.ops[r], self.pcs[r], self.rhs[r], self.tol, self.maxit,
                            self.restart)
            return rep, field_checksum(x)

        rep, cs = self._on_ranks(prog)[0]
        self.report = rep
        res.iterations, res.residual, res.converged = rep.iterations, rep.residual, rep.converged
        res.history = list(rep.history)
        res.checksums["x"] = cs
        res.rows.append({"step": 1, "field": "x", "checksum": cs, "iterations": rep.iterations,
                         "residual": rep.residual, "converged": rep.converged})
        return res

    def close(self):
        for A in self.ops:
            A.close()
        super().close()


class MixedDemo(_Demo):
    """Outer GMRES on the reduced mixed system with the Schur preconditioner."""

    name = "mixed-solve"

    def __init__(self, mesh, nlayers, lam: float = 1.0, tau: float = 1.0, eps: float = 0.1,
                 method: str = "gmres", precond: str = "schur", tol: float = 1e-6, maxit: int = 500,
                 restart: int = 30, inner_tol: float = 1e-6, inner_maxit: int = 500, **kw):
        super().__init__(mesh, nlayers, **kw)
        if method not in SOLVERS:
            raise ValueError(f"unknown solver {method!r}; choose from {sorted(SOLVERS)}")
        if precond not in ("none", "schur"):
            raise ValueError(f"unknown preconditioner {precond!r} for the mixed system; choose none or schur")
        self.method, self.tol, self.maxit, self.restart = method, tol, maxit, restart
        self.ctxs = build_contexts(mesh, self.nranks, self.nlayers, max_depth=self.max_depth,
                                   threads=self.threads, mode=self.mode, kinds=("W2", "W3"),
                                   debug=self.debug)
        self.systems, self.pcs, self.rhs = [], [], []
        for c in self.ctxs:
            U, Pspace = c.space("W2"), c.space("W3")
            A = MixedOperator(U, Pspace, lam=lam, tau=tau, eps=eps)
            if precond == "schur":
                S = SchurOperator(A)
                P = SchurPreconditioner(A, InnerSolver(S, LinePreconditioner(S), cg, inner_tol, inner_maxit))
            else:
                P = None
            f = Field(U, gid_noise(U.dof_gid, self.seed), "f")
            g = Field(Pspace, gid_noise(Pspace.dof_gid, self.seed + 7), "g")
            self.systems.append(A)
            self.pcs.append(P)
            self.rhs.append(FieldVector([f, g], ["u", "p"]))

    def _run(self):
        res = DemoResult(self.name)

        def prog(r):
            x, rep = _solve(self.method, self.systems[r], self.pcs[r], self.rhs[r], self.tol,
                            self.maxit, self.restart)
            fails = self.pcs[r].failures if self.pcs[r] is not None else 0
            return rep, field_checksum(x[0]), field_checksum(x[1]), fails

        rep, cu, cp, fails = self._on_ranks(prog)[0]
        self.report = rep
        res.iterations, res.residual, res.converged = rep.iterations, rep.residual, rep.converged
        res.history = list(rep.history)
        res.checksums.update({"u": cu, "p": cp})
        res.stats["inner_failures"] = fails
        for name, cs in (("u", cu), ("p", cp)):
            res.rows.append({"step": 1, "field": name, "checksum": cs, "iterations": rep.iterations,
                             "residual": rep.residual, "converged": rep.converged})
        return res


DEMOS = {
    "listing1": MatVecDemo,
    "advection": AdvectionDemo,
    "helmholtz": HelmholtzDemo,
    "mixed-solve": MixedDemo,
}


def make_demo(name: str, mesh, nlayers: int, **kw):
    try:
        cls = DEMOS[name]
    except KeyError:
        raise ValueError(f"unknown demo {name!r}; choose from {', '.join(DEMOS)}") from None
    return cls(mesh, nlayers, **kw)

