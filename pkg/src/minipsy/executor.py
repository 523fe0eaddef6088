"""Plan execution: kernel registry, per-rank contexts, built-ins, threading, debug checks.

Kernel callbacks are batched over cells: ``code(cells, nlayers, *args)``
where ``cells`` is an int64 array of local cell indices, field arguments
arrive as :class:`~minipsy.fields.Field`, operators as
:class:`~minipsy.fields.LocalOperator` and scalars as floats.  A callback may
only touch dofs in the footprints of the cells it is given.
"""
from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import os

import numpy as np

from . import kernels as _kernels
from .compiler import ExecutablePlan, LoopNode, required_depths
from .exchange import RankComm, RankHarness, SerialComm, build_routing, run_ranks
from .fields import Field, LocalOperator, make_function_space
from .mesh import colour as _colour, extrude, partition

__all__ = [
    "RegistryError",
    "ExecutionError",
    "DirtyHaloError",
    "FootprintError",
    "KernelCallback",
    "KernelRegistry",
    "register_kernel",
    "demo_registry",
    "ExecutionContext",
    "build_contexts",
    "run",
    "run_distributed",
    "gather_owned",
    "debug_enabled",
]


class RegistryError(KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class ExecutionError(RuntimeError):
    def __init__(self, index: int, what: str, cause: BaseException):
        self.index = index
        self.cause = cause
        super().__init__(f"instruction {index} ({what}): {cause}")


class DirtyHaloError(RuntimeError):
    pass


class FootprintError(RuntimeError):
    pass


def debug_enabled() -> bool:
    return os.environ.get("MINIPSY_DEBUG", "").lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class KernelCallback:
    name: str
    code: object
    doc: str = ""


class KernelRegistry:
    def __init__(self):
        self._table: dict[str, KernelCallback] = {}

    def register(self, callback: KernelCallback) -> "KernelRegistry":
        if callback.name in self._table:
            raise RegistryError(f"kernel {callback.name!r} is already registered")
        self._table[callback.name] = callback
        return self

    def lookup(self, name: str) -> KernelCallback:
        try:
            return self._table[name]
        except KeyError:
            raise RegistryError(f"kernel {name!r} is not registered") from None

    def __contains__(self, name):
        return name in self._table

    def names(self) -> list[str]:
        return sorted(self._table)


def register_kernel(registry: KernelRegistry, callback: KernelCallback) -> KernelRegistry:
    return registry.register(callback)


def demo_registry(backend=None) -> KernelRegistry:
    """Registry with matrix_vector, enforce_bc and advect_upwind bound to ``backend``."""
    k = backend or _kernels.backend

    def matrix_vector(cells, nlayers, v, s, mm):
        k.matrix_vector(cells, nlayers, v.data, v.space.dofmap, s.data, s.space.dofmap, mm.local)

    def enforce_bc(cells, nlayers, v):
        mask = v.space.boundary.view(np.uint8)
        if mask.any():
            k.enforce_bc(cells, nlayers, v.data, v.space.dofmap, mask)

    def advect_upwind(cells, nlayers, rho, rho_old, u, dt):
        mesh = u.space.mesh
        # unit geometry: the Courant number is dt*|u| on each face
        foot = u.space.dofmap[cells][:, :, None] + np.arange(nlayers)
        umax = np.abs(u.data[foot]).max(initial=0.0)
        if float(dt) * umax > 0.5:
            raise ValueError(f"advect_upwind: CFL guard violated (dt*|u| = {float(dt) * umax:.3g} > 0.5)")
        k.advect_upwind(cells, nlayers, rho.data, rho.space.dofmap, rho_old.data,
                        rho_old.space.dofmap, u.data, u.space.dofmap,
                        mesh.local_neighbours(), mesh.local_edge_sign(), float(dt))

    reg = KernelRegistry()
    reg.register(KernelCallback("matrix_vector", matrix_vector, "v += mm * s per column"))
    reg.register(KernelCallback("enforce_bc", enforce_bc, "zero open-boundary dofs"))
    reg.register(KernelCallback("advect_upwind", advect_upwind, "first-order upwind update"))
    return reg


@dataclass
class ExecutionContext:
    """Everything one rank needs to run a plan."""

    rank: int
    mesh: object
    spaces: dict
    comm: object
    fields: dict = field(default_factory=dict)
    operators: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    colouring: object = None
    threads: int = 1
    debug: bool = False
    stats: Counter = field(default_factory=Counter)
    _pool: object = None
    _pending: dict = field(default_factory=dict)

    def space(self, kind: str):
        sp = self.spaces.get(kind)
        if sp is None:
            sp = make_function_space(self.mesh, kind, self.comm)
            self.spaces[kind] = sp
        return sp

    def ensure_colouring(self):
        if self.colouring is None:
            self.colouring = _colour(self.mesh)
        return self.colouring

    def declare(self, program, field_init=None, operator_init=None):
        """Create storage for every declaration of ``program``.

        ``field_init(name, space)`` returns initial data indexed like
        ``space.dof_gid``; ``operator_init(name, to_space, from_space)`` returns
        the local matrices.  Both default to zeros.
        """
        prog = getattr(program, "program", program)
        for d in prog.decls:
            if d.kind == "field":
                sp = self.space(d.spaces[0])
                data = None if field_init is None else field_init(d.name, sp)
                self.fields[d.name] = Field(sp, None if data is None else np.array(data, dtype=float), d.name)
            elif d.kind == "operator":
                to_sp, from_sp = self.space(d.spaces[0]), self.space(d.spaces[1])
                local = None if operator_init is None else operator_init(d.name, to_sp, from_sp)
                self.operators[d.name] = LocalOperator(from_sp, to_sp, local, d.name)
            else:
                self.scalars[d.name] = float(d.value)
        return self

    @property
    def pool(self):
        if self._pool is None and self.threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.threads,
                                            thread_name_prefix=f"rank{self.rank}-worker")
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def checksum(self, name: str) -> float:
        f = self.fields[name]
        return self.comm.allreduce_sums([(f.space.owned_gids(), f.owned_values())])[0]


def build_contexts(gm, nranks: int, nlayers: int, program=None, max_depth: int = 1,
                   threads: int = 1, harness: RankHarness | None = None, mode: str = "threads",
                   kinds=(), debug: bool | None = None, field_init=None, operator_init=None):
    """Partition ``gm`` and build one context per rank with routing in place."""
    part = partition(gm, nranks, max_depth)
    if nranks > 1 and harness is None:
        harness = RankHarness(nranks, mode)
    comms = [SerialComm()] if nranks == 1 else [RankComm(harness, r) for r in range(nranks)]
    if debug is None:
        debug = debug_enabled()
    ctxs = []
    for r in range(nranks):
        mesh = extrude(gm, part, r, nlayers)
        ctxs.append(ExecutionContext(r, mesh, {}, comms[r], threads=threads, debug=debug))
    needed = list(kinds)
    if program is not None:
        prog = getattr(program, "program", program)
        for d in prog.decls:
            needed.extend(d.spaces)
    for kind in dict.fromkeys(needed):
        spaces = [c.space(kind) for c in ctxs]
        if nranks > 1:
            tables = build_routing(
                [s.dof_gid[: s.last_owned] for s in spaces],
                [[s.dof_gid[(s.last_owned if d == 0 else s.halo_end[d]):s.halo_end[d + 1]]
                  for d in range(max_depth)] for s in spaces])
            for c, t in zip(ctxs, tables):
                c.comm.tables[kind] = t
    if program is not None:
        for c in ctxs:
            c.declare(program, field_init, operator_init)
    return ctxs


# -- running -----------------------------------------------------------------
def run(plan: ExecutablePlan, ctx: ExecutionContext, invokes=None) -> ExecutionContext:
    """Execute ``plan`` (or the listed invokes of it) on one rank."""
    ranges = plan.invoke_ranges
    sel = range(len(ranges)) if invokes is None else invokes
    for i in sel:
        a, b = ranges[i]
        _exec(plan, ctx, a, b, colour=None, shared=False)
    return ctx


def run_distributed(plan: ExecutablePlan, ctxs, harness: RankHarness | None = None):
    """Run ``plan`` on every context; ranks communicate through their comms."""
    if len(ctxs) == 1:
        return [run(plan, ctxs[0])]
    h = harness or ctxs[0].comm.harness
    return run_ranks(len(ctxs), lambda r, _h: run(plan, ctxs[r]), h)


def gather_owned(ctxs, name: str) -> np.ndarray:
    """Owned values of field ``name`` from all ranks, indexed by global dof id."""
    sp = ctxs[0].fields[name].space
    out = np.full(sp.nglobal, np.nan)
    for c in ctxs:
        f = c.fields[name]
        out[f.space.owned_gids()] = f.owned_values()
    return out


def _exec(plan, ctx, start, end, colour, shared):
    i = start
    ins = plan.instructions
    while i < end:
        it = ins[i]
        try:
            if it.op == "exchange":
                n = it.node
                f = ctx.fields[n.field]
                if not n.guarded or f.clean_halo_depth < n.depth:
                    f.halo_exchange(n.depth)
                    ctx.stats["exchanges"] += 1
                else:
                    ctx.stats["exchanges_skipped"] += 1
            elif it.op == "sum":
                pairs = ctx._pending.pop(it.node.scalar)
                ctx.scalars[it.node.scalar] = ctx.comm.allreduce_sums([pairs])[0]
                ctx.stats["global_sums"] += 1
            elif it.op == "dirty":
                ctx.fields[it.node.field].set_dirty()
            elif it.op == "clean":
                ctx.fields[it.node.field].set_clean(it.node.depth)
            elif it.op == "parallel":
                ctx.stats["parallel_regions"] += 1
                _exec(plan, ctx, i + 1, it.end, colour, shared)
            elif it.op == "do":
                _exec(plan, ctx, i + 1, it.end, colour, True)
            elif it.op == "loop":
                _loop(plan, ctx, it, colour, shared)
            else:
                raise RuntimeError(f"stray {it.op} instruction")
        except ExecutionError:
            raise
        except Exception as exc:  # noqa: BLE001 - wrapped with the instruction index
            raise ExecutionError(i, _describe(it), exc) from exc
        i = it.end


def _describe(it) -> str:
    if it.op == "loop":
        calls = ",".join(c.name for c in it.node.calls())
        return f"{it.node.kind} loop: {calls}"
    return it.op


def _loop(plan, ctx, it, colour, shared):
    loop: LoopNode = it.node
    mesh = ctx.mesh
    ctx.stats["loops"] += 1
    if loop.kind == "colours":
        col = ctx.colouring
        if col is None:
            raise RuntimeError("colour loop executed without a colouring")
        if ctx.debug:
            _check_halos(ctx, loop)
        for c in range(col.ncolours):
            _exec(plan, ctx, it.index + 1, it.end, c, shared)
        return
    calls = [plan.instructions[j] for j in range(it.index + 1, it.end)
             if plan.instructions[j].op == "call"]
    if ctx.debug and loop.kind != "cells_in_colour":
        _check_halos(ctx, loop)
    if loop.kind == "dofs":
        n = ctx.space(loop.field_space).dofs_upto(loop.depth)
        chunks = _chunks(0, n, ctx.threads if shared else 1)
        _dispatch(ctx, chunks, lambda lo_hi: [_builtin(ctx, c.node.call, *lo_hi) for c in calls])
        return
    upto = mesh.last_cell(loop.depth)
    if loop.kind == "cells_in_colour":
        cells = ctx.colouring.cells(colour, upto)
    else:
        cells = np.arange(upto, dtype=np.int64)
    parts = np.array_split(cells, ctx.threads) if shared and ctx.threads > 1 else [cells]
    parts = [np.ascontiguousarray(p, dtype=np.int64) for p in parts if len(p)]
    _dispatch(ctx, parts, lambda part: [_kernel(ctx, c, part) for c in calls])


def _chunks(lo, hi, n):
    bounds = np.linspace(lo, hi, max(n, 1) + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _dispatch(ctx, work, fn):
    if len(work) > 1 and ctx.pool is not None:
        for fut in [ctx.pool.submit(fn, w) for w in work]:
            fut.result()
    else:
        for w in work:
            fn(w)


def _args(ctx, call):
    out = []
    for a in call.args:
        if a.kind == "field":
            out.append(ctx.fields[a.name])
        elif a.kind == "operator":
            out.append(ctx.operators[a.name])
        elif a.name is None:
            out.append(a.value)
        else:
            out.append(ctx.scalars[a.name])
    return out


def _kernel(ctx, ins, cells):
    call = ins.node.call
    args = _args(ctx, call)
    nl = ctx.mesh.nlayers
    ctx.stats["kernel_cells"] += len(cells)
    if not ctx.debug:
        ins.callback.code(cells, nl, *args)
        return
    for c in cells:
        one = np.array([c], dtype=np.int64)
        snap = [(a, f.data.copy()) for a, f in zip(call.args, args) if a.kind == "field"]
        ins.callback.code(one, nl, *args)
        for meta, (_, before) in zip([a for a in call.args if a.kind == "field"], snap):
            after = ctx.fields[meta.name].data
            changed = np.flatnonzero(before.view(np.int64) != after.view(np.int64))
            if not len(changed):
                continue
            if not meta.modified:
                raise FootprintError(f"{call.name} modified read-only argument {meta.name}")
            allowed = _footprint(ctx.fields[meta.name].space, int(c))
            bad = np.setdiff1d(changed, allowed)
            if len(bad):
                raise FootprintError(f"{call.name} on cell {int(c)} wrote {meta.name} dof {int(bad[0])} "
                                     "outside the cell footprint")


def _footprint(space, cell: int) -> np.ndarray:
    L = space.nlayers
    ks = np.arange(L)
    return np.unique((space.dofmap[cell][:, None] + ks[None, :]).ravel())


def _check_halos(ctx, loop):
    for fname, need in required_depths(loop).items():
        f = ctx.fields[fname]
        if f.clean_halo_depth < need:
            raise DirtyHaloError(f"{fname} needs a clean halo to depth {need} but is clean "
                                 f"only to {f.clean_halo_depth}")


def _builtin(ctx, call, lo, hi):
    a = call.args
    if call.name in ("setval_c", "setval_x", "copy", "axpy", "inner_product"):
        fs = [ctx.fields[x.name] for x in a if x.kind == "field"]
        if len({id(f.space) for f in fs}) > 1:
            raise ValueError(f"{call.name}: operands live on different spaces")
    val = (lambda x: x.value if x.name is None else ctx.scalars[x.name])
    if call.name == "setval_c":
        ctx.fields[a[0].name].data[lo:hi] = val(a[1])
    elif call.name == "setval_x":
        ctx.fields[a[0].name].data[lo:hi] = ctx.fields[a[1].name].data[lo:hi]
    elif call.name == "copy":
        ctx.fields[a[1].name].data[lo:hi] = ctx.fields[a[0].name].data[lo:hi]
    elif call.name == "axpy":
        y = ctx.fields[a[0].name].data
        y[lo:hi] = y[lo:hi] + val(a[1]) * ctx.fields[a[2].name].data[lo:hi]
    elif call.name == "inner_product":
        x, y = ctx.fields[a[1].name], ctx.fields[a[2].name]
        n = x.space.last_owned
        prods = ctx._pending.get(a[0].name)
        if prods is None:
            prods = (x.space.owned_gids(), np.zeros(n))
            ctx._pending[a[0].name] = prods
        top = min(hi, n)
        if top > lo:
            prods[1][lo:top] = x.data[lo:top] * y.data[lo:top]
    else:
        raise ValueError(f"unknown built-in {call.name}")
