"""Schedule IR, communication placement, transformations, listings and plans.

Pipeline::

    lower(resolved)            one loop per call, dirty markers, no comms
    -> transform_*             colour / threads / fuse / redundant
    -> insert_comm             guarded halo exchanges and global sums
    -> compile_plan            flat verified instruction list

Loops are addressed by ``(invoke, loop)`` where ``loop`` counts loops
depth-first (nested loops included) in ``Schedule.loops(invoke)``.
Transformations never mutate their input: they return a new schedule.
"""
from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

from .dsl import ResolvedProgram
from .fields import CONTINUOUS_SPACES

__all__ = [
    "CompileError",
    "TransformationError",
    "HaloExchangeNode",
    "GlobalSumNode",
    "LoopNode",
    "KernelCallNode",
    "SetDirtyNode",
    "SetCleanNode",
    "DirectiveNode",
    "InvokeSchedule",
    "Schedule",
    "Instruction",
    "ExecutablePlan",
    "lower",
    "insert_comm",
    "required_depths",
    "transform_colour",
    "transform_threads",
    "transform_fuse",
    "transform_redundant",
    "openmp_recipe",
    "parse_recipe",
    "apply_recipe",
    "emit_listing",
    "compile_plan",
    "compile_program",
]


class CompileError(ValueError):
    pass


class TransformationError(ValueError):
    def __init__(self, transformation: str, target, reason: str):
        self.transformation = transformation
        self.target = target
        self.reason = reason
        super().__init__(f"{transformation} on {target}: {reason}")


# -- nodes -------------------------------------------------------------------
@dataclass
class HaloExchangeNode:
    field: str
    depth: int
    guarded: bool = True


@dataclass
class GlobalSumNode:
    scalar: str


@dataclass
class KernelCallNode:
    call: object            # dsl.ResolvedCall

    @property
    def name(self):
        return self.call.name


@dataclass
class LoopNode:
    """``kind`` is one of cells, dofs, colours, cells_in_colour.

    ``depth`` is the halo depth of the upper bound: 0 iterates owned cells
    (or owned plus annexed dofs), ``d`` extends ``d`` cells into the halo.
    """

    kind: str
    depth: int = 0
    body: list = field(default_factory=list)

    def calls(self) -> list:
        out = []
        for n in self.body:
            if isinstance(n, KernelCallNode):
                out.append(n)
            elif isinstance(n, (LoopNode, DirectiveNode)):
                out.extend(n.calls())
        return out

    def inner_loop(self) -> "LoopNode":
        """The cells_in_colour loop of a colours loop (self otherwise)."""
        if self.kind != "colours":
            return self
        for n in _walk(self.body):
            if isinstance(n, LoopNode):
                return n
        raise CompileError("colours loop without an inner loop")

    @property
    def field_space(self) -> str | None:
        """Space of the first updated field (first field when nothing is updated)."""
        first = None
        for c in self.calls():
            for a in c.call.args:
                if a.kind != "field":
                    continue
                if a.modified:
                    return a.space
                first = first or a.space
        return first

    def modifies_continuous(self) -> bool:
        return any(a.kind == "field" and a.modified and a.space in CONTINUOUS_SPACES
                   for c in self.calls() for a in c.call.args)

    def incs_continuous(self) -> bool:
        return any(a.kind == "field" and a.access == "inc" and a.space in CONTINUOUS_SPACES
                   for c in self.calls() for a in c.call.args)


@dataclass
class SetDirtyNode:
    field: str


@dataclass
class SetCleanNode:
    field: str
    depth: int


@dataclass
class DirectiveNode:
    kind: str               # 'parallel' or 'do'
    body: list = field(default_factory=list)

    def calls(self) -> list:
        out = []
        for n in self.body:
            if isinstance(n, (LoopNode, DirectiveNode)):
                out.extend(n.calls())
            elif isinstance(n, KernelCallNode):
                out.append(n)
        return out


_MARKERS = (SetDirtyNode, SetCleanNode)


def _walk(nodes):
    for n in nodes:
        yield n
        if isinstance(n, (LoopNode, DirectiveNode)):
            yield from _walk(n.body)


@dataclass
class InvokeSchedule:
    index: int
    nodes: list = field(default_factory=list)


@dataclass
class Schedule:
    invokes: list
    max_depth: int = 1
    comm_inserted: bool = False

    def loops(self, invoke: int = 0) -> list:
        """All loops of one invoke, depth-first in program order."""
        return [n for n in _walk(self.invokes[invoke].nodes) if isinstance(n, LoopNode)]

    def all_nodes(self):
        for inv in self.invokes:
            yield from _walk(inv.nodes)

    def node_count(self) -> int:
        return sum(1 for _ in self.all_nodes())

    def exchange_sites(self) -> list:
        return [n for n in self.all_nodes() if isinstance(n, HaloExchangeNode)]


# -- lowering ----------------------------------------------------------------
def lower(program: ResolvedProgram, max_depth: int = 1) -> Schedule:
    """Vanilla schedule: one owned-range loop per call, dirty markers after it."""
    invokes = []
    for i, calls in enumerate(program.invokes):
        nodes = []
        for call in calls:
            nodes.append(LoopNode("cells" if call.iterates_over == "cells" else "dofs", 0,
                                  [KernelCallNode(call)]))
        inv = InvokeSchedule(i, nodes)
        _refresh_markers(inv.nodes)
        invokes.append(inv)
    return Schedule(invokes, max_depth)


def _modified_fields(loop: LoopNode) -> list:
    seen = []
    for c in loop.calls():
        for a in c.call.args:
            if a.kind == "field" and a.modified and a.name not in seen:
                seen.append(a.name)
    return seen


def _clean_after(loop: LoopNode, fname: str) -> int:
    """Halo depth to which ``fname`` is valid after ``loop`` runs."""
    inner = loop.inner_loop()
    u = inner.depth
    out = u
    for c in loop.calls():
        for a in c.call.args:
            if a.kind == "field" and a.name == fname and a.modified:
                if inner.kind != "dofs" and a.space in CONTINUOUS_SPACES:
                    out = min(out, max(u - 1, 0))
    return out


def _top_loop(node):
    """The loop a top-level node stands for (unwrapping directives)."""
    while isinstance(node, DirectiveNode):
        inner = [n for n in node.body if isinstance(n, (LoopNode, DirectiveNode))]
        if not inner:
            return None
        node = inner[0]
    return node if isinstance(node, LoopNode) else None


def _refresh_markers(nodes: list):
    """Drop and regenerate the dirty/clean markers following every loop."""
    kept = [n for n in nodes if not isinstance(n, _MARKERS)]
    nodes.clear()
    for n in kept:
        nodes.append(n)
        loop = _top_loop(n)
        if loop is None:
            continue
        for f in _modified_fields(loop):
            nodes.append(SetDirtyNode(f))
            d = _clean_after(loop, f)
            if d > 0:
                nodes.append(SetCleanNode(f, d))


# -- communication -----------------------------------------------------------
def required_depths(loop: LoopNode) -> dict:
    """Clean halo depth each field must have on entry to ``loop``.

    Fields updated by an earlier call in the same (fused) loop are skipped:
    fusion legality already guarantees their values are produced in place.
    """
    inner = loop.inner_loop()
    u = inner.depth
    need: dict = {}
    produced = set()
    for c in loop.calls():
        for a in c.call.args:
            if a.kind != "field" or a.name in produced:
                continue
            if inner.kind == "dofs":
                r = u if a.access in ("read", "readwrite") else 0
            elif a.access == "read":
                r = u + a.stencil
            elif a.access == "inc":
                r = max(u - 1, 0) if a.space in CONTINUOUS_SPACES else u
            elif a.access == "readwrite":
                r = u
            else:
                r = 0
            need[a.name] = max(need.get(a.name, 0), r)
        for a in c.call.args:
            if a.kind == "field" and a.modified:
                produced.add(a.name)
    return need


def _promote(loop: LoopNode, depth: int):
    loop.depth = depth
    if loop.kind == "colours":
        loop.inner_loop().depth = depth


def insert_comm(schedule: Schedule, naive: bool = False) -> Schedule:
    """Place halo exchanges and global sums.

    Cells loops that increment a continuous field are first widened to halo
    depth 1 (redundant computation) so annexed dofs receive every
    contribution locally.  With ``naive=True`` every field a loop reads
    (or increments) is exchanged unconditionally before the loop; this is the
    brute-force oracle plan.
    """
    if schedule.comm_inserted:
        raise CompileError("schedule already has communication nodes")
    s = _copy.deepcopy(schedule)
    maxd = s.max_depth
    for inv in s.invokes:
        known: dict = {}
        out = []
        for node in inv.nodes:
            if isinstance(node, _MARKERS):
                continue
            loop = _top_loop(node)
            if loop is None:
                out.append(node)
                continue
            if loop.depth == 0 and loop.kind in ("cells", "colours") and loop.incs_continuous():
                _promote(loop, min(1, maxd))
            for fname, r in required_depths(loop).items():
                if r > maxd:
                    raise CompileError(f"field {fname} needs clean halo depth {r}, "
                                       f"but the partition only has depth {maxd}")
                if naive:
                    d = max(r, min(1, maxd))
                    if d > 0 and _reads(loop, fname):
                        out.append(HaloExchangeNode(fname, d, guarded=False))
                        known[fname] = d
                elif r > 0 and known.get(fname, -1) < r:
                    out.append(HaloExchangeNode(fname, r, guarded=True))
                    known[fname] = r
            out.append(node)
            for f in _modified_fields(loop):
                d = _clean_after(loop, f)
                out.append(SetDirtyNode(f))
                known[f] = 0
                if d > 0:
                    out.append(SetCleanNode(f, d))
                    known[f] = d
            for c in loop.calls():
                if c.call.builtin and c.call.name == "inner_product":
                    out.append(GlobalSumNode(c.call.args[0].name))
        inv.nodes[:] = out
    s.comm_inserted = True
    return s


def _reads(loop: LoopNode, fname: str) -> bool:
    return any(a.kind == "field" and a.name == fname and a.access in ("read", "readwrite", "inc")
               for c in loop.calls() for a in c.call.args)


# -- transformations ---------------------------------------------------------
def _locate(schedule: Schedule, invoke: int, loop, tname: str):
    """Path of list indices from the invoke's node list to the target loop."""
    if not 0 <= invoke < len(schedule.invokes):
        raise TransformationError(tname, f"invoke {invoke}", "no such invoke")
    loops = schedule.loops(invoke)
    if isinstance(loop, LoopNode):
        target = next((l for l in loops if l is loop), None)
        if target is None:
            raise TransformationError(tname, "loop", "loop is not part of this schedule")
    else:
        if not 0 <= loop < len(loops):
            raise TransformationError(tname, f"loop {loop}", f"invoke {invoke} has {len(loops)} loops")
        target = loops[loop]

    def search(nodes, path):
        for i, n in enumerate(nodes):
            if n is target:
                return path + [i]
            if isinstance(n, (LoopNode, DirectiveNode)):
                hit = search(n.body, path + [i])
                if hit:
                    return hit
        return None

    return search(schedule.invokes[invoke].nodes, [])


def _follow(schedule: Schedule, invoke: int, path):
    """(parent list, index, node) for ``path`` in ``schedule``."""
    nodes = schedule.invokes[invoke].nodes
    parent = None
    for i in path[:-1]:
        parent = nodes[i]
        nodes = parent.body
    return nodes, path[-1], nodes[path[-1]], parent


def _prepare(schedule, invoke, loop, tname):
    if schedule.comm_inserted:
        raise TransformationError(tname, f"invoke {invoke}", "apply transformations before insert_comm")
    path = _locate(schedule, invoke, loop, tname)
    new = _copy.deepcopy(schedule)
    return new, path


def _label(invoke, loop):
    return f"invoke {invoke} loop {loop if isinstance(loop, int) else '?'}"


def transform_colour(schedule: Schedule, invoke: int, loop) -> Schedule:
    """Split a cells loop into a colours loop around a cells_in_colour loop."""
    new, path = _prepare(schedule, invoke, loop, "colour")
    nodes, i, target, parent = _follow(new, invoke, path)
    if target.kind != "cells":
        raise TransformationError("colour", _label(invoke, loop),
                                  f"only uncoloured cells loops can be coloured, this is a {target.kind} loop")
    # the colours loop would inherit the work-share and run colours concurrently
    if isinstance(parent, DirectiveNode):
        raise TransformationError("colour", _label(invoke, loop), "loop is already threaded; colour it first")
    nodes[i] = LoopNode("colours", target.depth,
                        [LoopNode("cells_in_colour", target.depth, target.body)])
    return new


def transform_threads(schedule: Schedule, invoke: int, loop) -> Schedule:
    """Wrap a loop in a parallel region with a static work-share."""
    new, path = _prepare(schedule, invoke, loop, "threads")
    nodes, i, target, parent = _follow(new, invoke, path)
    where = _label(invoke, loop)
    if target.kind == "colours":
        raise TransformationError("threads", where, "loops over colours cannot be threaded")
    if isinstance(parent, DirectiveNode):
        raise TransformationError("threads", where, "loop is already threaded")
    if target.kind == "cells" and target.modifies_continuous():
        raise TransformationError("threads", where,
                                  "uncoloured cells loop updates a continuous field (race); colour it first")
    nodes[i] = DirectiveNode("parallel", [DirectiveNode("do", [target])])
    return new


def transform_fuse(schedule: Schedule, invoke: int, loop_a, loop_b) -> Schedule:
    """Fuse two adjacent loops over the same iteration space."""
    pa = _locate(schedule, invoke, loop_a, "fuse")
    pb = _locate(schedule, invoke, loop_b, "fuse")
    where = f"invoke {invoke} loops {loop_a}, {loop_b}"
    if schedule.comm_inserted:
        raise TransformationError("fuse", where, "apply transformations before insert_comm")
    if pa[:-1] != pb[:-1]:
        raise TransformationError("fuse", where, "loops are not siblings")
    new = _copy.deepcopy(schedule)
    nodes, ia, a, _ = _follow(new, invoke, pa)
    _, ib, b, _ = _follow(new, invoke, pb)
    if ib < ia:
        raise TransformationError("fuse", where, "second loop precedes the first")
    between = nodes[ia + 1:ib]
    if any(not isinstance(n, _MARKERS) for n in between):
        raise TransformationError("fuse", where, "loops are not adjacent")
    if a.kind != b.kind or a.kind not in ("cells", "dofs"):
        raise TransformationError("fuse", where, f"cannot fuse a {a.kind} loop with a {b.kind} loop")
    if a.depth != b.depth:
        raise TransformationError("fuse", where, f"loop bounds differ (depth {a.depth} vs {b.depth})")
    if a.kind == "dofs" and a.field_space != b.field_space:
        raise TransformationError("fuse", where,
                                  f"dof loops over different spaces ({a.field_space} vs {b.field_space})")
    reason = _fusion_hazard(a, b)
    if reason:
        raise TransformationError("fuse", where, reason)
    a.body.extend(b.body)
    del nodes[ia + 1:ib + 1]
    _refresh_markers(nodes)
    return new


def _fusion_hazard(a: LoopNode, b: LoopNode) -> str | None:
    """Conservative dependence check for fusing ``a`` then ``b``.

    In a dofs loop every access is pointwise, so any order is fine.  In a
    cells loop a field updated by one loop and touched by the other is only
    safe when it is discontinuous and no stencil reaches a neighbour cell.
    """
    if a.kind == "dofs":
        return None

    def accesses(loop):
        out = []
        for c in loop.calls():
            for x in c.call.args:
                if x.kind == "field":
                    out.append(x)
        return out

    for first, second in ((a, b), (b, a)):
        written = {x.name for x in accesses(first) if x.modified}
        for x in accesses(second):
            if x.name not in written:
                continue
            if x.space in CONTINUOUS_SPACES:
                return (f"{x.name} ({x.space}) is updated in one loop and accessed in the other; "
                        "shared dofs would see partial updates")
            if x.stencil > 0:
                return f"{x.name} is updated in one loop and read through a stencil in the other"
    return None


def transform_redundant(schedule: Schedule, invoke: int, loop, depth: int) -> Schedule:
    """Extend a loop's upper bound ``depth`` cells into the halo."""
    new, path = _prepare(schedule, invoke, loop, "redundant")
    nodes, i, target, parent = _follow(new, invoke, path)
    where = _label(invoke, loop)
    if target.kind == "cells_in_colour":
        raise TransformationError("redundant", where, "apply to the enclosing colours loop")
    if depth < 1:
        raise TransformationError("redundant", where, "depth must be >= 1")
    if depth > new.max_depth:
        raise TransformationError("redundant", where,
                                  f"depth {depth} exceeds the partition halo depth {new.max_depth}")
    _promote(target, depth)
    _refresh_markers(new.invokes[invoke].nodes)
    return new


def openmp_recipe(schedule: Schedule) -> tuple[Schedule, list[str]]:
    """Colour every cells loop updating a continuous field, then thread every
    loop that is not over colours.  Returns the schedule and the recipe lines."""
    lines = []
    for inv in range(len(schedule.invokes)):
        k = 0
        while k < len(schedule.loops(inv)):
            lp = schedule.loops(inv)[k]
            if lp.kind == "cells" and lp.field_space in CONTINUOUS_SPACES:
                schedule = transform_colour(schedule, inv, k)
                lines.append(f"colour {inv} {k}")
            k += 1
        for k, lp in enumerate(schedule.loops(inv)):
            if lp.kind != "colours":
                schedule = transform_threads(schedule, inv, k)
                lines.append(f"threads {inv} {k}")
    return schedule, lines


_RECIPE_ARITY = {"colour": 2, "threads": 2, "fuse": 3, "redundant": 3}


def parse_recipe(text: str) -> list[tuple]:
    """Recipe lines -> ``[(op, ints..., lineno)]``; ``#`` starts a comment."""
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        op, rest = line[0], line[1:]
        if op not in _RECIPE_ARITY:
            raise CompileError(f"recipe line {lineno}: unknown transformation {op!r}")
        if len(rest) != _RECIPE_ARITY[op]:
            raise CompileError(f"recipe line {lineno}: {op} takes {_RECIPE_ARITY[op]} integers")
        try:
            nums = tuple(int(x) for x in rest)
        except ValueError:
            raise CompileError(f"recipe line {lineno}: arguments must be integers") from None
        steps.append((op, *nums, lineno))
    return steps


def apply_recipe(schedule: Schedule, steps) -> Schedule:
    funcs = {"colour": transform_colour, "threads": transform_threads,
             "fuse": transform_fuse, "redundant": transform_redundant}
    for op, *args in steps:
        args = args[:-1]
        schedule = funcs[op](schedule, *args)
    return schedule


# -- listing -----------------------------------------------------------------
def _bound(loop: LoopNode, target: str | None) -> str:
    d = loop.depth
    if loop.kind == "cells":
        return "owned_cells" if d == 0 else f"halo_cells({d})"
    if loop.kind == "colours":
        return "ncolour"
    if loop.kind == "cells_in_colour":
        return "ncp_colour(colour)" if d == 0 else f"ncp_colour_halo(colour, {d})"
    return f"owned_dofs({target})" if d == 0 else f"halo_dofs({target}, {d})"


def _builtin_line(call) -> str:
    def val(a):
        if a.kind == "scalar":
            return a.name if a.name is not None else repr(a.value)
        return f"{a.name}_data(df)"

    a = call.args
    if call.name == "setval_c":
        return f"{val(a[0])} = {val(a[1])}"
    if call.name == "setval_x":
        return f"{val(a[0])} = {val(a[1])}"
    if call.name == "copy":
        return f"{val(a[1])} = {val(a[0])}"
    if call.name == "axpy":
        return f"{val(a[0])} = {val(a[0])} + {val(a[1])}*{val(a[2])}"
    if call.name == "inner_product":
        return f"{a[0].name} = {a[0].name} + {val(a[1])}*{val(a[2])}"
    raise CompileError(f"no listing form for built-in {call.name}")


def _kernel_line(call, cellexpr: str) -> str:
    names = [a.name if a.name is not None else repr(a.value) for a in call.args]
    return f"CALL {call.name}_code({cellexpr}, nlayers, {', '.join(names)})"


def emit_listing(schedule: Schedule) -> str:
    """Deterministic pseudo-source listing of the schedule."""
    out: list[str] = []

    def emit(nodes, ind, cellexpr):
        pad = "  " * ind
        for n in nodes:
            if isinstance(n, HaloExchangeNode):
                if n.guarded:
                    out.append(f"{pad}IF ({n.field}%is_dirty(depth={n.depth})) THEN")
                    out.append(f"{pad}  CALL {n.field}%halo_exchange(depth={n.depth})")
                    out.append(f"{pad}END IF")
                else:
                    out.append(f"{pad}CALL {n.field}%halo_exchange(depth={n.depth})")
            elif isinstance(n, GlobalSumNode):
                out.append(f"{pad}CALL global_sum({n.scalar})")
            elif isinstance(n, SetDirtyNode):
                out.append(f"{pad}CALL {n.field}%set_dirty()")
            elif isinstance(n, SetCleanNode):
                out.append(f"{pad}CALL {n.field}%set_clean({n.depth})")
            elif isinstance(n, DirectiveNode):
                if n.kind == "parallel":
                    out.append(f"{pad}!$omp parallel default(shared), private(cell)")
                    emit(n.body, ind, cellexpr)
                    out.append(f"{pad}!$omp end parallel")
                else:
                    out.append(f"{pad}!$omp do schedule(static)")
                    emit(n.body, ind, cellexpr)
                    out.append(f"{pad}!$omp end do")
            elif isinstance(n, LoopNode):
                if n.kind == "colours":
                    out.append(f"{pad}DO colour=1,{_bound(n, None)}")
                    emit(n.body, ind + 1, cellexpr)
                    out.append(f"{pad}END DO")
                elif n.kind == "dofs":
                    out.append(f"{pad}DO df=1,{_bound(n, n.field_space)}")
                    emit(n.body, ind + 1, "df")
                    out.append(f"{pad}END DO")
                else:
                    expr = "cmap(colour, cell)" if n.kind == "cells_in_colour" else "cell"
                    out.append(f"{pad}DO cell=1,{_bound(n, None)}")
                    emit(n.body, ind + 1, expr)
                    out.append(f"{pad}END DO")
            elif isinstance(n, KernelCallNode):
                if n.call.builtin:
                    out.append(f"{pad}{_builtin_line(n.call)}")
                else:
                    out.append(f"{pad}{_kernel_line(n.call, cellexpr)}")

    for inv in schedule.invokes:
        if not inv.nodes:
            continue
        out.append(f"! invoke {inv.index}")
        emit(inv.nodes, 1, "cell")
    return "\n".join(out) + ("\n" if out else "")


# -- plans -------------------------------------------------------------------
@dataclass(frozen=True)
class Instruction:
    """One schedule node.  Container nodes own instructions ``index+1 .. end-1``."""

    index: int
    op: str                 # exchange, sum, dirty, clean, loop, call, parallel, do
    node: object
    end: int
    invoke: int
    callback: object = None


@dataclass(frozen=True)
class ExecutablePlan:
    instructions: tuple
    invoke_ranges: tuple    # (start, end) per invoke
    schedule: Schedule

    def __len__(self):
        return len(self.instructions)

    def count(self, op: str) -> int:
        return sum(1 for i in self.instructions if i.op == op)

    def loop_count(self) -> int:
        return self.count("loop")


_OPS = {HaloExchangeNode: "exchange", GlobalSumNode: "sum", SetDirtyNode: "dirty",
        SetCleanNode: "clean", LoopNode: "loop", KernelCallNode: "call", DirectiveNode: None}


def compile_plan(schedule: Schedule, registry=None, colouring=None, bind: bool = True) -> ExecutablePlan:
    """Flatten and verify ``schedule``.

    ``registry`` must resolve every non-built-in kernel (``registry.lookup``);
    ``colouring`` must be provided (any truthy object) when colour loops exist.
    ``bind=False`` skips both, giving a plan for inspection only.
    """
    problems = _verify(schedule)
    if problems:
        raise CompileError("schedule verification failed: " + "; ".join(problems))
    instrs: list[Instruction] = []
    ranges = []

    def flat(nodes, inv):
        for n in nodes:
            idx = len(instrs)
            op = _OPS[type(n)] or n.kind
            cb = None
            if bind and isinstance(n, KernelCallNode) and not n.call.builtin:
                if registry is None:
                    raise CompileError(f"no kernel registry to bind {n.name}")
                cb = registry.lookup(n.name)
            if bind and isinstance(n, LoopNode) and n.kind == "colours" and not colouring:
                raise CompileError("colour loop present but no colouring was computed")
            instrs.append(None)
            if isinstance(n, (LoopNode, DirectiveNode)):
                flat(n.body, inv)
            instrs[idx] = Instruction(idx, op, n, len(instrs), inv, cb)

    for inv in schedule.invokes:
        start = len(instrs)
        flat(inv.nodes, inv.index)
        ranges.append((start, len(instrs)))
    if len(instrs) != schedule.node_count():
        raise CompileError(f"plan has {len(instrs)} instructions for {schedule.node_count()} nodes")
    return ExecutablePlan(tuple(instrs), tuple(ranges), schedule)


def _verify(schedule: Schedule) -> list[str]:
    problems = []

    def check(nodes, enclosing, where, top=False):
        for i, n in enumerate(nodes):
            here = f"{where}[{i}]"
            if isinstance(n, KernelCallNode):
                want = "dofs" if n.call.iterates_over == "dofs" else ("cells", "cells_in_colour")
                if enclosing is None or enclosing.kind not in want:
                    problems.append(f"{here}: call {n.name} not inside a matching loop")
            elif isinstance(n, LoopNode):
                if n.kind == "cells_in_colour" and (enclosing is None or enclosing.kind != "colours"):
                    problems.append(f"{here}: cells_in_colour loop outside a colours loop")
                if enclosing is not None and enclosing.kind != "colours":
                    problems.append(f"{here}: loop nested inside a {enclosing.kind} loop")
                if n.kind == "colours":
                    inner = [x for x in _walk(n.body) if isinstance(x, LoopNode)]
                    if len(inner) != 1 or inner[0].kind != "cells_in_colour":
                        problems.append(f"{here}: colours loop must hold one cells_in_colour loop")
                    elif inner[0].depth != n.depth:
                        problems.append(f"{here}: colour loop depths disagree")
                if n.depth > schedule.max_depth:
                    problems.append(f"{here}: loop depth {n.depth} exceeds halo depth {schedule.max_depth}")
                check(n.body, n, here)
            elif isinstance(n, DirectiveNode):
                inner = [x for x in n.body]
                if n.kind == "parallel":
                    if len(inner) != 1 or not (isinstance(inner[0], DirectiveNode) and inner[0].kind == "do"):
                        problems.append(f"{here}: parallel region must hold one work-share")
                elif n.kind == "do":
                    if len(inner) != 1 or not isinstance(inner[0], LoopNode):
                        problems.append(f"{here}: work-share must hold one loop")
                    elif inner[0].kind == "colours":
                        problems.append(f"{here}: colours loop is work-shared")
                    elif inner[0].kind == "cells" and inner[0].modifies_continuous():
                        problems.append(f"{here}: uncoloured threaded loop updates a continuous field")
                else:
                    problems.append(f"{here}: unknown directive {n.kind}")
                check(n.body, enclosing, here)
            elif enclosing is not None:
                problems.append(f"{here}: {type(n).__name__} inside a loop")
        # every updated field is marked dirty right after its loop
        for i, n in enumerate(nodes):
            loop = _top_loop(n)
            if loop is None or not top:
                continue
            marked = set()
            j = i + 1
            while j < len(nodes) and isinstance(nodes[j], (SetDirtyNode, SetCleanNode, GlobalSumNode)):
                if isinstance(nodes[j], SetDirtyNode):
                    marked.add(nodes[j].field)
                j += 1
            for f in _modified_fields(loop):
                if f not in marked:
                    problems.append(f"{where}[{i}]: {f} updated without a dirty marker")

    for inv in schedule.invokes:
        check(inv.nodes, None, f"invoke {inv.index}", top=True)
    return problems


def compile_program(resolved: ResolvedProgram, max_depth: int = 1, recipe=None,
                    naive: bool = False) -> Schedule:
    """lower + optional recipe (text or parsed steps) + insert_comm."""
    s = lower(resolved, max_depth)
    if recipe:
        steps = parse_recipe(recipe) if isinstance(recipe, str) else recipe
        s = apply_recipe(s, steps)
    return insert_comm(s, naive=naive)
