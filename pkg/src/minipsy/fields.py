"""Lowest-order function spaces, fields and per-cell operators.

Every dof lives on a horizontal mesh entity (vertex, edge or cell) at some
vertical level.  The dofs of one entity form a contiguous column so a dof is
addressed as ``map[col, df] + k``; dfs located on the top of a cell point one
level above their bottom counterpart.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .exchange import SerialComm
from .mesh import LocalMesh3D

__all__ = [
    "SPACE_KINDS",
    "CONTINUOUS_SPACES",
    "DISCONTINUOUS_SPACES",
    "FieldError",
    "FunctionSpace",
    "Field",
    "LocalOperator",
    "make_function_space",
    "make_field",
    "dof_index",
    "set_dirty",
    "set_clean",
]


class FieldError(ValueError):
    pass


# class: (name, topological entity, vertical extent offset: L + offset entries)
# df: (class index, slot of the entity within the cell, top offset)
_LAYOUTS = {
    "W0": (
        (("node", "vertex", 1),),
        tuple((0, s, 0) for s in range(4)) + tuple((0, s, 1) for s in range(4)),
    ),
    "W1": (
        (("hedge", "edge", 1), ("vedge", "vertex", 0)),
        tuple((0, s, 0) for s in range(4)) + tuple((1, s, 0) for s in range(4))
        + tuple((0, s, 1) for s in range(4)),
    ),
    "W2": (
        (("side", "edge", 0), ("hface", "cell", 1)),
        tuple((0, s, 0) for s in range(4)) + ((1, 0, 0), (1, 0, 1)),
    ),
    "W3": ((("volume", "cell", 0),), ((0, 0, 0),)),
    "Wtheta": ((("hface", "cell", 1),), ((0, 0, 0), (0, 0, 1))),
}

SPACE_KINDS = tuple(_LAYOUTS)
CONTINUOUS_SPACES = frozenset({"W0", "W1", "W2"})
DISCONTINUOUS_SPACES = frozenset({"W3", "Wtheta"})


def _global_entity_count(gm, topo: str) -> int:
    return {"vertex": gm.nvertices, "edge": gm.nedges, "cell": gm.ncells}[topo]


@dataclass(frozen=True, eq=False)
class FunctionSpace:
    """Dof layout of one space kind over a rank's local mesh.

    Local dofs are ordered: owned, annexed (on entities touching owned cells
    but owned elsewhere), then halo dofs by ascending depth.
    ``halo_end[d]`` is the end of the depth-``d`` group, with ``halo_end[0]``
    the end of the annexed group.
    """

    kind: str
    mesh: LocalMesh3D
    ndf: int
    dofmap: np.ndarray          # (ncells, ndf) base index, top dfs already +1
    df_extent: np.ndarray       # (ndf,) vertical entries of the df's entity column
    df_top: np.ndarray          # (ndf,) 1 for top-of-cell dfs
    undf: int
    last_owned: int
    halo_end: tuple
    dof_gid: np.ndarray         # (undf,) partition-independent global dof id
    dof_owner: np.ndarray       # (undf,) owning rank
    boundary: np.ndarray        # (ncells, ndf) dof on an open lateral boundary
    nglobal: int
    comm: object

    @property
    def continuous(self) -> bool:
        return self.kind in CONTINUOUS_SPACES

    @property
    def nlayers(self) -> int:
        return self.mesh.nlayers

    @property
    def annexed_end(self) -> int:
        return self.halo_end[0]

    def dofs_upto(self, depth: int) -> int:
        """Number of leading local dofs valid when the halo is clean to ``depth``."""
        return self.halo_end[depth]

    def owned_gids(self) -> np.ndarray:
        return self.dof_gid[: self.last_owned]

    def column_bases(self, df: int = 0) -> np.ndarray:
        return self.dofmap[:, df]


def make_function_space(mesh: LocalMesh3D, kind: str, comm=None) -> FunctionSpace:
    """Number the dofs of ``kind`` on ``mesh``.

    Ownership of a shared entity goes to the rank owning its incident cell
    with the smallest global id.
    """
    if kind not in _LAYOUTS:
        raise FieldError(f"unknown function space {kind!r}")
    classes, dfs = _LAYOUTS[kind]
    gm = mesh.global_mesh
    part = mesh.partition
    L = mesh.nlayers
    cells = mesh.cells
    depth_of_cell = mesh.cell_depth

    topo_tables = {
        "vertex": gm.cell_vertices[cells],
        "edge": gm.cell_edges[cells],
        "cell": cells[:, None],
    }
    owner_cell = {"vertex": gm.vertex_owner_cell(), "edge": gm.edge_owner_cell(),
                  "cell": np.arange(gm.ncells, dtype=np.int64)}

    keys = []        # (group, class, gid) per local entity
    per_class = []
    goffset = 0
    for ci, (_name, topo, ext_off) in enumerate(classes):
        table = topo_tables[topo]
        ents, inv = np.unique(table, return_inverse=True)
        inv = inv.reshape(table.shape)
        depth = np.full(len(ents), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(depth, inv.ravel(), np.repeat(depth_of_cell, table.shape[1]))
        owner = part.owner[owner_cell[topo][ents]]
        group = np.where(owner == mesh.rank, 0, 1 + depth)
        per_class.append((ents, inv, depth, owner, L + ext_off, goffset))
        keys.append(np.stack([group, np.full(len(ents), ci), ents], axis=1))
        goffset += _global_entity_count(gm, topo) * (L + ext_off)
    allkeys = np.concatenate(keys)
    order = np.lexsort((allkeys[:, 2], allkeys[:, 1], allkeys[:, 0]))

    extents = np.concatenate([np.full(len(pc[0]), pc[4]) for pc in per_class])
    starts = np.zeros(len(allkeys), dtype=np.int64)
    starts[order] = np.concatenate([[0], np.cumsum(extents[order])[:-1]]).astype(np.int64)
    undf = int(extents.sum())

    dof_gid = np.empty(undf, dtype=np.int64)
    dof_owner = np.empty(undf, dtype=np.int64)
    ent_base = []
    pos = 0
    for ents, _inv, _depth, owner, ext, goff in per_class:
        base = starts[pos:pos + len(ents)]
        ent_base.append(base)
        cols = base[:, None] + np.arange(ext)
        dof_gid[cols] = goff + ents[:, None] * ext + np.arange(ext)
        dof_owner[cols] = owner[:, None]
        pos += len(ents)

    groups_sorted = allkeys[order, 0]
    ext_sorted = extents[order]
    ndepth = part.max_halo_depth
    ends_by_group = [int(ext_sorted[groups_sorted <= g].sum()) for g in range(ndepth + 2)]
    last_owned = ends_by_group[0]
    halo_end = tuple(ends_by_group[1:])

    ndf = len(dfs)
    dofmap = np.empty((mesh.ncells, ndf), dtype=np.int64)
    boundary = np.zeros((mesh.ncells, ndf), dtype=bool)
    open_edge = gm.edge_cells[:, 1] < 0
    open_vertex = np.zeros(gm.nvertices, dtype=bool)
    open_vertex[gm.edge_vertices[open_edge].ravel()] = True
    for d, (ci, slot, top) in enumerate(dfs):
        _ents, inv, *_ = per_class[ci]
        dofmap[:, d] = ent_base[ci][inv[:, slot]] + top
        topo = classes[ci][1]
        if topo == "edge":
            boundary[:, d] = open_edge[topo_tables["edge"][:, slot]]
        elif topo == "vertex":
            boundary[:, d] = open_vertex[topo_tables["vertex"][:, slot]]
    df_extent = np.array([L + classes[ci][2] for ci, _s, _t in dfs], dtype=np.int64)
    df_top = np.array([t for _c, _s, t in dfs], dtype=np.int64)
    return FunctionSpace(kind=kind, mesh=mesh, ndf=ndf, dofmap=dofmap, df_extent=df_extent,
                         df_top=df_top, undf=undf, last_owned=last_owned, halo_end=halo_end,
                         dof_gid=dof_gid, dof_owner=dof_owner, boundary=boundary,
                         nglobal=goffset, comm=comm if comm is not None else SerialComm())


def dof_index(space: FunctionSpace, df: int, col: int, k: int) -> int:
    """``map(df, col) + k`` with range checks on all three arguments."""
    if not 0 <= df < space.ndf:
        raise FieldError(f"df {df} outside 0..{space.ndf - 1}")
    if not 0 <= col < space.mesh.ncells:
        raise FieldError(f"column {col} outside 0..{space.mesh.ncells - 1}")
    kmax = space.df_extent[df] - space.df_top[df]
    if not 0 <= k < kmax:
        raise FieldError(f"level {k} outside 0..{kmax - 1} for df {df}")
    return int(space.dofmap[col, df] + k)


class Field:
    """Dof values of one space plus the depth to which its halo is clean.

    Fields double as solver vectors: the linear-algebra methods act on all
    local dofs (so clean halos stay clean) while ``dot`` reduces over owned
    dofs only.
    """

    def __init__(self, space: FunctionSpace, data=None, name: str = "", clean_halo_depth=None):
        self.space = space
        self.name = name
        if data is None:
            data = np.zeros(space.undf)
        self.data = np.asarray(data, dtype=float)
        if len(self.data) < space.undf:
            raise FieldError("field data shorter than undf")
        if clean_halo_depth is None:
            clean_halo_depth = space.mesh.max_halo_depth
        self.clean_halo_depth = int(clean_halo_depth)

    def __repr__(self):
        return f"Field({self.name or '?'}:{self.space.kind}, clean={self.clean_halo_depth})"

    @property
    def max_depth(self) -> int:
        return self.space.mesh.max_halo_depth

    @property
    def comm(self):
        return self.space.comm

    def set_dirty(self):
        self.clean_halo_depth = 0
        return self

    def set_clean(self, depth: int):
        if not 0 <= depth <= self.max_depth:
            raise FieldError(f"clean depth {depth} outside 0..{self.max_depth}")
        self.clean_halo_depth = max(self.clean_halo_depth, depth)
        return self

    def is_dirty(self, depth: int) -> bool:
        return self.clean_halo_depth < depth

    def halo_exchange(self, depth: int):
        self.space.comm.halo_exchange(self, depth)
        return self

    def owned_values(self) -> np.ndarray:
        return self.data[: self.space.last_owned]

    # vector interface --------------------------------------------------
    def copy(self) -> "Field":
        return Field(self.space, self.data.copy(), self.name, self.clean_halo_depth)

    def zeros_like(self) -> "Field":
        return Field(self.space, np.zeros_like(self.data), self.name)

    def set_zero(self):
        self.data[:] = 0.0
        self.clean_halo_depth = self.max_depth

    def assign(self, other: "Field"):
        self.data[:] = other.data
        self.clean_halo_depth = other.clean_halo_depth

    def axpy(self, alpha: float, x: "Field"):
        """self <- self + alpha * x"""
        self.data += alpha * x.data
        self.clean_halo_depth = min(self.clean_halo_depth, x.clean_halo_depth)

    def aypx(self, alpha: float, x: "Field"):
        """self <- alpha * self + x"""
        self.data *= alpha
        self.data += x.data
        self.clean_halo_depth = min(self.clean_halo_depth, x.clean_halo_depth)

    def scale(self, alpha: float):
        self.data *= alpha

    def local_products(self, other: "Field"):
        n = self.space.last_owned
        return self.space.owned_gids(), self.data[:n] * other.data[:n]

    def dot(self, other: "Field") -> float:
        return self.space.comm.allreduce_sums([self.local_products(other)])[0]

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


def make_field(space: FunctionSpace, initial: float = 0.0, name: str = "") -> Field:
    """Uniform field; uniform data is trivially clean to the maximum depth."""
    return Field(space, np.full(space.undf, float(initial)), name)


def set_dirty(field: Field) -> Field:
    return field.set_dirty()


def set_clean(field: Field, depth: int) -> Field:
    return field.set_clean(depth)


class LocalOperator:
    """Per-cell dense matrices mapping ``from_space`` dofs to ``to_space`` dofs.

    ``local[c, k]`` is the ``(ndf_to, ndf_from)`` block of layer ``k`` of column ``c``.
    """

    def __init__(self, from_space: FunctionSpace, to_space: FunctionSpace, local=None, name=""):
        if from_space.mesh is not to_space.mesh:
            raise FieldError("operator spaces must share a mesh")
        shape = (from_space.mesh.ncells, from_space.nlayers, to_space.ndf, from_space.ndf)
        if local is None:
            local = np.zeros(shape)
        local = np.ascontiguousarray(local, dtype=float)
        if local.shape != shape:
            raise FieldError(f"operator shape {local.shape} != {shape}")
        self.from_space = from_space
        self.to_space = to_space
        self.local = local
        self.name = name

    @classmethod
    def identity(cls, space: FunctionSpace, name=""):
        L = space.nlayers
        local = np.broadcast_to(np.eye(space.ndf), (space.mesh.ncells, L, space.ndf, space.ndf))
        return cls(space, space, local.copy(), name)
