"""Global 2D meshes, partitions, extruded local meshes and cell colouring.

Two mesh families are supported: the equi-angular cubed sphere ``Cn`` and a
structured planar quadrilateral grid with optional periodicity in each
direction.  Both are treated as unstructured once built: everything
downstream works from the cell/edge/vertex tables only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np

__all__ = [
    "MeshError",
    "GlobalMesh2D",
    "Partition",
    "LocalMesh3D",
    "Colouring",
    "build_cubed_sphere",
    "build_planar",
    "parse_mesh_spec",
    "partition",
    "extrude",
    "colour",
    "coarsen",
    "dump_mesh",
]


class MeshError(ValueError):
    """Invalid mesh construction or partitioning request."""


# Cube faces as (origin, u-axis, v-axis) in units of n on the integer lattice
# [0, n]^3; u x v is the outward normal so all panels share an orientation.
_PANELS = (
    ((1, 0, 0), (0, 1, 0), (0, 0, 1)),    # +x
    ((1, 1, 0), (-1, 0, 0), (0, 0, 1)),   # +y
    ((0, 1, 0), (0, -1, 0), (0, 0, 1)),   # -x
    ((0, 0, 0), (1, 0, 0), (0, 0, 1)),    # -y
    ((0, 0, 1), (1, 0, 0), (0, 1, 0)),    # +z
    ((0, 0, 0), (0, 1, 0), (1, 0, 0)),    # -z
)


@dataclass(frozen=True, eq=False)
class GlobalMesh2D:
    """Horizontal topology of a closed or open quadrilateral surface mesh.

    Cells list their vertices counter-clockwise and their edges in the order
    (v0-v1, v1-v2, v2-v3, v3-v0).  ``cell_neighbours[c, e]`` is the cell across
    local edge ``e`` (``-1`` on an open boundary).
    """

    kind: str                      # "cubed-sphere" or "planar"
    shape: tuple                   # (n,) or (nx, ny)
    periodic: tuple                # (px, py); (True, True) for the sphere
    cell_vertices: np.ndarray      # (F, 4)
    cell_edges: np.ndarray         # (F, 4)
    edge_vertices: np.ndarray      # (E, 2)
    edge_cells: np.ndarray         # (E, 2), -1 padded, ascending cell id
    cell_neighbours: np.ndarray    # (F, 4)
    cell_edge_sign: np.ndarray     # (F, 4), +1 if the cell is edge_cells[e, 0]
    vertex_cells: tuple            # per vertex, ascending cell ids
    cell_index: np.ndarray         # (F, 3) structured (panel, i, j)
    coords: np.ndarray             # (V, 3) unit sphere or (V, 2) plane

    @property
    def ncells(self) -> int:
        return len(self.cell_vertices)

    @property
    def nedges(self) -> int:
        return len(self.edge_vertices)

    @property
    def nvertices(self) -> int:
        return len(self.vertex_cells)

    @property
    def euler_characteristic(self) -> int:
        return self.nvertices - self.nedges + self.ncells

    @property
    def name(self) -> str:
        if self.kind == "cubed-sphere":
            return f"C{self.shape[0]}"
        flags = "".join(a for a, p in zip("xy", self.periodic) if p) or "none"
        return f"{self.shape[0]}x{self.shape[1]}:{flags}"

    def vertex_neighbours(self) -> list[np.ndarray]:
        """Cells sharing at least one vertex with each cell (excluding itself)."""
        out = []
        for c, verts in enumerate(self.cell_vertices):
            nb = set()
            for v in verts:
                nb.update(self.vertex_cells[v])
            nb.discard(c)
            out.append(np.array(sorted(nb), dtype=np.int64))
        return out

    def edge_owner_cell(self) -> np.ndarray:
        """Smallest incident cell id for every edge."""
        return self.edge_cells[:, 0].copy()

    def vertex_owner_cell(self) -> np.ndarray:
        return np.array([cells[0] for cells in self.vertex_cells], dtype=np.int64)


def _finish(kind, shape, periodic, cell_vertices, edge_keys_per_cell, nverts, coords, cell_index):
    """Number edges by first appearance and derive the adjacency tables."""
    ncells = len(cell_vertices)
    edge_ids: dict = {}
    cell_edges = np.empty((ncells, 4), dtype=np.int64)
    edge_vertices = []
    for c in range(ncells):
        for e in range(4):
            key = edge_keys_per_cell[c][e]
            eid = edge_ids.get(key)
            if eid is None:
                eid = len(edge_vertices)
                edge_ids[key] = eid
                edge_vertices.append((cell_vertices[c, e], cell_vertices[c, (e + 1) % 4]))
            cell_edges[c, e] = eid
    nedges = len(edge_vertices)
    edge_cells = np.full((nedges, 2), -1, dtype=np.int64)
    for c in range(ncells):
        for eid in cell_edges[c]:
            slot = 0 if edge_cells[eid, 0] < 0 else 1
            if slot == 1 and edge_cells[eid, 1] >= 0:
                raise MeshError(f"edge {eid} has more than two incident cells")
            edge_cells[eid, slot] = c
    cell_neighbours = np.full((ncells, 4), -1, dtype=np.int64)
    cell_edge_sign = np.ones((ncells, 4), dtype=np.int64)
    for c in range(ncells):
        for e, eid in enumerate(cell_edges[c]):
            a, b = edge_cells[eid]
            if a == c:
                cell_neighbours[c, e] = b
            else:
                cell_neighbours[c, e] = a
                cell_edge_sign[c, e] = -1
    vcells: list[list[int]] = [[] for _ in range(nverts)]
    for c in range(ncells):
        for v in cell_vertices[c]:
            vcells[v].append(c)
    vertex_cells = tuple(np.array(sorted(set(x)), dtype=np.int64) for x in vcells)
    return GlobalMesh2D(
        kind=kind,
        shape=shape,
        periodic=periodic,
        cell_vertices=cell_vertices,
        cell_edges=cell_edges,
        edge_vertices=np.array(edge_vertices, dtype=np.int64).reshape(nedges, 2),
        edge_cells=edge_cells,
        cell_neighbours=cell_neighbours,
        cell_edge_sign=cell_edge_sign,
        vertex_cells=vertex_cells,
        cell_index=cell_index,
        coords=coords,
    )


def build_cubed_sphere(n: int) -> GlobalMesh2D:
    """Equi-angular cubed sphere with ``n x n`` cells per panel.

    Cell ``p*n*n + j*n + i`` is cell ``(i, j)`` of panel ``p``.
    """
    if n < 1:
        raise MeshError("cubed-sphere resolution must be >= 1")
    vid: dict = {}
    lattice = []

    def vertex(p, i, j):
        o, u, v = _PANELS[p]
        key = tuple(o[a] * n + u[a] * i + v[a] * j for a in range(3))
        idx = vid.get(key)
        if idx is None:
            idx = len(lattice)
            vid[key] = idx
            lattice.append(key)
        return idx

    for p in range(6):
        for j in range(n + 1):
            for i in range(n + 1):
                vertex(p, i, j)

    ncells = 6 * n * n
    cell_vertices = np.empty((ncells, 4), dtype=np.int64)
    cell_index = np.empty((ncells, 3), dtype=np.int64)
    for p in range(6):
        for j in range(n):
            for i in range(n):
                c = p * n * n + j * n + i
                cell_vertices[c] = (vertex(p, i, j), vertex(p, i + 1, j),
                                    vertex(p, i + 1, j + 1), vertex(p, i, j + 1))
                cell_index[c] = (p, i, j)
    edge_keys = [[tuple(sorted((cv[e], cv[(e + 1) % 4]))) for e in range(4)]
                 for cv in cell_vertices]

    # tan(pi/4 * t) per component is the gnomonic equi-angular map on each face
    # and agrees on shared panel edges, where the face coordinate is +-1.
    t = 2.0 * np.array(lattice, dtype=float) / n - 1.0
    xyz = np.tan(0.25 * math.pi * t)
    xyz /= np.linalg.norm(xyz, axis=1)[:, None]
    return _finish("cubed-sphere", (n,), (True, True), cell_vertices, edge_keys,
                   len(lattice), xyz, cell_index)


def build_planar(nx: int, ny: int, periodic_x: bool = True, periodic_y: bool = True) -> GlobalMesh2D:
    """Structured ``nx x ny`` quadrilateral grid; cell ``j*nx + i``."""
    if nx < 1 or ny < 1:
        raise MeshError("planar mesh needs nx, ny >= 1")
    if periodic_x and periodic_y and (nx < 3 or ny < 3):
        raise MeshError("biperiodic planar mesh needs nx, ny >= 3")
    if (periodic_x and nx < 2) or (periodic_y and ny < 2):
        raise MeshError("a periodic direction needs at least 2 cells")
    nvx = nx if periodic_x else nx + 1
    nvy = ny if periodic_y else ny + 1

    def wx(i):
        return i % nvx if periodic_x else i

    def wy(j):
        return j % nvy if periodic_y else j

    def vid(i, j):
        return wy(j) * nvx + wx(i)

    ncells = nx * ny
    cell_vertices = np.empty((ncells, 4), dtype=np.int64)
    cell_index = np.zeros((ncells, 3), dtype=np.int64)
    edge_keys = []
    for j in range(ny):
        for i in range(nx):
            c = j * nx + i
            cell_vertices[c] = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1))
            cell_index[c] = (0, i, j)
            # edges keyed structurally: a vertex-pair key would merge the two
            # distinct edges between the same vertices when a period is 2
            edge_keys.append((("x", wx(i), wy(j)), ("y", wx(i + 1), wy(j)),
                              ("x", wx(i), wy(j + 1)), ("y", wx(i), wy(j))))
    coords = np.array([(i, j) for j in range(nvy) for i in range(nvx)], dtype=float)
    return _finish("planar", (nx, ny), (bool(periodic_x), bool(periodic_y)),
                   cell_vertices, edge_keys, nvx * nvy, coords, cell_index)


def parse_mesh_spec(spec: str) -> GlobalMesh2D:
    """Build a mesh from ``Cn`` or ``NXxNY[:x|:y|:xy|:none]`` (biperiodic default)."""
    s = spec.strip()
    try:
        if s[:1] in "cC":
            return build_cubed_sphere(int(s[1:]))
        dims, _, flags = s.partition(":")
        nx, ny = (int(x) for x in dims.lower().split("x"))
    except (ValueError, IndexError):
        raise MeshError(f"invalid mesh spec {spec!r}") from None
    flags = flags.lower() or "xy"
    if flags == "none":
        flags = ""
    if set(flags) - set("xy"):
        raise MeshError(f"invalid periodicity flags in {spec!r}")
    return build_planar(nx, ny, "x" in flags, "y" in flags)


def coarsen(mesh: GlobalMesh2D) -> tuple[GlobalMesh2D, np.ndarray]:
    """2x horizontal coarsening; returns the coarse mesh and fine->coarse parent ids."""
    idx = mesh.cell_index
    if mesh.kind == "cubed-sphere":
        n = mesh.shape[0]
        if n % 2:
            raise MeshError(f"C{n} cannot be coarsened")
        coarse = build_cubed_sphere(n // 2)
        m = n // 2
        parent = idx[:, 0] * m * m + (idx[:, 2] // 2) * m + idx[:, 1] // 2
    else:
        nx, ny = mesh.shape
        if nx % 2 or ny % 2:
            raise MeshError(f"{nx}x{ny} cannot be coarsened")
        coarse = build_planar(nx // 2, ny // 2, *mesh.periodic)
        parent = (idx[:, 2] // 2) * (nx // 2) + idx[:, 1] // 2
    return coarse, parent.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Partition:
    """Ownership of global cells plus per-rank halo layers.

    ``halos[r][d-1]`` lists (ascending) the depth-``d`` halo cells of rank ``r``.
    """

    nranks: int
    max_halo_depth: int
    owner: np.ndarray                    # (F,) owning rank per global cell
    owned: tuple                         # per rank, ascending global ids
    halos: tuple                         # per rank, tuple of per-depth arrays
    strategy: str = "single"


def _balanced_bounds(n: int, parts: int) -> list[int]:
    return [(b * n) // parts for b in range(parts + 1)]


def _planar_tiling(nx: int, ny: int, nranks: int):
    best = None
    for px in range(1, nranks + 1):
        if nranks % px:
            continue
        py = nranks // px
        if px > nx or py > ny:
            continue
        key = (abs(nx / px - ny / py), px)
        if best is None or key < best[0]:
            best = (key, px, py)
    return None if best is None else best[1:]


def _serpentine_order(mesh: GlobalMesh2D) -> np.ndarray:
    idx = mesh.cell_index
    i = np.where(idx[:, 2] % 2 == 0, idx[:, 1], -idx[:, 1])
    return np.lexsort((i, idx[:, 2], idx[:, 0]))


def partition(mesh: GlobalMesh2D, nranks: int, max_halo_depth: int = 1) -> Partition:
    """Deterministic block partition with vertex-adjacency halo layers.

    Planar meshes use a rectangular ``px x py`` tiling; cubed spheres use a
    ``k x k`` tiling of every panel when ``nranks == 6 k^2``.  Otherwise cells are
    split into contiguous ranges of a panel-major serpentine ordering.
    """
    if nranks < 1:
        raise MeshError("nranks must be >= 1")
    if nranks > mesh.ncells:
        raise MeshError(f"nranks={nranks} exceeds cell count {mesh.ncells}")
    if max_halo_depth < 0:
        raise MeshError("max_halo_depth must be >= 0")
    idx = mesh.cell_index
    owner = None
    strategy = "single"
    if nranks == 1:
        owner = np.zeros(mesh.ncells, dtype=np.int64)
    elif mesh.kind == "planar":
        tiling = _planar_tiling(*mesh.shape, nranks)
        if tiling is not None:
            px, py = tiling
            bx = np.searchsorted(_balanced_bounds(mesh.shape[0], px), idx[:, 1], side="right") - 1
            by = np.searchsorted(_balanced_bounds(mesh.shape[1], py), idx[:, 2], side="right") - 1
            owner = by * px + bx
            strategy = f"tiles{px}x{py}"
    else:
        n = mesh.shape[0]
        k = math.isqrt(nranks // 6)
        if nranks % 6 == 0 and 6 * k * k == nranks and k <= n:
            bounds = _balanced_bounds(n, k)
            bx = np.searchsorted(bounds, idx[:, 1], side="right") - 1
            by = np.searchsorted(bounds, idx[:, 2], side="right") - 1
            owner = idx[:, 0] * k * k + by * k + bx
            strategy = f"panels{k}x{k}"
    if owner is None:
        order = _serpentine_order(mesh)
        bounds = _balanced_bounds(mesh.ncells, nranks)
        owner = np.empty(mesh.ncells, dtype=np.int64)
        for r in range(nranks):
            owner[order[bounds[r]:bounds[r + 1]]] = r
        strategy = "serpentine"
    owner = owner.astype(np.int64)

    nbrs = mesh.vertex_neighbours() if max_halo_depth > 0 and nranks > 1 else None
    owned = []
    halos = []
    for r in range(nranks):
        mine = np.flatnonzero(owner == r)
        owned.append(mine)
        layers = []
        if nbrs is not None:
            seen = set(mine.tolist())
            front = mine
            for _ in range(max_halo_depth):
                nxt = set()
                for c in front:
                    nxt.update(nbrs[c].tolist())
                nxt -= seen
                layer = np.array(sorted(nxt), dtype=np.int64)
                seen |= nxt
                layers.append(layer)
                front = layer
        else:
            layers = [np.empty(0, dtype=np.int64) for _ in range(max_halo_depth)]
        halos.append(tuple(layers))
    return Partition(nranks=nranks, max_halo_depth=max_halo_depth, owner=owner,
                     owned=tuple(owned), halos=tuple(halos), strategy=strategy)


@dataclass(frozen=True, eq=False)
class LocalMesh3D:
    """One rank's extruded view: owned cells first, then halo cells by depth.

    The vertical direction is implicit: a column is one local cell and
    ``nlayers`` cells are stacked above it.
    """

    global_mesh: GlobalMesh2D
    partition: Partition
    rank: int
    nlayers: int
    cells: np.ndarray          # local -> global cell id
    cell_depth: np.ndarray     # 0 owned, d for depth-d halo
    halo_ends: tuple           # halo_ends[d] = number of local cells with depth <= d
    g2l: dict = field(repr=False)

    @property
    def ncells(self) -> int:
        return len(self.cells)

    @property
    def n_owned(self) -> int:
        return self.halo_ends[0]

    @property
    def max_halo_depth(self) -> int:
        return self.partition.max_halo_depth

    def last_cell(self, depth: int = 0) -> int:
        """Number of local cells in the owned region widened by ``depth`` halo layers."""
        if depth < 0 or depth > self.max_halo_depth:
            raise MeshError(f"halo depth {depth} outside 0..{self.max_halo_depth}")
        return self.halo_ends[depth]

    @cached_property
    def global_to_local(self) -> np.ndarray:
        """(F,) local index per global cell, -1 when not local."""
        out = np.full(self.global_mesh.ncells, -1, dtype=np.int64)
        out[self.cells] = np.arange(self.ncells, dtype=np.int64)
        return out

    @cached_property
    def _neighbours(self) -> np.ndarray:
        gn = self.global_mesh.cell_neighbours[self.cells]
        out = np.where(gn >= 0, self.global_to_local[np.maximum(gn, 0)], -1)
        return np.ascontiguousarray(out, dtype=np.int64)

    def local_neighbours(self) -> np.ndarray:
        """Edge neighbours in local numbering; -1 if absent or not local."""
        return self._neighbours

    @cached_property
    def _edge_sign(self) -> np.ndarray:
        return np.ascontiguousarray(self.global_mesh.cell_edge_sign[self.cells], dtype=np.int64)

    def local_edge_sign(self) -> np.ndarray:
        """+1 where the local cell is the first cell of its edge, else -1."""
        return self._edge_sign

    def local_vertices(self) -> np.ndarray:
        return np.unique(self.global_mesh.cell_vertices[self.cells])

    def local_edges(self) -> np.ndarray:
        return np.unique(self.global_mesh.cell_edges[self.cells])


def extrude(mesh: GlobalMesh2D, part: Partition, rank: int, nlayers: int) -> LocalMesh3D:
    if not 0 <= rank < part.nranks:
        raise MeshError(f"rank {rank} outside 0..{part.nranks - 1}")
    if nlayers < 1:
        raise MeshError("nlayers must be >= 1")
    groups = [part.owned[rank], *part.halos[rank]]
    cells = np.concatenate(groups).astype(np.int64)
    depth = np.concatenate([np.full(len(g), d, dtype=np.int64) for d, g in enumerate(groups)])
    ends = tuple(int(x) for x in np.cumsum([len(g) for g in groups]))
    g2l = {int(g): i for i, g in enumerate(cells)}
    return LocalMesh3D(global_mesh=mesh, partition=part, rank=rank, nlayers=nlayers,
                       cells=cells, cell_depth=depth, halo_ends=ends, g2l=g2l)


@dataclass(frozen=True, eq=False)
class Colouring:
    """Cells grouped so that no two cells of one colour share a vertex."""

    colour_of: np.ndarray      # (ncells,) colour per local cell
    members: tuple             # per colour, ascending local cell indices

    @property
    def ncolours(self) -> int:
        return len(self.members)

    def cells(self, colour: int, upto: int | None = None) -> np.ndarray:
        """Cells of ``colour`` with local index below ``upto`` (all if None)."""
        m = self.members[colour]
        if upto is None:
            return m
        return m[: np.searchsorted(m, upto)]


def colour(local: LocalMesh3D) -> Colouring:
    """Greedy colouring in ascending local cell order, smallest feasible colour."""
    gm = local.global_mesh
    ncells = local.ncells
    vert_local: dict[int, list[int]] = {}
    for lc, g in enumerate(local.cells):
        for v in gm.cell_vertices[g]:
            vert_local.setdefault(int(v), []).append(lc)
    colour_of = np.full(ncells, -1, dtype=np.int64)
    for lc, g in enumerate(local.cells):
        used = set()
        for v in gm.cell_vertices[g]:
            for other in vert_local[int(v)]:
                if colour_of[other] >= 0:
                    used.add(int(colour_of[other]))
        c = 0
        while c in used:
            c += 1
        colour_of[lc] = c
    ncol = int(colour_of.max()) + 1 if ncells else 0
    members = tuple(np.flatnonzero(colour_of == c) for c in range(ncol))
    return Colouring(colour_of=colour_of, members=members)


def dump_mesh(mesh: GlobalMesh2D) -> str:
    """Plain-text listing, one entity per line in ascending id order."""
    lines = [f"# {mesh.kind} {mesh.name} V={mesh.nvertices} E={mesh.nedges} F={mesh.ncells}"]
    for v, xyz in enumerate(mesh.coords):
        lines.append("vertex %d %s" % (v, " ".join(f"{x:.12f}" for x in xyz)))
    for e, (a, b) in enumerate(mesh.edge_vertices):
        lines.append(f"edge {e} {a} {b}")
    for c in range(mesh.ncells):
        vs = " ".join(str(x) for x in mesh.cell_vertices[c])
        es = " ".join(str(x) for x in mesh.cell_edges[c])
        lines.append(f"cell {c} {vs} {es}")
    return "\n".join(lines) + "\n"
