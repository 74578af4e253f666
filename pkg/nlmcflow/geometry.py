"""
Geometry for nlmcflow: fine triangular meshes, fracture sets, coarse grids and
oversampled regions.

Responsibilities:
- Generate structured meshes and read/write the MESH2D text format
- Label fracture networks (connected components of touching/crossing segments)
- Match DFM fractures to mesh facets; clip EFM fractures to mesh cells
- Build the coarse grid with its fragment table and oversampled regions

All objects are immutable after construction.
"""
from __future__ import annotations

import math
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import LineString, Point
from shapely.strtree import STRtree

from . import BOUNDARY
from .exceptions import GeometryError, InputError


logger = logging.getLogger("nlmcflow.geometry")

# Fragments and clipped pieces shorter than this fraction of the domain diameter are dropped.
SLIVER_TOL = 1.0e-12
# Endpoint matching tolerance, relative to the domain diameter.
MATCH_TOL = 1.0e-9

MODES = ("dfm", "efm")


@dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InputError(f"degenerate rectangle {self.as_list()}")

    @classmethod
    def from_bounds(cls, bounds: Union["Rectangle", Sequence[float]]) -> "Rectangle":
        if isinstance(bounds, Rectangle):
            return bounds
        if len(bounds) != 4:
            raise InputError(f"rectangle needs [x0, y0, x1, y1], got {bounds}")
        return cls(*(float(b) for b in bounds))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diameter(self) -> float:
        return math.hypot(self.width, self.height)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Closed containment (with tolerance) for an (n, 2) array of points."""
        p = np.atleast_2d(points)
        return (
            (p[:, 0] >= self.x0 - tol) & (p[:, 0] <= self.x1 + tol)
            & (p[:, 1] >= self.y0 - tol) & (p[:, 1] <= self.y1 + tol)
        )

    def contains_half_open(self, points: np.ndarray) -> np.ndarray:
        """x0 <= x < x1 and y0 <= y < y1, so adjacent regions never share a point."""
        p = np.atleast_2d(points)
        return (p[:, 0] >= self.x0) & (p[:, 0] < self.x1) & (p[:, 1] >= self.y0) & (p[:, 1] < self.y1)


UNIT_SQUARE = Rectangle(0.0, 0.0, 1.0, 1.0)


# ---------------------- Fine mesh ----------------------
@dataclass(frozen=True, eq=False)
class FineMesh:
    """2-D triangular mesh with unique facets and their incident cells.

    ``facet_cells[f] = (left, right)``; ``right`` is ``BOUNDARY`` on the domain boundary.
    """

    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_cells: np.ndarray
    cell_area: np.ndarray
    cell_centroid: np.ndarray
    facet_length: np.ndarray
    facet_midpoint: np.ndarray

    @classmethod
    def from_triangles(cls, vertices: np.ndarray, cells: np.ndarray) -> "FineMesh":
        """Build the facet table and validate every mesh invariant."""
        verts = np.asarray(vertices, dtype=float)
        tri = np.asarray(cells, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise InputError("vertices must be an (n, 2) array")
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise InputError("cells must be an (m, 3) array of vertex indices")
        if len(tri) == 0:
            raise GeometryError("mesh check 'nonempty' failed: no cells")
        if tri.min() < 0 or tri.max() >= len(verts):
            raise GeometryError("mesh check 'vertex_index' failed: cell references an unknown vertex")

        p = verts[tri]
        signed = 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )
        bad = np.flatnonzero(signed <= 0.0)
        if bad.size:
            raise GeometryError(
                f"mesh check 'orientation' failed: cell {int(bad[0])} has non-positive signed area {signed[bad[0]]:.3e}"
            )
        _, dup_counts = np.unique(np.sort(tri, axis=1), axis=0, return_counts=True)
        if dup_counts.max() > 1:
            raise GeometryError("mesh check 'facet_manifold' failed: repeated cell (facet with more than two cells)")

        directed = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        owner = np.repeat(np.arange(len(tri)), 3)
        facets, inverse, counts = np.unique(
            np.sort(directed, axis=1), axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            f = int(np.argmax(counts))
            raise GeometryError(
                f"mesh check 'facet_manifold' failed: facet {facets[f].tolist()} has {counts[f]} incident cells"
            )
        order = np.argsort(inverse, kind="stable")
        starts = np.searchsorted(inverse[order], np.arange(len(facets)))
        first = order[starts]
        facet_cells = np.full((len(facets), 2), BOUNDARY, dtype=np.int64)
        facet_cells[:, 0] = owner[first]
        interior = counts == 2
        second = order[starts[interior] + 1]
        facet_cells[interior, 1] = owner[second]
        # Neighbours must traverse a shared facet in opposite directions
        if np.any(np.all(directed[first[interior]] == directed[second], axis=1)):
            raise GeometryError("mesh check 'orientation' failed: inconsistent orientation across a facet")

        # Divergence theorem over the boundary facets must reproduce the total area
        bnd = directed[first[~interior]]
        a, b = verts[bnd[:, 0]], verts[bnd[:, 1]]
        enclosed = 0.5 * float(np.sum(a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1]))
        total = float(signed.sum())
        if abs(enclosed - total) > 1e-10 * total:
            raise GeometryError(
                f"mesh check 'area' failed: cells cover {total:.12g} but the boundary encloses {enclosed:.12g}"
            )

        ends = verts[facets]
        return cls(
            vertices=verts,
            cells=tri,
            facets=facets.astype(np.int64),
            facet_cells=facet_cells,
            cell_area=signed,
            cell_centroid=p.mean(axis=1),
            facet_length=np.hypot(*(ends[:, 1] - ends[:, 0]).T),
            facet_midpoint=ends.mean(axis=1),
        )

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] != BOUNDARY)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] == BOUNDARY)

    @property
    def euler_characteristic(self) -> int:
        """V - E + F; equals 1 for a mesh of a simply connected domain."""
        return self.n_vertices - self.n_facets + self.n_cells

    @cached_property
    def bounds(self) -> Rectangle:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return Rectangle(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    @property
    def diameter(self) -> float:
        return self.bounds.diameter

    @property
    def total_area(self) -> float:
        return float(self.cell_area.sum())

    @cached_property
    def facet_index(self) -> Dict[Tuple[int, int], int]:
        return {(int(a), int(b)): f for f, (a, b) in enumerate(self.facets)}

    @cached_property
    def cell_polygons(self) -> np.ndarray:
        return shapely.polygons(self.vertices[self.cells])

    @cached_property
    def cell_tree(self) -> STRtree:
        return STRtree(self.cell_polygons)


def generate_structured_mesh(nx_: int, ny_: int, domain: Union[Rectangle, Sequence[float]] = UNIT_SQUARE) -> FineMesh:
    """Structured mesh of ``nx_ * ny_`` quads, each split along its (x0,y0)-(x1,y1) diagonal.

    Cell ``2 * (j * nx_ + i)`` is the lower triangle of quad (i, j), the next one the upper.
    """
    if int(nx_) != nx_ or int(ny_) != ny_ or nx_ < 1 or ny_ < 1:
        raise InputError(f"structured mesh needs nx, ny >= 1, got ({nx_}, {ny_})")
    nx_, ny_ = int(nx_), int(ny_)
    rect = Rectangle.from_bounds(domain)
    xs = np.linspace(rect.x0, rect.x1, nx_ + 1)
    ys = np.linspace(rect.y0, rect.y1, ny_ + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny_), np.arange(nx_), indexing="ij")
    v00 = (j * (nx_ + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx_ + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    mesh = FineMesh.from_triangles(vertices, cells)
    logger.info("Generated structured mesh %dx%d: %d cells, %d facets", nx_, ny_, mesh.n_cells, mesh.n_facets)
    return mesh


# ---------------------- Mesh text format ----------------------
@dataclass(frozen=True)
class MeshFile:
    """Contents of a MESH2D file: the mesh and its optional fracture records."""

    mesh: FineMesh
    segments: np.ndarray
    network_hints: np.ndarray
    fracture_ids: np.ndarray


def _content_lines(path: str) -> List[Tuple[int, List[str]]]:
    out = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                out.append((lineno, line.split()))
    return out


def _section_header(rows, pos: int, name: str, path: str) -> int:
    if pos >= len(rows):
        raise InputError(f"{path}: missing section {name}")
    lineno, parts = rows[pos]
    if parts[0] != name or len(parts) != 2:
        raise InputError(f"{path}:{lineno}: expected '{name} <count>', got {' '.join(parts)!r}")
    try:
        n = int(parts[1])
    except ValueError:
        raise InputError(f"{path}:{lineno}: invalid count {parts[1]!r}") from None
    if n < 0:
        raise InputError(f"{path}:{lineno}: negative count")
    return n


def _section_rows(rows, pos: int, n: int, width: Sequence[int], cast, path: str) -> List[list]:
    if pos + n > len(rows):
        raise InputError(f"{path}: unexpected end of file, {n} records expected")
    values = []
    for lineno, parts in rows[pos:pos + n]:
        if len(parts) not in width:
            raise InputError(f"{path}:{lineno}: expected {' or '.join(map(str, width))} values, got {len(parts)}")
        try:
            values.append([cast(v) for v in parts])
        except ValueError:
            raise InputError(f"{path}:{lineno}: cannot parse {' '.join(parts)!r}") from None
    return values


def read_mesh_file(path: str) -> MeshFile:
    """Parse a MESH2D file (vertices, cells, optional fractures) and validate the mesh."""
    rows = _content_lines(path)
    if not rows or rows[0][1] != ["MESH2D"]:
        lineno = rows[0][0] if rows else 1
        raise InputError(f"{path}:{lineno}: missing MESH2D header")
    pos = 1
    nv = _section_header(rows, pos, "VERTICES", path)
    vertices = _section_rows(rows, pos + 1, nv, (2,), float, path)
    pos += 1 + nv
    nc = _section_header(rows, pos, "CELLS", path)
    cells = _section_rows(rows, pos + 1, nc, (3,), int, path)
    pos += 1 + nc
    segments = np.zeros((0, 2, 2))
    hints = np.zeros(0, dtype=np.int64)
    fracture_ids = np.zeros(0, dtype=np.int64)
    if pos < len(rows):
        nf = _section_header(rows, pos, "FRACTURES", path)
        recs = _section_rows(rows, pos + 1, nf, (5, 6), float, path)
        pos += 1 + nf
        if nf:
            segments = np.array([r[:4] for r in recs], dtype=float).reshape(-1, 2, 2)
            hints = np.array([int(r[4]) for r in recs], dtype=np.int64)
            fracture_ids = np.array([int(r[5]) if len(r) == 6 else k for k, r in enumerate(recs)], dtype=np.int64)
    if pos < len(rows):
        raise InputError(f"{path}:{rows[pos][0]}: unexpected content after the last section")
    mesh = FineMesh.from_triangles(np.array(vertices, dtype=float).reshape(-1, 2), np.array(cells, dtype=np.int64).reshape(-1, 3))
    logger.info("Read mesh %s: %d cells, %d fracture segments", path, mesh.n_cells, len(segments))
    return MeshFile(mesh=mesh, segments=segments, network_hints=hints, fracture_ids=fracture_ids)


def read_mesh(path: str) -> FineMesh:
    return read_mesh_file(path).mesh


def write_mesh(path: str, mesh: FineMesh, fractures: Optional["FractureGeometry"] = None,
               network_hints: Optional[np.ndarray] = None) -> str:
    lines = ["MESH2D", f"VERTICES {mesh.n_vertices}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.cells]
    if fractures is not None:
        hints = np.full(fractures.n_segments, -1) if network_hints is None else network_hints
        lines.append(f"FRACTURES {fractures.n_segments}")
        for (p, q), h, fid in zip(fractures.segments, hints, fractures.fracture_id):
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {q[0]:.17g} {q[1]:.17g} {int(h)} {int(fid)}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_cell_data(path: str, n_cells: Optional[int] = None) -> np.ndarray:
    """Read a ``CELLDATA m`` file (one value per cell, in cell order)."""
    rows = _content_lines(path)
    m = _section_header(rows, 0, "CELLDATA", path)
    values = np.array(_section_rows(rows, 1, m, (1,), float, path), dtype=float).reshape(-1)
    if len(rows) > 1 + m:
        raise InputError(f"{path}:{rows[1 + m][0]}: unexpected content after CELLDATA records")
    if n_cells is not None and m != n_cells:
        raise InputError(f"{path}: CELLDATA has {m} values but the mesh has {n_cells} cells")
    return values


def write_cell_data(path: str, values: np.ndarray) -> str:
    values = np.asarray(values, dtype=float).reshape(-1)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"CELLDATA {len(values)}\n")
        f.writelines(f"{v:.17g}\n" for v in values)
    return path


# ---------------------- Fractures ----------------------
@dataclass(frozen=True, eq=False)
class FractureGeometry:
    """Straight fracture segments with their network labels.

    ``fracture_id`` names the generated/declared fracture a segment belongs to
    (a DFM fracture is a chain of facet segments).
    """

    segments: np.ndarray
    network_id: np.ndarray
    mode: str
    fracture_id: np.ndarray

    @classmethod
    def empty(cls, mode: str) -> "FractureGeometry":
        _check_mode(mode)
        return cls(np.zeros((0, 2, 2)), np.zeros(0, dtype=np.int64), mode, np.zeros(0, dtype=np.int64))

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_networks(self) -> int:
        return int(self.network_id.max()) + 1 if self.n_segments else 0

    @property
    def n_fractures(self) -> int:
        return int(self.fracture_id.max()) + 1 if self.n_segments else 0

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.hypot(*(self.segments[:, 1] - self.segments[:, 0]).T) if self.n_segments else np.zeros(0)

    def network_length(self, network: int) -> float:
        return float(self.lengths[self.network_id == network].sum())


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise InputError(f"fracture mode must be one of {MODES}, got {mode!r}")


def _touching_pairs(segments: np.ndarray, tol: float) -> np.ndarray:
    """Pairs (i < j) of segments that share a point (endpoint contact or crossing)."""
    lines = shapely.linestrings(segments)
    tree = STRtree(lines)
    pairs = tree.query(lines, predicate="dwithin", distance=tol)
    pairs = pairs[:, pairs[0] < pairs[1]]
    return np.ascontiguousarray(pairs.T)


def label_networks(segments, mode: str = "efm", network_hints: Optional[Sequence[int]] = None,
                   fracture_ids: Optional[Sequence[int]] = None, tol: Optional[float] = None) -> FractureGeometry:
    """Label segments with connected-component network ids.

    Segments are adjacent when they share an endpoint or cross; segments with the
    same non-negative hint (or the same fracture id) are always joined. Labels are
    numbered by their smallest segment index.
    """
    _check_mode(mode)
    segs = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    if len(segs) == 0:
        raise InputError("label_networks needs at least one segment")
    k = len(segs)
    fids = np.arange(k, dtype=np.int64) if fracture_ids is None else np.asarray(fracture_ids, dtype=np.int64)
    if tol is None:
        pts = segs.reshape(-1, 2)
        diam = float(np.hypot(*(pts.max(axis=0) - pts.min(axis=0))))
        tol = MATCH_TOL * max(diam, 1.0e-300)

    graph = nx.Graph()
    graph.add_nodes_from(range(k))
    graph.add_edges_from(map(tuple, _touching_pairs(segs, tol)))
    groups: Dict[Tuple[str, int], List[int]] = {}
    if network_hints is not None:
        for idx, h in enumerate(network_hints):
            if int(h) >= 0:
                groups.setdefault(("hint", int(h)), []).append(idx)
    for idx, fid in enumerate(fids):
        groups.setdefault(("fracture", int(fid)), []).append(idx)
    for members in groups.values():
        graph.add_edges_from(zip(members[:-1], members[1:]))

    labels = np.empty(k, dtype=np.int64)
    for label, comp in enumerate(sorted(nx.connected_components(graph), key=min)):
        labels[list(comp)] = label
    logger.info("Labelled %d fracture segments into %d networks", k, labels.max() + 1)
    return FractureGeometry(segments=segs, network_id=labels, mode=mode, fracture_id=fids)


def match_fracture_facets(mesh: FineMesh, fractures: FractureGeometry) -> np.ndarray:
    """Facet index of every DFM segment; rejects segments that are not mesh facets."""
    if fractures.n_segments == 0:
        return np.zeros(0, dtype=np.int64)
    tol = MATCH_TOL * mesh.diameter
    dist, idx = cKDTree(mesh.vertices).query(fractures.segments.reshape(-1, 2))
    far = np.flatnonzero(dist > tol)
    if far.size:
        raise GeometryError(
            f"DFM conformity: fracture segment {int(far[0] // 2)} has an endpoint off the mesh vertices"
        )
    pairs = np.sort(idx.reshape(-1, 2), axis=1)
    facets = np.empty(len(pairs), dtype=np.int64)
    for k, (a, b) in enumerate(pairs):
        f = mesh.facet_index.get((int(a), int(b)))
        if f is None:
            raise GeometryError(f"DFM conformity: fracture segment {k} does not coincide with a mesh facet")
        facets[k] = f
    uniq, first, counts = np.unique(facets, return_index=True, return_counts=True)
    if counts.max() > 1:
        f = uniq[np.argmax(counts)]
        dup = np.flatnonzero(facets == f)
        raise GeometryError(f"DFM conformity: fracture segments {dup.tolist()} lie on the same facet {int(f)}")
    return facets


def clip_segment_to_cells(segment, mesh: FineMesh) -> List[Tuple[int, np.ndarray, float]]:
    """Split a segment into the pieces lying in each mesh cell.

    Returns ``(cell, piece (2, 2), length)`` in order along the segment. Pieces
    shorter than the sliver tolerance are merged into their neighbours, so the
    lengths always sum to the segment length.
    """
    seg = np.asarray(segment, dtype=float).reshape(2, 2)
    p, q = seg
    d = q - p
    length = float(np.hypot(*d))
    tol = SLIVER_TOL * mesh.diameter
    if length <= tol:
        return []
    if not np.all(mesh.bounds.contains(seg, tol=MATCH_TOL * mesh.diameter)):
        raise InputError(f"segment {seg.tolist()} leaves the mesh domain")

    line = LineString(seg)
    candidates = mesh.cell_tree.query(line, predicate="intersects")
    if candidates.size == 0:
        raise InputError(f"segment {seg.tolist()} does not intersect any mesh cell")
    rings = shapely.get_exterior_ring(mesh.cell_polygons[candidates])
    coords = shapely.get_coordinates(shapely.intersection(line, rings))
    ts = np.concatenate([[0.0, 1.0], ((coords - p) @ d) / (length * length)])
    ts = np.unique(np.clip(ts, 0.0, 1.0))
    keep = np.concatenate([[True], np.diff(ts) * length > tol])
    ts = ts[keep]
    ts[-1] = 1.0
    if len(ts) < 2:
        ts = np.array([0.0, 1.0])

    pieces: List[Tuple[int, float, float]] = []
    for t0, t1 in zip(ts[:-1], ts[1:]):
        mid = Point(p + 0.5 * (t0 + t1) * d)
        hosts = mesh.cell_tree.query(mid, predicate="intersects")
        if hosts.size == 0:
            raise InputError(f"segment {seg.tolist()} leaves the mesh near {mid.coords[0]}")
        cell = int(hosts.min())
        if pieces and pieces[-1][0] == cell:
            pieces[-1] = (cell, pieces[-1][1], t1)
        else:
            pieces.append((cell, t0, t1))
    return [
        (cell, np.array([p + t0 * d, p + t1 * d]), (t1 - t0) * length)
        for cell, t0, t1 in pieces
    ]


@dataclass(frozen=True, eq=False)
class FractureElements:
    """Fine fracture DOFs: DFM facet segments or EFM clipped sub-segments.

    ``host[k]`` holds the coupled matrix cells (second entry ``BOUNDARY`` when a
    single cell hosts the element); ``adjacency`` lists touching element pairs.
    """

    endpoints: np.ndarray
    host: np.ndarray
    segment: np.ndarray
    network: np.ndarray
    fracture: np.ndarray
    adjacency: np.ndarray
    mode: str

    @property
    def n(self) -> int:
        return len(self.endpoints)

    @cached_property
    def length(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        return np.hypot(*(self.endpoints[:, 1] - self.endpoints[:, 0]).T)

    @cached_property
    def midpoint(self) -> np.ndarray:
        return self.endpoints.mean(axis=1) if self.n else np.zeros((0, 2))


def fracture_elements(mesh: FineMesh, fractures: FractureGeometry) -> FractureElements:
    """Fine fracture DOFs for ``fractures`` on ``mesh`` (DFM facets or EFM clip table)."""
    if fractures.mode == "dfm":
        facets = match_fracture_facets(mesh, fractures)
        endpoints = fractures.segments.copy()
        host = mesh.facet_cells[facets].copy() if len(facets) else np.zeros((0, 2), dtype=np.int64)
        segment = np.arange(fractures.n_segments, dtype=np.int64)
    else:
        ends, hosts, parents = [], [], []
        for k, seg in enumerate(fractures.segments):
            for cell, piece, _ in clip_segment_to_cells(seg, mesh):
                ends.append(piece)
                hosts.append((cell, BOUNDARY))
                parents.append(k)
        if fractures.n_segments and not ends:
            raise GeometryError("EFM clip table is empty although fractures are present")
        endpoints = np.array(ends, dtype=float).reshape(-1, 2, 2)
        host = np.array(hosts, dtype=np.int64).reshape(-1, 2)
        segment = np.array(parents, dtype=np.int64)

    if len(endpoints) > 1:
        adjacency = _touching_pairs(endpoints, MATCH_TOL * mesh.diameter)
    else:
        adjacency = np.zeros((0, 2), dtype=np.int64)
    elements = FractureElements(
        endpoints=endpoints,
        host=host,
        segment=segment,
        network=fractures.network_id[segment] if len(segment) else np.zeros(0, dtype=np.int64),
        fracture=fractures.fracture_id[segment] if len(segment) else np.zeros(0, dtype=np.int64),
        adjacency=adjacency,
        mode=fractures.mode,
    )
    logger.info("Built %d %s fracture elements with %d couplings", elements.n, fractures.mode.upper(), len(adjacency))
    return elements


# ---------------------- Coarse grid ----------------------
@dataclass(frozen=True)
class Fragment:
    """Part of network ``network`` inside coarse cell ``cell``."""

    cell: int
    network: int
    elements: np.ndarray
    measure: float


@dataclass(frozen=True, eq=False)
class CoarseGrid:
    """Uniform rectangular coarse grid with fine-cell membership and fragment table.

    Coarse cell ``iy * nx + ix`` covers column ``ix`` and row ``iy``.
    Fragments are ordered by (cell, network).
    """

    domain: Rectangle
    nx: int
    ny: int
    cell_of_fine: np.ndarray
    fine_area: np.ndarray
    elements: FractureElements
    element_cell: np.ndarray
    fragments: Tuple[Fragment, ...]

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_fragments(self) -> int:
        return len(self.fragments)

    @property
    def hx(self) -> float:
        return self.domain.width / self.nx

    @property
    def hy(self) -> float:
        return self.domain.height / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def position(self, i: int) -> Tuple[int, int]:
        return int(i) % self.nx, int(i) // self.nx

    def index(self, ix: int, iy: int) -> int:
        return int(iy) * self.nx + int(ix)

    def cell_bounds(self, i: int) -> Rectangle:
        ix, iy = self.position(i)
        x0 = self.domain.x0 + ix * self.hx
        y0 = self.domain.y0 + iy * self.hy
        return Rectangle(x0, y0, x0 + self.hx, y0 + self.hy)

    def check_cell(self, i: int) -> int:
        if int(i) != i or not 0 <= i < self.n_cells:
            raise InputError(f"coarse cell index {i} out of range [0, {self.n_cells})")
        return int(i)

    @cached_property
    def fine_cells_of(self) -> List[np.ndarray]:
        return _group(self.cell_of_fine, self.n_cells)

    @cached_property
    def elements_of(self) -> List[np.ndarray]:
        return _group(self.element_cell, self.n_cells)

    @cached_property
    def fragments_by_cell(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in range(self.n_cells)]
        for k, frag in enumerate(self.fragments):
            out[frag.cell].append(k)
        return out

    @cached_property
    def fragment_index(self) -> Dict[Tuple[int, int], int]:
        return {(f.cell, f.network): k for k, f in enumerate(self.fragments)}

    @property
    def fragment_measure(self) -> np.ndarray:
        return np.array([f.measure for f in self.fragments], dtype=float)

    def n_networks_in(self, i: int) -> int:
        """L_i: number of fracture networks present in coarse cell i."""
        return len(self.fragments_by_cell[i])


def _group(labels: np.ndarray, n: int) -> List[np.ndarray]:
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(n)]


def build_coarse_grid(mesh: FineMesh, fractures: FractureGeometry, nx_c: int, ny_c: int,
                      domain: Optional[Union[Rectangle, Sequence[float]]] = None,
                      elements: Optional[FractureElements] = None) -> CoarseGrid:
    """Partition the mesh domain into ``nx_c * ny_c`` rectangles and tabulate fragments.

    Fine cells belong to the coarse cell containing their centroid; a fracture
    element belongs to the coarse cell of its first host cell.
    """
    if int(nx_c) != nx_c or int(ny_c) != ny_c or nx_c < 1 or ny_c < 1:
        raise InputError(f"coarse grid needs nx, ny >= 1, got ({nx_c}, {ny_c})")
    nx_c, ny_c = int(nx_c), int(ny_c)
    rect = mesh.bounds if domain is None else Rectangle.from_bounds(domain)
    c = mesh.cell_centroid
    tol = MATCH_TOL * rect.diameter
    outside = np.flatnonzero(~rect.contains(c, tol=tol))
    if outside.size:
        raise GeometryError(f"fine cell {int(outside[0])} has its centroid outside all coarse cells")
    ix = np.clip(np.floor((c[:, 0] - rect.x0) / (rect.width / nx_c)).astype(np.int64), 0, nx_c - 1)
    iy = np.clip(np.floor((c[:, 1] - rect.y0) / (rect.height / ny_c)).astype(np.int64), 0, ny_c - 1)
    cell_of_fine = iy * nx_c + ix
    empty = np.flatnonzero(np.bincount(cell_of_fine, minlength=nx_c * ny_c) == 0)
    if empty.size:
        raise InputError(f"coarse cell {int(empty[0])} receives no fine cells; "
                         f"coarse grid {nx_c}x{ny_c} is too fine for the mesh")

    if elements is None:
        elements = fracture_elements(mesh, fractures) if fractures.n_segments else _no_elements(fractures.mode)
    element_cell = cell_of_fine[elements.host[:, 0]] if elements.n else np.zeros(0, dtype=np.int64)

    fragments: List[Fragment] = []
    if elements.n:
        order = np.lexsort((elements.network, element_cell))
        keys = np.column_stack([element_cell[order], elements.network[order]])
        splits = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
        threshold = SLIVER_TOL * rect.diameter
        for members in np.split(order, splits):
            measure = float(elements.length[members].sum())
            cell, network = int(element_cell[members[0]]), int(elements.network[members[0]])
            if measure < threshold:
                logger.warning("Discarding sliver fragment (cell %d, network %d) of length %.3e", cell, network, measure)
                continue
            fragments.append(Fragment(cell=cell, network=network, elements=np.sort(members), measure=measure))

    grid = CoarseGrid(
        domain=rect,
        nx=nx_c,
        ny=ny_c,
        cell_of_fine=cell_of_fine,
        fine_area=mesh.cell_area,
        elements=elements,
        element_cell=element_cell,
        fragments=tuple(fragments),
    )
    logger.info("Built coarse grid %dx%d with %d fragments", nx_c, ny_c, grid.n_fragments)
    return grid


def _no_elements(mode: str) -> FractureElements:
    return FractureElements(
        endpoints=np.zeros((0, 2, 2)),
        host=np.zeros((0, 2), dtype=np.int64),
        segment=np.zeros(0, dtype=np.int64),
        network=np.zeros(0, dtype=np.int64),
        fracture=np.zeros(0, dtype=np.int64),
        adjacency=np.zeros((0, 2), dtype=np.int64),
        mode=mode,
    )


# ---------------------- Oversampling ----------------------
@dataclass(frozen=True, eq=False)
class Oversample:
    """K_i^+: coarse cell ``center`` enlarged by ``layers`` rings of neighbours."""

    center: int
    layers: int
    coarse_cells: np.ndarray
    fine_cells: np.ndarray
    elements: np.ndarray

    @property
    def n_local(self) -> int:
        return len(self.fine_cells) + len(self.elements)

    def dofs(self, n_matrix: int) -> np.ndarray:
        """Global fine DOF indices of the region: matrix cells, then fracture elements."""
        return np.concatenate([self.fine_cells, n_matrix + self.elements])

    def contains(self, j: int) -> bool:
        k = np.searchsorted(self.coarse_cells, j)
        return bool(k < len(self.coarse_cells) and self.coarse_cells[k] == j)


def oversample(grid: CoarseGrid, i: int, s: Union[int, float]) -> Oversample:
    """Coarse cells within ``s`` rings (edge and corner neighbours) of cell ``i``."""
    i = grid.check_cell(i)
    if not s >= 1:
        raise InputError(f"oversampling layers must be >= 1, got {s}")
    s = max(grid.nx, grid.ny) if math.isinf(s) else int(s)
    ix, iy = grid.position(i)
    xs = np.arange(max(ix - s, 0), min(ix + s, grid.nx - 1) + 1)
    ys = np.arange(max(iy - s, 0), min(iy + s, grid.ny - 1) + 1)
    members = (ys[:, None] * grid.nx + xs[None, :]).ravel()
    fine = np.sort(np.concatenate([grid.fine_cells_of[j] for j in members]))
    elems = [grid.elements_of[j] for j in members]
    elements = np.sort(np.concatenate(elems)) if elems else np.zeros(0, dtype=np.int64)
    return Oversample(center=i, layers=s, coarse_cells=members, fine_cells=fine, elements=elements.astype(np.int64))


__all__ = [
    "Rectangle",
    "UNIT_SQUARE",
    "FineMesh",
    "MeshFile",
    "FractureGeometry",
    "FractureElements",
    "Fragment",
    "CoarseGrid",
    "Oversample",
    "generate_structured_mesh",
    "read_mesh",
    "read_mesh_file",
    "write_mesh",
    "read_cell_data",
    "write_cell_data",
    "label_networks",
    "match_fracture_facets",
    "clip_segment_to_cells",
    "fracture_elements",
    "build_coarse_grid",
    "oversample",
]
