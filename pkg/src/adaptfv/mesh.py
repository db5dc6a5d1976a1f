"""2D simplicial and polygonal meshes with virtual simplicial submeshes.

Meshes are immutable after construction; refinement returns a new mesh
object, so assembly and estimation may read them concurrently.

Conventions
-----------
* Cells are stored counter-clockwise.  Local edge ``i`` of a cell joins
  loop vertices ``i`` and ``i+1``.
* Every face carries one global unit normal ``n_sigma``.  It points out
  of the cell that registered the face first (the lower cell index), or
  out of the domain for boundary faces.  ``cell_face_signs`` holds
  ``n_K . n_sigma`` per cell edge.
* Polygonal cells carry a simplicial submesh: the barycentric fan, or a
  single triangle when the cell itself is a triangle (used when a
  simplicial mesh is viewed as a polytopal one).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import (DegenerateCell, MeshFormatError, NonManifold,
                     NotAdmissible, NotStarShaped, RefinementLimit)

_ORTHO_ANGLE_TOL = 1e-8


def _shoelace(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _tri_areas(p0, p1, p2):
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p2[..., 0] - p0[..., 0]) * (p1[..., 1] - p0[..., 1]))


def circumcenter(p0, p1, p2):
    """Circumcenter of a triangle, via the standard determinant formula."""
    ax, ay = p0[..., 0], p0[..., 1]
    bx, by = p1[..., 0], p1[..., 1]
    cx, cy = p2[..., 0], p2[..., 1]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay)
          + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx)
          + (cx**2 + cy**2) * (bx - ax)) / d
    return np.stack([ux, uy], axis=-1)


@dataclass
class Submesh:
    """Virtual simplicial submesh of one polygonal cell.

    The canonical variant is the barycentric fan: subtriangle ``i`` is
    ``(v_i, v_{i+1}, x_c)``, exterior subfaces coincide with the cell
    edges and interior subfaces are the spokes ``(v_i, x_c)``.  Triangle
    cells may instead carry the trivial single-triangle submesh (no
    center, no spokes).
    """

    points: np.ndarray            # (n_vk, 2) loop vertices [+ center last]
    tris: np.ndarray              # (n_tri, 3) indices into points
    has_center: bool
    tri_areas: np.ndarray         # (n_tri,)
    # interior subfaces (spokes): local vertex pairs, the two adjacent
    # subtriangles (owner first: the basis flux is oriented out of it)
    int_faces: np.ndarray         # (n_int, 2) vertex index pairs
    int_tris: np.ndarray          # (n_int, 2) (owner tri, neighbor tri)

    @property
    def n_ext(self):
        return len(self.tris) if self.has_center else 3

    @property
    def n_points(self):
        return len(self.points)


def _fan_submesh(pts):
    """Barycentric-fan submesh of a simple CCW polygon; NotStarShaped on failure."""
    m = len(pts)
    center = pts.mean(axis=0)
    points = np.vstack([pts, center])
    tris = np.array([[i, (i + 1) % m, m] for i in range(m)], dtype=np.int64)
    areas = _tri_areas(points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]])
    scale = max(np.abs(areas).max(), 1e-300)
    if np.any(areas <= 1e-13 * scale):
        raise NotStarShaped("cell is not star-shaped w.r.t. its barycenter")
    # spoke i joins vertex i to the center; owner = fan triangle i-1
    int_faces = np.array([[i, m] for i in range(m)], dtype=np.int64)
    int_tris = np.array([[(i - 1) % m, i] for i in range(m)], dtype=np.int64)
    return Submesh(points, tris, True, areas, int_faces, int_tris)


def _trivial_submesh(pts):
    tris = np.array([[0, 1, 2]], dtype=np.int64)
    area = _tri_areas(pts[0], pts[1], pts[2])
    return Submesh(pts.copy(), tris, False, np.array([area]),
                   np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64))


class _FaceTable:
    """Accumulates oriented faces while looping cells in index order."""

    def __init__(self):
        self.index = {}
        self.verts = []
        self.cells = []

    def add(self, a, b, cell):
        key = (a, b) if a < b else (b, a)
        fid = self.index.get(key)
        if fid is None:
            fid = len(self.verts)
            self.index[key] = fid
            self.verts.append((a, b))      # direction as seen from the owner
            self.cells.append([cell, -1])
            return fid, 1
        if self.cells[fid][1] != -1:
            raise NonManifold(f"face {key} referenced by more than two cells")
        self.cells[fid][1] = cell
        return fid, -1


def _face_geometry(vertices, face_verts):
    v0 = vertices[face_verts[:, 0]]
    v1 = vertices[face_verts[:, 1]]
    t = v1 - v0
    lengths = np.hypot(t[:, 0], t[:, 1])
    # owner loops CCW, so its outward normal is the right-hand perp
    normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / lengths[:, None]
    mids = 0.5 * (v0 + v1)
    return lengths, normals, mids


@dataclass
class SimplicialMesh:
    """Conforming triangle mesh.

    ``cells[:, 1:3]`` is the refinement edge for newest-vertex bisection
    (the newest vertex sits first).
    """

    vertices: np.ndarray          # (nv, 2)
    cells: np.ndarray             # (nc, 3), CCW
    faces: np.ndarray             # (nf, 2) vertex pairs, owner direction
    face_cells: np.ndarray        # (nf, 2), -1 marks boundary
    face_normals: np.ndarray      # (nf, 2) global n_sigma
    face_lengths: np.ndarray
    face_midpoints: np.ndarray
    cell_faces: np.ndarray        # (nc, 3) face id of local edge i
    cell_face_signs: np.ndarray   # (nc, 3) n_K . n_sigma
    areas: np.ndarray
    centroids: np.ndarray
    diameters: np.ndarray         # h_K
    inball_diameters: np.ndarray  # iota_K
    circumcenters: np.ndarray     # default collocation points x_K

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def boundary_faces(self):
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @property
    def interior_faces(self):
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    @property
    def shape_regularity(self):
        return float(np.max(self.diameters / self.inball_diameters))

    def cell_points(self, k):
        return self.vertices[self.cells[k]]

    def boundary_vertices(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        b = self.boundary_faces
        mask[self.faces[b].ravel()] = True
        return mask


def build_simplicial(vertices, cell_index_triples, *, refinement_edges="longest"):
    """Build a :class:`SimplicialMesh` from vertex coordinates and triangles.

    Orientation is normalized to counter-clockwise.  With
    ``refinement_edges='longest'`` each cell is rotated so that its
    longest edge becomes the refinement edge ``(cells[k,1], cells[k,2])``;
    ``'keep'`` preserves the given vertex order.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    cells = np.array(cell_index_triples, dtype=np.int64).reshape(-1, 3)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshFormatError("vertices must be (n, 2)")
    if not np.all(np.isfinite(vertices)):
        raise MeshFormatError("non-finite vertex coordinates")
    if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
        raise MeshFormatError("cell index out of range")

    p = vertices[cells]
    areas = _tri_areas(p[:, 0], p[:, 1], p[:, 2])
    flip = areas < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    areas = np.abs(areas)
    p = vertices[cells]
    edge_len = np.stack([np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1)
                         for i in range(3)], axis=1)  # edge opposite vertex i
    h = edge_len.max(axis=1)
    if np.any(areas <= 1e-14 * h**2):
        bad = int(np.argmax(areas <= 1e-14 * h**2))
        raise DegenerateCell(f"cell {bad} has (near) zero area")

    if refinement_edges == "longest":
        k = edge_len.argmax(axis=1)
        rows = np.arange(len(cells))[:, None]
        cells = cells[rows, (k[:, None] + np.arange(3)) % 3]
        p = vertices[cells]

    table = _FaceTable()
    nc = len(cells)
    cell_faces = np.empty((nc, 3), dtype=np.int64)
    cell_face_signs = np.empty((nc, 3), dtype=np.int64)
    for c in range(nc):
        v = cells[c]
        for i in range(3):
            fid, sign = table.add(int(v[i]), int(v[(i + 1) % 3]), c)
            cell_faces[c, i] = fid
            cell_face_signs[c, i] = sign

    faces = np.array(table.verts, dtype=np.int64).reshape(-1, 2)
    face_cells = np.array(table.cells, dtype=np.int64).reshape(-1, 2)
    lengths, normals, mids = _face_geometry(vertices, faces)

    perim = np.linalg.norm(p[:, 1] - p[:, 0], axis=1) \
        + np.linalg.norm(p[:, 2] - p[:, 1], axis=1) \
        + np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    return SimplicialMesh(
        vertices=vertices, cells=cells, faces=faces, face_cells=face_cells,
        face_normals=normals, face_lengths=lengths, face_midpoints=mids,
        cell_faces=cell_faces, cell_face_signs=cell_face_signs,
        areas=areas, centroids=p.mean(axis=1),
        diameters=edge_len.max(axis=1), inball_diameters=4.0 * areas / perim,
        circumcenters=circumcenter(p[:, 0], p[:, 1], p[:, 2]))


def _segments_properly_intersect(a, b, c, d):
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


@dataclass
class PolytopalMesh:
    """Mesh of simple polygons, each with its virtual simplicial submesh.

    Loops may contain collinear (hanging) vertices produced by local
    quadrisection; the face set is built from loop segments, so meshes
    with hanging nodes still have a conforming face graph.
    """

    vertices: np.ndarray
    loops: list                   # list of int64 arrays, CCW
    faces: np.ndarray
    face_cells: np.ndarray
    face_normals: np.ndarray
    face_lengths: np.ndarray
    face_midpoints: np.ndarray
    cell_faces: list              # per cell, face id per loop edge
    cell_face_signs: list
    areas: np.ndarray
    centroids: np.ndarray
    diameters: np.ndarray
    submeshes: list               # per cell Submesh
    cell_levels: np.ndarray       # quadrisection depth bookkeeping
    vertex_cells: list            # cells sharing each vertex
    vertex_faces: list            # polytopal faces sharing each vertex

    @property
    def n_cells(self):
        return len(self.loops)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def boundary_faces(self):
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @property
    def interior_faces(self):
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    def boundary_vertices(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        b = self.boundary_faces
        mask[self.faces[b].ravel()] = True
        return mask

    def cell_points(self, k):
        return self.vertices[self.loops[k]]


def build_polytopal(vertices, cell_loops, *, cell_levels=None, submesh="fan"):
    """Build a :class:`PolytopalMesh` from vertex coordinates and loops.

    Loops are normalized to counter-clockwise.  ``submesh='fan'`` builds
    the barycentric fan for every cell; ``'trivial'`` requires all cells
    to be triangles and attaches single-triangle submeshes.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if not np.all(np.isfinite(vertices)):
        raise MeshFormatError("non-finite vertex coordinates")
    loops = [np.asarray(l, dtype=np.int64) for l in cell_loops]
    nc = len(loops)

    norm_loops = []
    areas = np.empty(nc)
    cents = np.empty((nc, 2))
    diams = np.empty(nc)
    for k, loop in enumerate(loops):
        if len(loop) < 3 or len(np.unique(loop)) != len(loop):
            raise MeshFormatError(f"cell {k}: loop not a simple vertex cycle")
        pts = vertices[loop]
        a = _shoelace(pts)
        if a < 0:
            loop = loop[::-1].copy()
            pts = vertices[loop]
            a = -a
        d = max(np.linalg.norm(pts[i] - pts[j])
                for i in range(len(pts)) for j in range(i + 1, len(pts)))
        if a <= 1e-14 * d**2:
            raise DegenerateCell(f"cell {k} has (near) zero area")
        m = len(pts)
        for i in range(m):
            for j in range(i + 1, m):
                if j == i + 1 or (i == 0 and j == m - 1):
                    continue
                if _segments_properly_intersect(pts[i], pts[(i + 1) % m],
                                                pts[j], pts[(j + 1) % m]):
                    raise MeshFormatError(f"cell {k}: loop self-intersects")
        norm_loops.append(loop)
        areas[k] = a
        cents[k] = pts.mean(axis=0)
        diams[k] = d
    loops = norm_loops

    table = _FaceTable()
    cell_faces, cell_face_signs = [], []
    for c, loop in enumerate(loops):
        fids = np.empty(len(loop), dtype=np.int64)
        sgns = np.empty(len(loop), dtype=np.int64)
        for i in range(len(loop)):
            fid, sign = table.add(int(loop[i]), int(loop[(i + 1) % len(loop)]), c)
            fids[i], sgns[i] = fid, sign
        cell_faces.append(fids)
        cell_face_signs.append(sgns)
    faces = np.array(table.verts, dtype=np.int64).reshape(-1, 2)
    face_cells = np.array(table.cells, dtype=np.int64).reshape(-1, 2)
    lengths, normals, mids = _face_geometry(vertices, faces)

    submeshes = []
    for k, loop in enumerate(loops):
        pts = vertices[loop]
        if submesh == "trivial":
            if len(loop) != 3:
                raise MeshFormatError("trivial submesh requires triangle cells")
            submeshes.append(_trivial_submesh(pts))
        else:
            try:
                submeshes.append(_fan_submesh(pts))
            except NotStarShaped as e:
                raise NotStarShaped(f"cell {k}: {e}") from None

    vertex_cells = [[] for _ in range(len(vertices))]
    for c, loop in enumerate(loops):
        for v in loop:
            vertex_cells[v].append(c)
    vertex_faces = [[] for _ in range(len(vertices))]
    for fid, (a, b) in enumerate(faces):
        vertex_faces[a].append(fid)
        vertex_faces[b].append(fid)

    if cell_levels is None:
        cell_levels = np.zeros(nc, dtype=np.int64)
    return PolytopalMesh(
        vertices=vertices, loops=loops, faces=faces, face_cells=face_cells,
        face_normals=normals, face_lengths=lengths, face_midpoints=mids,
        cell_faces=cell_faces, cell_face_signs=cell_face_signs,
        areas=areas, centroids=cents, diameters=diams, submeshes=submeshes,
        cell_levels=np.asarray(cell_levels, dtype=np.int64),
        vertex_cells=vertex_cells, vertex_faces=vertex_faces)


def as_polytopal(mesh: SimplicialMesh, *, submesh="trivial") -> PolytopalMesh:
    """View a simplicial mesh as a polytopal one (triangle loops)."""
    return build_polytopal(mesh.vertices, [c for c in mesh.cells], submesh=submesh)


Mesh = Union[SimplicialMesh, PolytopalMesh]


# ----------------------------------------------------------------------
# two-point admissibility
# ----------------------------------------------------------------------

@dataclass
class AdmissibilityData:
    """Collocation points and signed two-point distances for TPFA."""

    collocation: str
    points: np.ndarray            # x_K per cell
    d_int: np.ndarray             # signed distance per face (nan on boundary)
    d_bnd: np.ndarray             # signed distance per face (nan on interior)
    boundary_points: np.ndarray   # x_{K,sigma} per face (nan on interior)


def admissibility(mesh: Mesh, collocation: Optional[str] = None,
                  *, rel_tol: float = 1e-10) -> AdmissibilityData:
    """Check two-point admissibility and return collocation data.

    ``collocation`` is ``'circumcenter'`` (triangles only) or
    ``'centroid'``; the default picks circumcenters for simplicial
    meshes and centroids for polytopal ones.  Raises
    :class:`NotAdmissible` when a connecting segment degenerates or is
    not orthogonal to its face within 1e-8 angle.
    """
    simplicial = isinstance(mesh, SimplicialMesh)
    if collocation is None:
        collocation = "circumcenter" if simplicial else "centroid"
    if collocation == "circumcenter":
        if not simplicial:
            raise NotAdmissible("circumcenter collocation needs a simplicial mesh")
        x = mesh.circumcenters
    elif collocation == "centroid":
        x = mesh.centroids
    else:
        raise ValueError(f"unknown collocation {collocation!r}")

    nf = mesh.n_faces
    d_int = np.full(nf, np.nan)
    d_bnd = np.full(nf, np.nan)
    xb = np.full((nf, 2), np.nan)
    K = mesh.face_cells[:, 0]
    L = mesh.face_cells[:, 1]
    nrm = mesh.face_normals
    tol = rel_tol * mesh.diameters[K]

    ii = mesh.interior_faces
    seg = x[L[ii]] - x[K[ii]]
    d = np.einsum("fd,fd->f", seg, nrm[ii])
    bad = np.abs(d) <= tol[ii]
    if np.any(bad):
        fid = int(ii[np.argmax(bad)])
        raise NotAdmissible(f"face {fid}: |d_KL| below tolerance")
    off = seg - d[:, None] * nrm[ii]
    slant = np.hypot(off[:, 0], off[:, 1]) \
        > _ORTHO_ANGLE_TOL * np.hypot(seg[:, 0], seg[:, 1])
    if np.any(slant):
        fid = int(ii[np.argmax(slant)])
        raise NotAdmissible(f"face {fid}: x_K x_L not orthogonal to the face")
    d_int[ii] = d

    bb = mesh.boundary_faces
    db = np.einsum("fd,fd->f", mesh.face_midpoints[bb] - x[K[bb]], nrm[bb])
    bad = np.abs(db) <= tol[bb]
    if np.any(bad):
        fid = int(bb[np.argmax(bad)])
        raise NotAdmissible(f"face {fid}: boundary distance below tolerance")
    p = x[K[bb]] + db[:, None] * nrm[bb]
    v0 = mesh.vertices[mesh.faces[bb, 0]]
    v1 = mesh.vertices[mesh.faces[bb, 1]]
    t = np.einsum("fd,fd->f", p - v0, v1 - v0) / mesh.face_lengths[bb] ** 2
    outside = (t <= 0.0) | (t >= 1.0)
    if np.any(outside):
        fid = int(bb[np.argmax(outside)])
        raise NotAdmissible(f"face {fid}: projection falls outside the face")
    d_bnd[bb] = db
    xb[bb] = p
    return AdmissibilityData(collocation, x, d_int, d_bnd, xb)


# ----------------------------------------------------------------------
# refinement
# ----------------------------------------------------------------------

def _refine_simplicial(mesh: SimplicialMesh, marked) -> SimplicialMesh:
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise IndexError("marked cell out of range")

    cells = mesh.cells
    edges = [tuple(sorted((int(c[(i + 1) % 3]), int(c[(i + 2) % 3]))))
             for c in cells for i in range(3)]
    edges = np.array(edges, dtype=np.int64).reshape(-1, 3, 2)

    marked_edges = set()
    for k in marked:
        marked_edges.add(tuple(edges[k, 0]))   # refinement edge opposite vertex 0
    # closure: a cell with any marked edge must have its refinement edge marked
    for _ in range(mesh.n_faces + 1):
        grew = False
        for k in range(mesh.n_cells):
            ref = tuple(edges[k, 0])
            if ref in marked_edges:
                continue
            if tuple(edges[k, 1]) in marked_edges or tuple(edges[k, 2]) in marked_edges:
                marked_edges.add(ref)
                grew = True
        if not grew:
            break
    else:
        raise RefinementLimit("bisection closure failed to terminate")

    verts = [mesh.vertices]
    new_vertex = {}
    next_id = mesh.n_vertices

    def midpoint(a, b):
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        vid = new_vertex.get(key)
        if vid is None:
            vid = next_id
            next_id += 1
            new_vertex[key] = vid
            verts.append(0.5 * (mesh.vertices[key[0]] + mesh.vertices[key[1]])[None])
        return vid

    out = []

    def bisect(tri):
        v0, v1, v2 = tri
        key = (v1, v2) if v1 < v2 else (v2, v1)
        if key not in marked_edges:
            out.append(tri)
            return
        m = midpoint(v1, v2)
        # children keep newest-vertex-first ordering
        bisect((m, v2, v0))
        bisect((m, v0, v1))

    for c in cells:
        bisect((int(c[0]), int(c[1]), int(c[2])))

    return build_simplicial(np.vstack(verts), out, refinement_edges="keep")


def _true_corners(pts):
    m = len(pts)
    scale = np.max(np.abs(pts)) + 1.0
    corners = []
    for i in range(m):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % m]
        if abs(_tri_areas(a, b, c)) > 1e-12 * scale**2:
            corners.append(i)
    return corners


def _refine_polytopal(mesh: PolytopalMesh, marked, *, closure_limit=64) -> PolytopalMesh:
    marked = set(int(m) for m in marked)
    if not marked:
        return mesh
    levels = mesh.cell_levels

    neighbors = [set() for _ in range(mesh.n_cells)]
    for K, L in mesh.face_cells:
        if L >= 0:
            neighbors[K].add(int(L))
            neighbors[L].add(int(K))

    # 2:1 balance closure keeps at most one hanging node per cell side
    for sweep in range(closure_limit + 1):
        grew = False
        for k in list(marked):
            for nb in neighbors[k]:
                if nb not in marked and levels[nb] < levels[k]:
                    marked.add(nb)
                    grew = True
        if not grew:
            break
    else:
        raise RefinementLimit("quadrisection closure exceeded the depth limit")

    coords = [mesh.vertices]
    next_id = mesh.n_vertices
    mid_of = {}

    def midpoint(a, b):
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        vid = mid_of.get(key)
        if vid is None:
            vid = next_id
            next_id += 1
            mid_of[key] = vid
            coords.append(0.5 * (mesh.vertices[key[0]] + mesh.vertices[key[1]])[None])
        return vid

    # Pass 1: side structure of every refined cell (allocates edge midpoints).
    # A side runs between consecutive true corners and may already carry one
    # hanging node, which by construction sits at the side midpoint.
    refined_sides = {}
    for k in sorted(marked):
        loop = mesh.loops[k]
        ci = _true_corners(mesh.vertices[loop])
        if len(ci) < 3:
            raise DegenerateCell(f"cell {k}: fewer than 3 true corners")
        sides = []
        for s in range(len(ci)):
            i0, i1 = ci[s], ci[(s + 1) % len(ci)]
            seg = []
            i = i0
            while i != i1:
                seg.append(int(loop[i]))
                i = (i + 1) % len(loop)
            seg.append(int(loop[i1]))
            if len(seg) == 2:
                mid = midpoint(seg[0], seg[1])
            elif len(seg) == 3:
                mid = seg[1]
            else:
                raise RefinementLimit(
                    f"cell {k}: side carries more than one hanging node")
            sides.append((seg[0], mid, seg[-1]))
        refined_sides[k] = sides

    face_mid = {}
    for k in marked:
        for c0, mid, c1 in refined_sides[k]:
            face_mid[(min(c0, c1), max(c0, c1))] = mid

    # Pass 2: emit cells in stable order; unrefined neighbors of refined
    # cells pick up the new midpoints as collinear loop vertices.
    new_loops, new_levels = [], []
    for k in range(mesh.n_cells):
        if k in marked:
            sides = refined_sides[k]
            corners = [s[0] for s in sides]
            mids = [s[1] for s in sides]
            center = next_id
            next_id += 1
            coords.append(mesh.vertices[np.array(corners)].mean(axis=0)[None])
            nsides = len(sides)
            for s in range(nsides):
                new_loops.append(np.array(
                    [corners[s], mids[s], center, mids[(s - 1) % nsides]],
                    dtype=np.int64))
                new_levels.append(levels[k] + 1)
        else:
            loop = [int(v) for v in mesh.loops[k]]
            out = []
            m = len(loop)
            for i in range(m):
                a, b = loop[i], loop[(i + 1) % m]
                out.append(a)
                mid = face_mid.get((min(a, b), max(a, b)))
                if mid is not None:
                    out.append(mid)
            new_loops.append(np.array(out, dtype=np.int64))
            new_levels.append(levels[k])

    return build_polytopal(np.vstack(coords), new_loops, cell_levels=new_levels)


def refine(mesh: Mesh, marked_cells, **kw) -> Mesh:
    """Refine marked cells: newest-vertex bisection with closure on
    simplicial meshes, quadrisection with at most one hanging node per
    side on polytopal meshes.  Returns a new mesh; an empty mark set
    returns the input mesh unchanged."""
    if isinstance(mesh, SimplicialMesh):
        return _refine_simplicial(mesh, marked_cells)
    return _refine_polytopal(mesh, marked_cells, **kw)


# ----------------------------------------------------------------------
# built-in generators
# ----------------------------------------------------------------------

def _zigzag_lines(nx, w, x0, half):
    if half:
        inner = x0 + (np.arange(nx) + 0.5) * w
        return np.concatenate([[x0], inner, [x0 + nx * w]])
    return x0 + np.arange(nx + 1) * w


def _zigzag_rows(nx_of_row, x0_of_row, ny, w, h, y0, parity_offset):
    """Acute isoceles zigzag triangulation; rows may differ in x-extent.

    Row j spans ``[x0_of_row(j), x0_of_row(j)+nx_of_row(j)*w]`` vertically
    ``[y0+j*h, y0+(j+1)*h]``.  Line ``j`` holds integer points when
    ``(j+parity_offset)`` is even, else the half-offset points.  All
    interior faces satisfy strict Delaunay two-point admissibility with
    circumcenter collocation (boundary caps are right triangles whose
    circumcenters sit on their hypotenuse).
    """
    lines = []
    coords = []
    nid = 0
    for j in range(ny + 1):
        # a shared line takes the wider of the two adjacent rows
        nx_lo = nx_of_row(j - 1) if j > 0 else -1
        nx_hi = nx_of_row(j) if j < ny else -1
        if nx_hi >= nx_lo:
            nx_line, x0_line = nx_hi, x0_of_row(j)
        else:
            nx_line, x0_line = nx_lo, x0_of_row(j - 1)
        half = (j + parity_offset) % 2 == 1
        xs = _zigzag_lines(nx_line, w, x0_line, half)
        ids = np.arange(nid, nid + len(xs))
        nid += len(xs)
        lines.append((ids, half, x0_line, nx_line))
        coords.append(np.stack([xs, np.full(len(xs), y0 + j * h)], axis=1))
    vertices = np.vstack(coords)

    def row_points(j, x0_row, nx_row):
        ids, half, x0_line, nx_line = lines[j]
        shift = int(round((x0_row - x0_line) / w))
        if not half:
            return ids[shift:shift + nx_row + 1]
        # a half line cannot be entered mid-way; widening interfaces are
        # arranged (via parity_offset) to land on integer lines
        if shift != 0 or nx_row != nx_line:
            raise MeshFormatError("zigzag: half-offset line at a widening interface")
        return ids

    cells = []
    for j in range(ny):
        nx = nx_of_row(j)
        x0r = x0_of_row(j)
        lo = row_points(j, x0r, nx)
        hi = row_points(j + 1, x0r, nx)
        if not lines[j][1]:
            B, T = lo, hi              # integer bottom, half-offset top
            for i in range(nx):
                cells.append((B[i], B[i + 1], T[i + 1]))
            for i in range(nx + 1):
                cells.append((B[i], T[i + 1], T[i]))
        else:
            B, T = hi, lo              # integer top, half-offset bottom
            for i in range(nx):
                cells.append((B[i + 1], B[i], T[i + 1]))
            for i in range(nx + 1):
                cells.append((B[i], T[i], T[i + 1]))
    return build_simplicial(vertices, cells)


def triangle_grid(n: int) -> SimplicialMesh:
    """Structured triangle grid of the unit square, TPFA-admissible with
    circumcenter collocation (acute isoceles zigzag pattern)."""
    if n < 1:
        raise ValueError("n >= 1 required")
    w = 1.0 / n
    return _zigzag_rows(lambda j: n, lambda j: 0.0, n, w, w, 0.0, 0)


def lshape_triangle_grid(n: int) -> SimplicialMesh:
    """Zigzag triangle mesh of the L-shape (-1,1)^2 minus the closed
    third quadrant; ``n`` cells across each unit edge."""
    if n < 1:
        raise ValueError("n >= 1 required")
    w = 1.0 / n

    def nx_of_row(j):
        return n if j < n else 2 * n

    def x0_of_row(j):
        return 0.0 if j < n else -1.0

    # line n (the widening interface at y = 0) must hold integer points
    return _zigzag_rows(nx_of_row, x0_of_row, 2 * n, w, w, -1.0, n % 2)


def rectangle_grid(n: int, *, origin=(0.0, 0.0), size=1.0) -> PolytopalMesh:
    """n-by-n grid of square cells as a polytopal mesh with fan submeshes."""
    if n < 1:
        raise ValueError("n >= 1 required")
    x0, y0 = origin
    w = size / n
    xs, ys = np.meshgrid(x0 + np.arange(n + 1) * w, y0 + np.arange(n + 1) * w)
    verts = np.stack([xs.ravel(), ys.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    loops = [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
             for j in range(n) for i in range(n)]
    return build_polytopal(verts, loops)


def lshape_rectangle_grid(n: int) -> PolytopalMesh:
    """Square-cell polytopal mesh of the L-shape with n cells per unit edge."""
    if n < 1:
        raise ValueError("n >= 1 required")
    w = 1.0 / n
    index = {}
    verts = []

    def vid(i, j):
        key = (i, j)
        if key not in index:
            index[key] = len(verts)
            verts.append((-1.0 + i * w, -1.0 + j * w))
        return index[key]

    loops = []
    for j in range(2 * n):
        for i in range(2 * n):
            # exclude the closed third quadrant
            if i < n and j < n:
                continue
            loops.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])
    return build_polytopal(np.array(verts), loops)


# ----------------------------------------------------------------------
# mesh2d text format
# ----------------------------------------------------------------------

def write_mesh2d(mesh: Mesh) -> str:
    """Serialize to the line-oriented mesh2d format."""
    loops = mesh.cells if isinstance(mesh, SimplicialMesh) else mesh.loops
    lines = [f"mesh2d {mesh.n_vertices} {len(loops)}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g}")
    for loop in loops:
        lines.append("c " + str(len(loop)) + " " + " ".join(str(int(i)) for i in loop))
    return "\n".join(lines) + "\n"


def read_mesh2d(text: str) -> Mesh:
    """Parse the mesh2d format; all-triangle input yields a simplicial mesh."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MeshFormatError("empty input")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "mesh2d":
        raise MeshFormatError("missing 'mesh2d <n_vertices> <n_cells>' header")
    try:
        nv, nc = int(head[1]), int(head[2])
    except ValueError:
        raise MeshFormatError("non-integer counts in header") from None
    if len(lines) != 1 + nv + nc:
        raise MeshFormatError("line count does not match header")
    verts = np.empty((nv, 2))
    for i in range(nv):
        parts = lines[1 + i].split()
        if len(parts) != 3 or parts[0] != "v":
            raise MeshFormatError(f"bad vertex line {i}")
        verts[i] = [float(parts[1]), float(parts[2])]
    loops = []
    for i in range(nc):
        parts = lines[1 + nv + i].split()
        if len(parts) < 2 or parts[0] != "c":
            raise MeshFormatError(f"bad cell line {i}")
        k = int(parts[1])
        if k < 3 or len(parts) != 2 + k:
            raise MeshFormatError(f"bad cell arity on line {i}")
        loops.append([int(p) for p in parts[2:]])
    if all(len(l) == 3 for l in loops):
        return build_simplicial(verts, loops)
    return build_polytopal(verts, loops)


def generate(spec: str) -> Mesh:
    """Build a mesh from a generator spec like ``tri:16`` or ``lshape-rect:8``."""
    try:
        kind, n = spec.split(":")
        n = int(n)
    except ValueError:
        raise MeshFormatError(f"bad generator spec {spec!r}; expected kind:n") from None
    makers = {"tri": triangle_grid, "rect": rectangle_grid,
              "lshape-tri": lshape_triangle_grid, "lshape-rect": lshape_rectangle_grid}
    if kind not in makers:
        raise MeshFormatError(f"unknown generator {kind!r}")
    return makers[kind](n)
