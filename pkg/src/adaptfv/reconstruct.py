"""Potential and flux reconstructions.

Simplicial path: explicit RT0 lifting of face fluxes, elementwise P2
postprocessing, and nodal averaging into a conforming quadratic.
Polytopal path: local Neumann mixed solves on the virtual submesh,
vertex-averaged or multiplier-based potential point values, and the
reference P2 reconstruction over the global submesh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import MultipliersUnavailable
from .localmat import (RT0Field, assemble_blocks, lifting_matrix,
                       quad_rule, rt0_coefficients, tri_quad_points)
from .mesh import Mesh, PolytopalMesh, SimplicialMesh, Submesh
from .scheme import FaceFluxVector
from .sparse_linalg import dense_lu_solve

# P2 Lagrange node order per triangle: three vertices, then the midpoint
# opposite each vertex (m12, m20, m01).
_EDGE_OF_NODE = ((1, 2), (2, 0), (0, 1))


@dataclass
class P2Potential:
    """Piecewise quadratic on a triangle list, stored by Lagrange values."""

    tris: np.ndarray        # (n, 3, 2) triangle vertex coordinates
    values: np.ndarray      # (n, 6) Lagrange values [v0 v1 v2 m12 m20 m01]

    def eval_piece(self, i, xy):
        lam = _barycentric(self.tris[i], np.atleast_2d(xy))
        N = _p2_shapes(lam)
        return N @ self.values[i]

    def grad_piece(self, i, xy):
        t = self.tris[i]
        lam = _barycentric(t, np.atleast_2d(xy))
        gl = _grad_lambdas(t)
        G = _p2_shape_grads(lam, gl)
        return np.einsum("qnd,n->qd", G, self.values[i])

    def grad_batch(self, rule):
        """Gradients at a quadrature rule's points on every triangle:
        (N, nq, 2).  Uses that the rule's barycentric coordinates are the
        same on every triangle."""
        lam = rule.points                      # (q, 3)
        gl = _grad_lambdas_batch(self.tris)    # (N, 3, 2)
        # vertex shapes: (4 lam_i - 1) gl_i ; edge shapes: 4(lam_i gl_j + ...)
        out = np.einsum("qi,ni,nid->nqd", 4.0 * lam - 1.0,
                        self.values[:, :3], gl)
        for n, (i, j) in enumerate(_EDGE_OF_NODE):
            w = self.values[:, 3 + n]
            out += 4.0 * w[:, None, None] * (
                lam[None, :, i, None] * gl[:, None, j, :]
                + lam[None, :, j, None] * gl[:, None, i, :])
        return out


def _barycentric(t, xy):
    T = np.array([[t[0, 0] - t[2, 0], t[1, 0] - t[2, 0]],
                  [t[0, 1] - t[2, 1], t[1, 1] - t[2, 1]]])
    r = np.linalg.solve(T, (xy - t[2]).T).T
    return np.column_stack([r, 1.0 - r.sum(axis=1)])


def _grad_lambdas(t):
    area = 0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1])
                  - (t[1][1] - t[0][1]) * (t[2][0] - t[0][0]))
    g = np.empty((3, 2))
    for i in range(3):
        e = t[(i + 2) % 3] - t[(i + 1) % 3]
        g[i] = np.array([-e[1], e[0]]) / (2.0 * area)
    return g


def _grad_lambdas_batch(tris):
    area = 0.5 * ((tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 1] - tris[:, 0, 1])
                  - (tris[:, 2, 0] - tris[:, 0, 0]) * (tris[:, 1, 1] - tris[:, 0, 1]))
    g = np.empty((len(tris), 3, 2))
    for i in range(3):
        e = tris[:, (i + 2) % 3] - tris[:, (i + 1) % 3]
        g[:, i, 0] = -e[:, 1]
        g[:, i, 1] = e[:, 0]
    return g / (2.0 * area)[:, None, None]


def _p2_shapes(lam):
    N = np.empty((lam.shape[0], 6))
    for i in range(3):
        N[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
    for n, (i, j) in enumerate(_EDGE_OF_NODE):
        N[:, 3 + n] = 4.0 * lam[:, i] * lam[:, j]
    return N


def _p2_shape_grads(lam, gl):
    q = lam.shape[0]
    G = np.empty((q, 6, 2))
    for i in range(3):
        G[:, i, :] = (4.0 * lam[:, i, None] - 1.0) * gl[i][None, :]
    for n, (i, j) in enumerate(_EDGE_OF_NODE):
        G[:, 3 + n, :] = 4.0 * (lam[:, i, None] * gl[j][None, :]
                                + lam[:, j, None] * gl[i][None, :])
    return G


def _p2_nodes(t):
    mids = np.array([0.5 * (t[i] + t[j]) for (i, j) in _EDGE_OF_NODE])
    return np.vstack([t, mids])


# ----------------------------------------------------------------------
# simplicial path
# ----------------------------------------------------------------------

def lift_flux_simplicial(mesh: SimplicialMesh, fluxes: FaceFluxVector) -> RT0Field:
    """RT0 lifting of face normal fluxes: on each triangle the unique
    field with the prescribed outfluxes.  Antisymmetric interior data
    makes the result H(div)-conforming."""
    tris = mesh.vertices[mesh.cells]
    u = mesh.cell_face_signs * fluxes.values[mesh.cell_faces]  # (nc, 3)
    inv2a = 1.0 / (2.0 * mesh.areas)
    c = u.sum(axis=1) * inv2a
    opp = tris[:, [2, 0, 1], :]        # vertex opposite local edge i
    a = -np.einsum("ni,nid->nd", u, opp) * inv2a[:, None]
    return RT0Field(tris, a, c)


def postprocess_potential(u_h: RT0Field, P, scale=1.0) -> P2Potential:
    """Elementwise quadratic with ``-scale * grad ptilde = u_h`` and cell
    mean ``P_K`` (discontinuous across faces)."""
    n = len(u_h.c)
    P = np.asarray(P, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (n,))
    rule = quad_rule(2)

    def poly_batch(pts):
        # pts (n, m, 2): -(a.x + c |x|^2 / 2) / scale
        return -(np.einsum("nmd,nd->nm", pts, u_h.a)
                 + 0.5 * u_h.c[:, None] * np.einsum("nmd,nmd->nm", pts, pts)) \
            / scale[:, None]

    from .localmat import batch_quad_points
    xq = batch_quad_points(u_h.tris, rule)
    means = poly_batch(xq) @ rule.weights
    mids = 0.5 * (u_h.tris[:, [1, 2, 0], :] + u_h.tris[:, [2, 0, 1], :])
    nodes = np.concatenate([u_h.tris, mids], axis=1)   # (n, 6, 2)
    vals = poly_batch(nodes) + (P - means)[:, None]
    return P2Potential(u_h.tris.copy(), vals)


def average_p2(mesh: SimplicialMesh, ptilde: P2Potential,
               boundary_values: Optional[Callable] = None) -> P2Potential:
    """Average the discontinuous quadratic at the Lagrange nodes of the
    conforming P2 space; boundary nodes take the prescribed trace
    (zero when no callback is given)."""
    nv, nf = mesh.n_vertices, mesh.n_faces
    # node order: vertices 0,1,2 then midpoints m12, m20, m01
    gids = np.concatenate([mesh.cells,
                           nv + mesh.cell_faces[:, [1, 2, 0]]], axis=1)
    acc = np.zeros(nv + nf)
    cnt = np.zeros(nv + nf)
    np.add.at(acc, gids, ptilde.values)
    np.add.at(cnt, gids, 1.0)
    nodal = acc / np.maximum(cnt, 1.0)

    bmask = np.zeros(nv + nf, dtype=bool)
    bfaces = mesh.boundary_faces
    bmask[mesh.faces[bfaces].ravel()] = True
    bmask[nv + bfaces] = True
    if boundary_values is None:
        nodal[bmask] = 0.0
    else:
        coords = np.vstack([mesh.vertices, mesh.face_midpoints])
        bidx = np.flatnonzero(bmask)
        nodal[bidx] = np.asarray(boundary_values(coords[bidx, 0],
                                                 coords[bidx, 1]), dtype=float)
    return P2Potential(ptilde.tris.copy(), nodal[gids])


# ----------------------------------------------------------------------
# potential point values on polytopal meshes
# ----------------------------------------------------------------------

@dataclass
class PointValueVector:
    """Potential samples at submesh vertices and exterior subfaces.

    ``vertex`` holds one value per polytopal mesh vertex, ``center`` one
    value per cell (the fan center; ignored for trivial submeshes).
    Face values are the average of the two endpoint values."""

    mesh: PolytopalMesh
    vertex: np.ndarray
    center: np.ndarray

    def face_values(self) -> np.ndarray:
        v = self.vertex
        return 0.5 * (v[self.mesh.faces[:, 0]] + v[self.mesh.faces[:, 1]])

    def cell_gathering(self, k) -> np.ndarray:
        """Z_K over the submesh vertices of cell k (loop order, center last)."""
        loop = self.mesh.loops[k]
        vals = self.vertex[loop]
        if self.mesh.submeshes[k].has_center:
            vals = np.append(vals, self.center[k])
        return vals

    def cell_ext(self, k) -> np.ndarray:
        """Z_K^ext over the exterior subfaces of cell k (loop edge order)."""
        return self.face_values()[self.mesh.cell_faces[k]]


def point_values_avg(mesh: PolytopalMesh, P, *,
                     boundary_values: Optional[Callable] = None) -> PointValueVector:
    """Vertex values by averaging the incident cell potentials; interior
    (fan center) vertices take their own cell's value; boundary vertices
    take the Dirichlet trace."""
    P = np.asarray(P, dtype=float)
    nv = mesh.n_vertices
    flat_v = np.concatenate(mesh.loops)
    flat_c = np.repeat(np.arange(mesh.n_cells),
                       [len(l) for l in mesh.loops])
    acc = np.zeros(nv)
    cnt = np.zeros(nv)
    np.add.at(acc, flat_v, P[flat_c])
    np.add.at(cnt, flat_v, 1.0)
    z = acc / np.maximum(cnt, 1.0)
    _apply_boundary(mesh, z, boundary_values)
    return PointValueVector(mesh, z, P.copy())


def point_values_hyb(mesh: PolytopalMesh, multipliers, P, *,
                     boundary_values: Optional[Callable] = None) -> PointValueVector:
    """Vertex values by averaging the incident face Lagrange multipliers
    (saddle-point schemes); rules for interior and boundary vertices as
    in the averaged variant."""
    if multipliers is None:
        raise MultipliersUnavailable("scheme provides no face multipliers")
    lam = np.asarray(multipliers, dtype=float)
    P = np.asarray(P, dtype=float)
    nv = mesh.n_vertices
    acc = np.zeros(nv)
    cnt = np.zeros(nv)
    for col in (0, 1):
        np.add.at(acc, mesh.faces[:, col], lam)
        np.add.at(cnt, mesh.faces[:, col], 1.0)
    z = acc / np.maximum(cnt, 1.0)
    _apply_boundary(mesh, z, boundary_values)
    return PointValueVector(mesh, z, P.copy())


def _apply_boundary(mesh, z, boundary_values):
    bmask = mesh.boundary_vertices()
    if boundary_values is None:
        z[bmask] = 0.0
    else:
        idx = np.flatnonzero(bmask)
        z[idx] = np.asarray(boundary_values(mesh.vertices[idx, 0],
                                            mesh.vertices[idx, 1]), dtype=float)


# ----------------------------------------------------------------------
# local Neumann solves and the polytopal P2 reference reconstruction
# ----------------------------------------------------------------------

def solve_local_neumann(sub: Submesh, u_ext, weight=1.0, *, P_K: float = 0.0):
    """Minimal-energy mixed lifting of exterior outward fluxes over one
    cell's submesh.

    Returns ``(field, p_h)``: the RT0 field with the prescribed exterior
    fluxes and elementwise-constant divergence, and the piecewise
    constant potential multiplier with cell mean ``P_K``."""
    u_ext = np.asarray(u_ext, dtype=float)
    X = lifting_matrix(sub, weight)
    n_int = len(sub.int_faces)
    sol = -X @ u_ext if X.size else np.zeros(0)
    u_int = sol[:n_int]
    p0 = sol[n_int:]
    a, c = rt0_coefficients(sub, u_ext, u_int)
    field = RT0Field(sub.points[sub.tris], a, c)
    areaK = sub.tri_areas.sum()
    p_h = np.full(len(sub.tris), P_K)
    for i, v in enumerate(p0):
        p_h[i + 1] += v
        p_h -= v * sub.tri_areas[i + 1] / areaK
    # restore exact mean P_K (the q_i have zero mean already; this guards
    # against accumulated round-off only)
    p_h += P_K - float(p_h @ sub.tri_areas) / areaK
    return field, p_h


def redistribute_flux(U_sigma: float, subface_lengths) -> np.ndarray:
    """Split a polytopal face flux over subfaces proportionally to
    length (identity when the face is not subdivided)."""
    w = np.asarray(subface_lengths, dtype=float)
    return U_sigma * w / w.sum()


def lift_flux_polytopal(mesh: PolytopalMesh, fluxes: FaceFluxVector,
                        weight=1.0):
    """Per-cell minimal-energy liftings of the scheme's face fluxes.

    ``weight`` is the inverse-diffusion weight, a scalar or one value per
    cell.  Returns (fields, p_cells) lists indexed by cell; ``p_cells``
    are the subtriangle potential multipliers with zero cell mean."""
    w = np.broadcast_to(np.asarray(weight, dtype=float), (mesh.n_cells,))
    fields, pcs = [], []
    for k in range(mesh.n_cells):
        field, p_h = solve_local_neumann(mesh.submeshes[k], fluxes.cell_ext(k),
                                         float(w[k]))
        fields.append(field)
        pcs.append(p_h)
    return fields, pcs


def reconstruct_p2_polytopal(mesh: PolytopalMesh, fields, p_cells, P, scale=1.0,
                             boundary_values: Optional[Callable] = None):
    """Reference conforming P2 reconstruction over the global submesh.

    Postprocesses each subtriangle lifting into a quadratic with the
    local mean from the Neumann multiplier, then averages at the
    Lagrange nodes of the global (conforming) fan submesh.

    Returns ``(submesh, s_h)`` with ``submesh`` a SimplicialMesh of all
    fan subtriangles and ``s_h`` the conforming quadratic on it."""
    from .mesh import build_simplicial

    P = np.asarray(P, dtype=float)
    coords = [mesh.vertices]
    centers = {}
    nid = mesh.n_vertices
    for k in range(mesh.n_cells):
        sub = mesh.submeshes[k]
        if sub.has_center:
            centers[k] = nid
            coords.append(sub.points[-1][None])
            nid += 1
    allv = np.vstack(coords)

    tris, tri_a, tri_c, tri_p, tri_scale = [], [], [], [], []
    for k in range(mesh.n_cells):
        sub = mesh.submeshes[k]
        loop = mesh.loops[k]
        field = fields[k]
        for t in range(len(sub.tris)):
            idx = []
            for local in sub.tris[t]:
                idx.append(centers[k] if (sub.has_center and local == len(loop))
                           else int(loop[local]))
            tris.append(idx)
            tri_a.append(field.a[t])
            tri_c.append(field.c[t])
            tri_p.append(P[k] + p_cells[k][t])
            tri_scale.append(np.broadcast_to(np.asarray(scale, dtype=float),
                                             (mesh.n_cells,))[k])
    submesh = build_simplicial(allv, tris, refinement_edges="keep")
    u_sub = RT0Field(submesh.vertices[submesh.cells],
                     np.asarray(tri_a), np.asarray(tri_c))
    ptilde = postprocess_potential(u_sub, np.asarray(tri_p), np.asarray(tri_scale))
    s_h = average_p2(submesh, ptilde, boundary_values)
    return submesh, u_sub, s_h
