"""Per-cell building blocks of the estimator engine.

RT0 and P1 bases on triangles, triangle quadrature, and the element
matrices of the local mixed problem (``A_MFE``), of the conforming P1
finite element method (``S_FE``, ``M_FE``) on a cell's simplicial
submesh.  All operations are pure functions of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import SingularLocalSaddle, SingularWeight, UnsupportedDegree
from .mesh import PolytopalMesh, Submesh
from .sparse_linalg import dense_lu_solve

# ----------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class QuadRule:
    """Symmetric triangle quadrature rule in barycentric coordinates."""

    points: np.ndarray   # (n, 3) barycentric
    weights: np.ndarray  # (n,), sums to 1
    degree: int


def _rule_deg1():
    return QuadRule(np.array([[1, 1, 1]]) / 3.0, np.array([1.0]), 1)


def _rule_deg2():
    pts = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return QuadRule(pts, np.full(3, 1.0 / 3.0), 2)


def _rule_deg5():
    s = np.sqrt(15.0)
    b1 = (6.0 - s) / 21.0
    b2 = (6.0 + s) / 21.0
    w1 = (155.0 - s) / 1200.0
    w2 = (155.0 + s) / 1200.0
    pts = [[1 / 3, 1 / 3, 1 / 3]]
    wts = [9.0 / 40.0]
    for b, w in ((b1, w1), (b2, w2)):
        a = 1.0 - 2.0 * b
        pts += [[a, b, b], [b, a, b], [b, b, a]]
        wts += [w, w, w]
    return QuadRule(np.array(pts), np.array(wts), 5)


_RULES = {1: _rule_deg1(), 2: _rule_deg2(), 5: _rule_deg5()}


def quad_rule(degree: int) -> QuadRule:
    """Smallest built-in rule exact to at least ``degree`` (max 5)."""
    for d in sorted(_RULES):
        if d >= degree:
            return _RULES[d]
    raise UnsupportedDegree(f"no rule of degree {degree} (max 5)")


def tri_quad_points(tri_pts, rule: QuadRule):
    """Physical quadrature points (n, 2) of a rule on one triangle."""
    return rule.points @ tri_pts


def batch_quad_points(tris, rule: QuadRule):
    """Quadrature points of a rule on a batch of triangles (N, 3, 2) ->
    (N, nq, 2)."""
    return np.einsum("qj,njd->nqd", rule.points, tris)


def _split_pattern(s: int):
    """Barycentric vertex coordinates of the uniform s^2-subdivision of
    the reference triangle, shape (s^2, 3, 3)."""
    out = []

    def bary(i, j):
        return np.array([1.0 - (i + j) / s, i / s, j / s])

    for i in range(s):
        for j in range(s - i):
            out.append([bary(i, j), bary(i + 1, j), bary(i, j + 1)])
            if j < s - i - 1:
                out.append([bary(i + 1, j), bary(i + 1, j + 1), bary(i, j + 1)])
    return np.asarray(out)


def split_triangles(tris, s: int):
    """Uniformly split a batch (N, 3, 2) into (N*s^2, 3, 2) congruent
    subtriangles (order: all subtriangles of triangle 0 first)."""
    if s <= 1:
        return np.asarray(tris, dtype=float)
    pat = _split_pattern(s)                       # (m, 3, 3)
    out = np.einsum("mkj,njd->nmkd", pat, tris)   # (N, m, 3, 2)
    return out.reshape(-1, 3, 2)


def integrate_tri(tri_pts, integrand: Callable, degree: int = 5,
                  subdivisions: int = 1) -> float:
    """Integrate ``integrand(x, y)`` over a triangle.

    Exact for polynomials up to the rule degree.  ``subdivisions=s``
    splits the triangle uniformly into ``s**2`` congruent copies first,
    for non-polynomial integrands with sub-cell features.
    """
    rule = quad_rule(degree)
    tris = _split_triangle(np.asarray(tri_pts, dtype=float), subdivisions)
    total = 0.0
    for t in tris:
        area = 0.5 * abs(_cross2(t[1] - t[0], t[2] - t[0]))
        xy = tri_quad_points(t, rule)
        total += area * float(np.dot(rule.weights, integrand(xy[:, 0], xy[:, 1])))
    return total


def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _split_triangle(t, s):
    if s <= 1:
        return [t]
    out = []
    for i in range(s):
        for j in range(s - i):
            p00 = t[0] + (t[1] - t[0]) * (i / s) + (t[2] - t[0]) * (j / s)
            p10 = t[0] + (t[1] - t[0]) * ((i + 1) / s) + (t[2] - t[0]) * (j / s)
            p01 = t[0] + (t[1] - t[0]) * (i / s) + (t[2] - t[0]) * ((j + 1) / s)
            out.append(np.array([p00, p10, p01]))
            if j < s - i - 1:
                p11 = t[0] + (t[1] - t[0]) * ((i + 1) / s) + (t[2] - t[0]) * ((j + 1) / s)
                out.append(np.array([p10, p11, p01]))
    return out


def integrate(cell_pts_or_tris, integrand: Callable, degree: int = 5,
              subdivisions: int = 1) -> float:
    """Integrate over a triangle (3 points) or a fan of triangles
    ((n, 3, 2) array)."""
    arr = np.asarray(cell_pts_or_tris, dtype=float)
    if arr.ndim == 2:
        return integrate_tri(arr, integrand, degree, subdivisions)
    return sum(integrate_tri(t, integrand, degree, subdivisions) for t in arr)


# ----------------------------------------------------------------------
# RT0 fields
# ----------------------------------------------------------------------


@dataclass
class RT0Field:
    """Piecewise ``v(x) = a + c x`` over a list of triangles.

    ``tris`` has shape (n, 3, 2); the divergence is ``2 c`` per triangle
    and the normal trace of each piece is constant per edge.
    """

    tris: np.ndarray    # (n, 3, 2)
    a: np.ndarray       # (n, 2)
    c: np.ndarray       # (n,)

    def eval_piece(self, i, xy):
        xy = np.atleast_2d(xy)
        return self.a[i][None, :] + self.c[i] * xy

    def eval_batch(self, pts):
        """Evaluate piece n at its own points pts[n]: (N, q, 2) -> (N, q, 2)."""
        return self.a[:, None, :] + self.c[:, None, None] * pts

    def divergence(self):
        return 2.0 * self.c


def rt0_basis(triangle, face_index: int) -> RT0Field:
    """RT0 basis of one triangle with unit outflux through local edge
    ``face_index`` (edge i joins vertices i and i+1) and zero through the
    others: ``v(x) = (x - a_opp) / (d |K|)`` with d = 2."""
    t = np.asarray(triangle, dtype=float).reshape(3, 2)
    area = 0.5 * _cross2(t[1] - t[0], t[2] - t[0])
    if abs(area) < 1e-300:
        raise SingularWeight("degenerate triangle")
    opp = t[(face_index + 2) % 3]
    return RT0Field(t[None], (-opp / (2.0 * area))[None], np.array([1.0 / (2.0 * area)]))


def rt0_flux_through(field: RT0Field, piece: int, p0, p1, outward_normal) -> float:
    """Integral of v . n over the segment (p0, p1), 2-point Gauss (exact)."""
    g = 0.5 / np.sqrt(3.0)
    mid = 0.5 * (np.asarray(p0) + np.asarray(p1))
    d = np.asarray(p1) - np.asarray(p0)
    xs = np.array([mid - g * d, mid + g * d])
    vals = field.eval_piece(piece, xs) @ np.asarray(outward_normal)
    return float(0.5 * vals.sum() * np.hypot(*d))


# ----------------------------------------------------------------------
# P1 hats on a submesh
# ----------------------------------------------------------------------


def _grad_lambdas(t):
    """Constant P1 barycentric gradients on a triangle (3, 2)."""
    area = 0.5 * _cross2(t[1] - t[0], t[2] - t[0])
    g = np.empty((3, 2))
    for i in range(3):
        e = t[(i + 2) % 3] - t[(i + 1) % 3]
        g[i] = np.array([-e[1], e[0]]) / (2.0 * area)
    return g


# ----------------------------------------------------------------------
# element matrices
# ----------------------------------------------------------------------


@dataclass
class CellLocalMatrices:
    """The per-cell estimator engine.

    ``a_mfe`` maps exterior face fluxes to the energy of their minimal
    lifting, ``s_fe``/``m_fe`` are the P1 stiffness and mass matrices on
    the submesh vertices (loop vertices then center).  ``weight`` records
    the diffusion data used: a scalar pair ``(c, C)`` for the nonlinear
    scaled variants, otherwise the cell diffusion.
    """

    a_mfe: np.ndarray
    s_fe: np.ndarray
    m_fe: np.ndarray
    weight: object


Weight = Union[float, np.ndarray, Callable]

# Element matrices depend on cell geometry only up to translation, so
# structured meshes hit a handful of shapes; cache by relative geometry.
_SHAPE_CACHE: dict = {}
_SHAPE_CACHE_MAX = 20000


def _shape_key(sub: Submesh, weight) -> Optional[tuple]:
    if callable(weight):
        return None
    key = getattr(sub, "_cache_key", None)
    if key is None:
        rel = sub.points - sub.points[0]
        scale = max(np.abs(rel).max(), 1e-300)
        q = np.round(rel / scale, 12)
        key = (sub.has_center, q.tobytes(), float(scale))
        sub._cache_key = key
    w = np.asarray(weight, dtype=float)
    return key + (w.tobytes(),)


def _shape_cached(kind, sub, weight, builder):
    key = _shape_key(sub, weight)
    if key is None:
        return builder()
    full = (kind,) + key
    hit = _SHAPE_CACHE.get(full)
    if hit is None:
        if len(_SHAPE_CACHE) > _SHAPE_CACHE_MAX:
            _SHAPE_CACHE.clear()
        hit = builder()
        _SHAPE_CACHE[full] = hit
    return hit


def _weight_matrix(weight, tri_pts) -> np.ndarray:
    """Normalize a weight spec to a constant SPD 2x2 matrix per triangle."""
    if callable(weight):
        w = weight(tri_pts)
    else:
        w = weight
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = w * np.eye(2)
    if w.shape != (2, 2):
        raise SingularWeight("weight must be scalar or 2x2 per triangle")
    if not np.allclose(w, w.T, rtol=1e-12, atol=0):
        raise SingularWeight("weight not symmetric")
    ev = np.linalg.eigvalsh(w)
    if ev.min() <= 0:
        raise SingularWeight("weight not positive definite")
    return w


def _submesh_basis(sub: Submesh):
    """Per-subtriangle RT0 basis bookkeeping, in coordinates relative to
    the first submesh vertex (translation-invariant, hence cacheable).

    Returns (n_ext, n_int, pieces) where pieces[t] lists
    (global basis index, a_rel, c) on subtriangle t.  Exterior basis j is
    supported on the subtriangle owning exterior edge j; interior (spoke)
    basis j spans its two neighbors with +1 flux out of the owner.  The
    absolute constant coefficient is ``a_rel - c * points[0]``.
    """
    return _shape_cached("basis", sub, 0.0, lambda: _submesh_basis_impl(sub))


def _submesh_basis_impl(sub: Submesh):
    pts = sub.points - sub.points[0]
    n_ext = sub.n_ext
    pieces = [[] for _ in range(len(sub.tris))]
    for j in range(n_ext):
        t = j if sub.has_center else 0
        tri = pts[sub.tris[t]]
        loc = _local_edge(sub.tris[t], j, (j + 1) % n_ext)
        b = rt0_basis(tri, loc)
        pieces[t].append((j, b.a[0], b.c[0]))
    for q, (vi, ci) in enumerate(sub.int_faces):
        owner, nb = sub.int_tris[q]
        for t, sign in ((owner, 1.0), (nb, -1.0)):
            tri = pts[sub.tris[t]]
            loc = _local_edge(sub.tris[t], int(vi), int(ci))
            b = rt0_basis(tri, loc)
            pieces[t].append((n_ext + q, sign * b.a[0], sign * b.c[0]))
    return n_ext, len(sub.int_faces), pieces


def _local_edge(tri_idx, a, b):
    for i in range(3):
        pair = {int(tri_idx[i]), int(tri_idx[(i + 1) % 3])}
        if pair == {a, b}:
            return i
    raise SingularLocalSaddle("edge not found in subtriangle")


def assemble_blocks(sub: Submesh, weight: Weight):
    """Mixed blocks of the local Neumann problem on one cell.

    Entries are ``(W v_j, v_i)`` with W the (inverse-diffusion) weight,
    and ``-(div v_j, q_i)`` against the zero-mean piecewise constants
    ``q_i = chi_i - |kappa_i|/|K| chi_K``, i = 1..n_tri-1.  Midpoint
    quadrature (degree 2) is exact for piecewise-constant weights.
    """
    n_ext, n_int, pieces = _submesh_basis(sub)
    rel = sub.points - sub.points[0]
    n = n_ext + n_int
    A = np.zeros((n, n))
    rule = _RULES[2]
    areaK = sub.tri_areas.sum()
    for t, plist in enumerate(pieces):
        W = _weight_matrix(weight, sub.points[sub.tris[t]])
        xy = tri_quad_points(rel[sub.tris[t]], rule)
        area = sub.tri_areas[t]
        vals = []
        for (_, a, c) in plist:
            vals.append(a[None, :] + c * xy)
        for ii, (gi, ai, ci) in enumerate(plist):
            for jj, (gj, aj, cj) in enumerate(plist):
                if gj > gi:
                    continue
                contrib = area * np.dot(rule.weights,
                                        np.einsum("qi,ij,qj->q", vals[ii], W, vals[jj]))
                A[gi, gj] += contrib
                if gi != gj:
                    A[gj, gi] += contrib
    # divergence constraints: q_i built on subtriangles 1..n_tri-1
    n_con = len(sub.tris) - 1
    B = np.zeros((n_con, n))
    for t, plist in enumerate(pieces):
        area = sub.tri_areas[t]
        for (g, a, c) in plist:
            div_int = 2.0 * c * area   # integral of div over this subtriangle
            for i in range(n_con):
                q = (1.0 if t == i + 1 else 0.0) - sub.tri_areas[i + 1] / areaK
                B[i, g] -= div_int * q
    return {
        "a_int_int": A[n_ext:, n_ext:], "a_int_ext": A[n_ext:, :n_ext],
        "a_ext_ext": A[:n_ext, :n_ext], "b0_int": B[:, n_ext:], "b0_ext": B[:, :n_ext],
    }


def schur_a_mfe(blocks) -> np.ndarray:
    """Schur complement element matrix of the local mixed problem."""
    Aii = blocks["a_int_int"]
    Aie = blocks["a_int_ext"]
    Aee = blocks["a_ext_ext"]
    Bi = blocks["b0_int"]
    Be = blocks["b0_ext"]
    ni, nc = Aii.shape[0], Bi.shape[0]
    if ni + nc == 0:
        return Aee.copy()
    S = np.zeros((ni + nc, ni + nc))
    S[:ni, :ni] = Aii
    S[:ni, ni:] = Bi.T
    S[ni:, :ni] = Bi
    R = np.vstack([Aie, Be])
    try:
        X = dense_lu_solve(S, R)
    except Exception as e:
        raise SingularLocalSaddle(f"local saddle matrix singular: {e}") from None
    M = Aee - R.T @ X
    return 0.5 * (M + M.T)


def lifting_matrix(sub: Submesh, weight: Weight) -> np.ndarray:
    """Interior response of the local Neumann problem.

    Returns ``X`` of shape (n_int + n_con, n_ext) such that the minimal-
    energy lifting of exterior outward fluxes ``U`` has interior fluxes
    ``-X[:n_int] @ U`` and constraint multipliers ``-X[n_int:] @ U``.
    """
    return _shape_cached("lift", sub, weight,
                         lambda: _lifting_matrix_impl(sub, weight))


def _lifting_matrix_impl(sub: Submesh, weight: Weight) -> np.ndarray:
    blocks = assemble_blocks(sub, weight)
    Aii, Bi = blocks["a_int_int"], blocks["b0_int"]
    ni, nc = Aii.shape[0], Bi.shape[0]
    if ni + nc == 0:
        return np.zeros((0, sub.n_ext))
    S = np.zeros((ni + nc, ni + nc))
    S[:ni, :ni] = Aii
    S[:ni, ni:] = Bi.T
    S[ni:, :ni] = Bi
    R = np.vstack([blocks["a_int_ext"], blocks["b0_ext"]])
    try:
        return dense_lu_solve(S, R)
    except Exception as e:
        raise SingularLocalSaddle(f"local saddle matrix singular: {e}") from None


def _coeff_maps(sub: Submesh):
    """Cached linear maps from flux coefficients to the per-subtriangle
    RT0 coefficients: a_rel = Ca @ coef, c = Cc @ coef."""
    def build():
        n_ext, n_int, pieces = _submesh_basis(sub)
        nt = len(sub.tris)
        Ca = np.zeros((nt, 2, n_ext + n_int))
        Cc = np.zeros((nt, n_ext + n_int))
        for t, plist in enumerate(pieces):
            for (g, ab, cb) in plist:
                Ca[t, :, g] += ab
                Cc[t, g] += cb
        return Ca, Cc
    return _shape_cached("coef", sub, 0.0, build)


def rt0_coefficients(sub: Submesh, u_ext, u_int):
    """Per-subtriangle RT0 coefficients (a, c) of the submesh field with
    the given exterior (outward) and interior (owner-oriented) fluxes."""
    Ca, Cc = _coeff_maps(sub)
    coef = np.concatenate([np.asarray(u_ext, dtype=float),
                           np.asarray(u_int, dtype=float)])
    a = Ca @ coef
    c = Cc @ coef
    # the cached basis is relative to points[0]; shift the constant part
    a -= np.outer(c, sub.points[0])
    return a, c


def fe_stiffness(sub: Submesh, weight: Weight) -> np.ndarray:
    """P1 stiffness matrix on the submesh vertices, (K grad, grad)."""
    n = sub.n_points
    S = np.zeros((n, n))
    for t, tri_idx in enumerate(sub.tris):
        tri = sub.points[tri_idx]
        W = _weight_matrix(weight, tri)
        g = _grad_lambdas(tri)
        loc = sub.tri_areas[t] * (g @ W @ g.T)
        for i in range(3):
            for j in range(3):
                S[tri_idx[i], tri_idx[j]] += loc[i, j]
    return S


def fe_mass(sub: Submesh) -> np.ndarray:
    """P1 mass matrix on the submesh vertices (exact)."""
    n = sub.n_points
    M = np.zeros((n, n))
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    for t, tri_idx in enumerate(sub.tris):
        loc = sub.tri_areas[t] * base
        for i in range(3):
            for j in range(3):
                M[tri_idx[i], tri_idx[j]] += loc[i, j]
    return M


def cell_matrices(sub: Submesh, inv_diffusion: Weight, diffusion: Weight,
                  weight_tag=None) -> CellLocalMatrices:
    """Assemble the full estimator-engine triple for one cell."""
    a_mfe = _shape_cached("amfe", sub, inv_diffusion,
                          lambda: schur_a_mfe(assemble_blocks(sub, inv_diffusion)))
    s_fe = _shape_cached("sfe", sub, diffusion,
                         lambda: fe_stiffness(sub, diffusion))
    m_fe = _shape_cached("mfe", sub, 0.0, lambda: fe_mass(sub))
    return CellLocalMatrices(
        a_mfe=a_mfe, s_fe=s_fe, m_fe=m_fe,
        weight=weight_tag if weight_tag is not None else diffusion)


def mesh_matrices(mesh: PolytopalMesh, inv_diffusion: Weight, diffusion: Weight,
                  weight_tag=None, threads: int = 1):
    """Element matrices for every cell; cell-parallel when threads > 1."""
    def build(k):
        return cell_matrices(mesh.submeshes[k], inv_diffusion, diffusion, weight_tag)

    if threads > 1 and mesh.n_cells > 64:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(build, range(mesh.n_cells)))
    return [build(k) for k in range(mesh.n_cells)]


def dump_matrices_csv(mats, path):
    """Debug dump of per-cell matrices, row-major, 17 significant digits."""
    with open(path, "w") as fh:
        for k, m in enumerate(mats):
            for name in ("a_mfe", "s_fe", "m_fe"):
                arr = getattr(m, name)
                flat = ",".join(f"{v:.17g}" for v in arr.ravel())
                fh.write(f"{k},{name},{arr.shape[0]},{flat}\n")
