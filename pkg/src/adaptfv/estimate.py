"""Computable a posteriori error estimators and exact-error quadrature.

Three guaranteed upper-bound paths:

* ``estimate_poisson``: simplicial meshes, explicit reconstructions
  (conformity term plus Poincare data oscillation);
* ``estimate_darcy`` / ``estimate_darcy_matrix``: the matrix-vector form
  on polytopal meshes, evaluated purely from per-cell element matrices
  and the flux / potential-point-value vectors;
* ``estimate_nonlinear``: the error-component split (spatial,
  linearization, algebraic, algebraic remainder) for inexact solvers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import MissingConfig, NegativeEstimate, NotEquilibrated, ZeroError
from .localmat import (CellLocalMatrices, batch_quad_points, integrate,
                       quad_rule, split_triangles, tri_quad_points)
from .mesh import PolytopalMesh, SimplicialMesh
from .reconstruct import P2Potential, PointValueVector
from .scheme import FaceFluxVector, SolverSnapshot, component_fluxes


def _tri_areas_batch(tris):
    return 0.5 * np.abs(
        (tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 1] - tris[:, 0, 1])
        - (tris[:, 2, 0] - tris[:, 0, 0]) * (tris[:, 1, 1] - tris[:, 0, 1]))


def _batch_integral(tris, fn, degree=5, subdivisions=1):
    """Per-triangle integrals of a vectorized scalar integrand, batched."""
    s = max(int(subdivisions), 1)
    sp = split_triangles(tris, s)
    rule = quad_rule(degree)
    pts = batch_quad_points(sp, rule)
    areas = _tri_areas_batch(sp)
    vals = np.asarray(fn(pts[..., 0].ravel(), pts[..., 1].ravel()),
                      dtype=float).reshape(pts.shape[:2])
    pieces = areas * (vals @ rule.weights)
    if s > 1:
        pieces = pieces.reshape(len(tris), -1).sum(axis=1)
    return pieces


def cell_integrals(tris, cell_of_tri, n_cells, fn, *, degree=5,
                   subdivisions=1) -> np.ndarray:
    """Per-cell integrals of a vectorized integrand over triangle lists."""
    pieces = _batch_integral(np.asarray(tris, dtype=float), fn, degree,
                             subdivisions)
    if cell_of_tri is None:
        return pieces
    out = np.zeros(n_cells)
    np.add.at(out, np.asarray(cell_of_tri), pieces)
    return out

STUDY_COLUMNS = ("level", "ndof", "ncells", "error", "estimate",
                 "eta_sp", "eta_lin", "eta_alg", "eta_rem", "i_eff")


def format_study_row(level, ndof, ncells, error, estimate, eta_sp=0.0,
                     eta_lin=0.0, eta_alg=0.0, eta_rem=0.0, i_eff=None):
    """One CSV row of the study schema, 17 significant digits."""
    if i_eff is None:
        i_eff = estimate / error if error > 0 else float("inf")
    nums = (error, estimate, eta_sp, eta_lin, eta_alg, eta_rem, i_eff)
    return f"{level},{ndof},{ncells}," + ",".join(f"{v:.17g}" for v in nums)


@dataclass
class EstimatorConfig:
    """Constants entering the error-component estimates.

    ``friedrichs`` is the constant of ``||v|| <= C_F h_Om ||grad v||``;
    the default 1 is always valid and 1/(pi d) <= C_F <= 1 may be used
    to sharpen."""

    h_domain: float
    friedrichs: float = 1.0
    c: float = 1.0
    C: float = 1.0
    extra_steps: int = 5

    def __post_init__(self):
        lo = 1.0 / (np.pi * 2.0)
        if not (lo - 1e-12 <= self.friedrichs <= 1.0 + 1e-12):
            raise MissingConfig(
                f"Friedrichs constant must lie in [1/(pi d), 1]; got {self.friedrichs}")
        if not (0 < self.c <= self.C):
            raise MissingConfig("need 0 < c <= C")


@dataclass
class EstimateBreakdown:
    """Per-cell error-component estimators and their totals.

    ``eta_osc`` carries the data-oscillation contribution for sources
    that are not cellwise constant (zero under the theorems' hypothesis
    of elementwise-constant f)."""

    eta_sp: np.ndarray
    eta_lin: np.ndarray
    eta_alg: np.ndarray
    eta_rem: np.ndarray
    eta_osc: Optional[np.ndarray] = None

    @staticmethod
    def _total(arr):
        return float(np.sqrt(np.sum(np.square(arr))))

    @property
    def total_sp(self):
        return self._total(self.eta_sp)

    @property
    def total_lin(self):
        return self._total(self.eta_lin)

    @property
    def total_alg(self):
        return self._total(self.eta_alg)

    @property
    def total_rem(self):
        return self._total(self.eta_rem)

    @property
    def total_osc(self):
        return self._total(self.eta_osc) if self.eta_osc is not None else 0.0

    @property
    def total(self):
        """The guaranteed bound: sum of the component totals."""
        return self.total_sp + self.total_lin + self.total_alg \
            + self.total_rem + self.total_osc


# ----------------------------------------------------------------------
# simplicial (explicit reconstruction) path
# ----------------------------------------------------------------------

def estimate_poisson(mesh: SimplicialMesh, u_h, s_h: P2Potential,
                     f: Optional[Callable] = None, *, source_integrals=None,
                     check_equilibration=True, include_oscillation=True,
                     equil_rel_tol=1e-9, oscillation_subdivisions=1):
    """Per-cell estimators ``eta_K^2 = ||u_h + grad s_h||_K^2
    + (h_K/pi)^2 ||f - f_K||_K^2`` and the total.

    ``u_h`` must be the equilibrated lifting (checked against the mean
    source unless disabled); ``s_h`` the conforming quadratic."""
    nc = mesh.n_cells
    if source_integrals is not None:
        F = np.asarray(source_integrals, dtype=float)
    elif f is not None:
        F = np.array([integrate(mesh.cell_points(k), f, degree=5)
                      for k in range(nc)])
    else:
        F = np.zeros(nc)

    if check_equilibration:
        div = 2.0 * u_h.c
        mean = F / mesh.areas
        # balance defect per cell, relative to the gross flux turnover
        # (|f| alone degenerates for harmonic problems)
        defect = np.abs(div - mean) * mesh.areas
        turnover = np.abs(F) + np.abs(div) * mesh.areas \
            + np.abs(u_h.a).max() * mesh.diameters
        scale = max(turnover.max(), 1e-14)
        if defect.max() > equil_rel_tol * scale:
            raise NotEquilibrated(
                f"flux balance defect {defect.max():.3e} (scale {scale:.3e})")

    rule = quad_rule(2)
    pts = batch_quad_points(u_h.tris, rule)
    vals = u_h.eval_batch(pts) + s_h.grad_batch(rule)
    eta_sq = mesh.areas * (np.einsum("nqd,nqd->nq", vals, vals) @ rule.weights)
    if include_oscillation and f is not None:
        osc = _oscillation_sq(u_h.tris, f, F / mesh.areas,
                              subdivisions=oscillation_subdivisions)
        eta_sq += (mesh.diameters / np.pi) ** 2 * np.maximum(osc, 0.0)
    eta = np.sqrt(eta_sq)
    return eta, float(np.sqrt(eta_sq.sum()))


def _oscillation_sq(tris, f, means, cell_of_tri=None, subdivisions=1):
    """Per-cell ``||f - mean_K||_K^2`` by degree-5 batched quadrature.

    ``means`` is per cell; ``cell_of_tri`` maps triangles to cells (the
    identity when each cell is one triangle)."""
    if cell_of_tri is None:
        mk = np.asarray(means, dtype=float)
    else:
        mk = np.asarray(means, dtype=float)[cell_of_tri]
    s = max(int(subdivisions), 1)
    sp = split_triangles(tris, s)
    rule = quad_rule(5)
    pts = batch_quad_points(sp, rule)
    areas = _tri_areas_batch(sp)
    fv = np.asarray(f(pts[..., 0].ravel(), pts[..., 1].ravel()),
                    dtype=float).reshape(pts.shape[:2])
    mk_tri = np.repeat(mk, s * s)
    vals = (fv - mk_tri[:, None]) ** 2
    pieces = (areas * (vals @ rule.weights)).reshape(len(tris), -1).sum(axis=1)
    if cell_of_tri is None:
        return pieces
    out = np.zeros(len(means))
    np.add.at(out, cell_of_tri, pieces)
    return out


def estimate_p2_submesh(mesh: PolytopalMesh, submesh: SimplicialMesh,
                        u_sub, s_h: P2Potential, f=None, *,
                        source_integrals=None, diffusion=1.0,
                        include_oscillation=True):
    """Reference ("triangular") estimate on the polytopal path: the
    conformity term is accumulated over each cell's subtriangles and the
    data oscillation uses the per-cell mean (the flux reconstruction is
    equilibrated against cell means only)."""
    nc = mesh.n_cells
    kd = np.broadcast_to(np.asarray(diffusion, dtype=float), (nc,))
    if source_integrals is not None:
        F = np.asarray(source_integrals, dtype=float)
    elif f is not None:
        F = np.array([integrate(mesh.submeshes[k].points[mesh.submeshes[k].tris],
                                f, degree=5) for k in range(nc)])
    else:
        F = np.zeros(nc)

    cell_of_tri = np.repeat(np.arange(nc),
                            [len(mesh.submeshes[k].tris) for k in range(nc)])
    rule = quad_rule(2)
    pts = batch_quad_points(u_sub.tris, rule)
    # || K^{-1/2} (u_h + K grad s_h) ||^2 with scalar K per cell
    vals = u_sub.eval_batch(pts) \
        + kd[cell_of_tri][:, None, None] * s_h.grad_batch(rule)
    pieces = submesh.areas * (np.einsum("nqd,nqd->nq", vals, vals) @ rule.weights)
    eta_sq = np.zeros(nc)
    np.add.at(eta_sq, cell_of_tri, pieces / kd[cell_of_tri])
    if include_oscillation and f is not None:
        osc = _oscillation_sq(u_sub.tris, f, F / mesh.areas, cell_of_tri)
        eta_sq += (mesh.diameters / np.pi) ** 2 / kd * np.maximum(osc, 0.0)
    eta = np.sqrt(eta_sq)
    return eta, float(np.sqrt(eta_sq.sum()))


# ----------------------------------------------------------------------
# matrix-vector path
# ----------------------------------------------------------------------

def estimate_darcy_matrix(u_ext, z_cell, z_ext, F_K, area,
                          mats: CellLocalMatrices, *, cross_factor=2.0,
                          clamp_rel=1e-12):
    """One cell's squared estimator
    ``U^t A U + Z^t S Z + cf (U^t Z_ext - F_K |K|^{-1} 1^t M Z)``.

    Round-off negativity within ``clamp_rel`` of the cell energy scale is
    clamped to zero; anything larger raises (orientation bug)."""
    u = np.asarray(u_ext, dtype=float)
    z = np.asarray(z_cell, dtype=float)
    ze = np.asarray(z_ext, dtype=float)
    e_u = float(u @ mats.a_mfe @ u)
    e_z = float(z @ mats.s_fe @ z)
    cross = float(u @ ze) - F_K / area * float(mats.m_fe.sum(axis=0) @ z)
    val = e_u + e_z + cross_factor * cross
    scale = max(e_u + e_z, 1e-300)
    if val < -clamp_rel * scale:
        raise NegativeEstimate(
            f"eta_K^2 = {val:.3e} below the -{clamp_rel:g} x {scale:.3e} clamp")
    return max(val, 0.0)


def estimate_darcy(mesh: PolytopalMesh, mats, fluxes: FaceFluxVector,
                   zvals: PointValueVector, F, *, cross_factor=2.0,
                   f=None, oscillation: str = "reject", diffusion=1.0,
                   constant_source=False):
    """Matrix-form estimator over all cells; returns (per-cell, total).

    The theorem behind the pure matrix form assumes ``f`` constant per
    cell.  For other sources choose ``oscillation='add'`` (appends the
    per-cell Poincare term ``(h_K/pi)^2 k^{-1} ||f - f_K||_K^2`` inside
    ``eta_K^2``, keeping the bound guaranteed) or ``'ignore'`` (neglect
    it, reproducing the paper's polygonal experiments); the default
    rejects non-constant sources."""
    nc = mesh.n_cells
    eta_sq = np.empty(nc)
    for k in range(nc):
        eta_sq[k] = estimate_darcy_matrix(
            fluxes.cell_ext(k), zvals.cell_gathering(k), zvals.cell_ext(k),
            float(F[k]), mesh.areas[k], mats[k], cross_factor=cross_factor)
    if not constant_source and f is not None:
        if oscillation == "reject":
            raise MissingConfig(
                "matrix estimator needs a cellwise-constant source; pass "
                "oscillation='add' (guaranteed) or 'ignore'")
        if oscillation == "add":
            kd = np.broadcast_to(np.asarray(diffusion, dtype=float), (nc,))
            tris, cell_of_tri = _submesh_triangles(mesh)
            osc = _oscillation_sq(tris, f, F / mesh.areas, cell_of_tri)
            eta_sq += (mesh.diameters / np.pi) ** 2 / kd * np.maximum(osc, 0.0)
        elif oscillation != "ignore":
            raise MissingConfig(f"unknown oscillation mode {oscillation!r}")
    eta = np.sqrt(eta_sq)
    return eta, float(np.sqrt(eta_sq.sum()))


def _submesh_triangles(mesh: PolytopalMesh):
    tris = []
    cell_of_tri = []
    for k in range(mesh.n_cells):
        sub = mesh.submeshes[k]
        tris.append(sub.points[sub.tris])
        cell_of_tri.extend([k] * len(sub.tris))
    return np.vstack(tris), np.asarray(cell_of_tri)


def source_oscillation(mesh: PolytopalMesh, f, F, subdivisions=1) -> np.ndarray:
    """Per-cell ``||f - f_K||_K`` over the submesh triangles."""
    tris, cell_of_tri = _submesh_triangles(mesh)
    osq = _oscillation_sq(tris, f, np.asarray(F) / mesh.areas, cell_of_tri,
                          subdivisions=subdivisions)
    return np.sqrt(np.maximum(osq, 0.0))


class CellGroups:
    """Cells grouped by face count, with stacked gather indices and
    element matrices, so the matrix estimators evaluate as batched
    einsums instead of per-cell loops."""

    def __init__(self, mesh: PolytopalMesh, mats):
        by_size = {}
        for k in range(mesh.n_cells):
            key = (len(mesh.cell_faces[k]), mesh.submeshes[k].has_center)
            by_size.setdefault(key, []).append(k)
        self.mesh = mesh
        self.groups = []
        for (nfc, has_center), cells in sorted(by_size.items()):
            cells = np.asarray(cells)
            fid = np.stack([mesh.cell_faces[k] for k in cells])
            sgn = np.stack([mesh.cell_face_signs[k] for k in cells]).astype(float)
            loop = np.stack([mesh.loops[k] for k in cells])
            A = np.stack([mats[k].a_mfe for k in cells])
            S = np.stack([mats[k].s_fe for k in cells])
            Msum = np.stack([mats[k].m_fe.sum(axis=0) for k in cells])
            self.groups.append(dict(
                cells=cells, fid=fid, sgn=sgn, loop=loop, A=A, S=S,
                Msum=Msum, has_center=has_center,
                areas=mesh.areas[cells], n=nfc))

    def energy_sq(self, values) -> np.ndarray:
        """Per-cell ``U_K^t A_MFE U_K`` of a global face vector."""
        out = np.empty(self.mesh.n_cells)
        for g in self.groups:
            ue = g["sgn"] * values[g["fid"]]
            out[g["cells"]] = np.einsum("gi,gij,gj->g", ue, g["A"], ue)
        return out

    def eta_sp_sq(self, values, zvertex, zcenter, cross_factor) -> np.ndarray:
        """Per-cell spatial estimator with the divergence taken from the
        actual flux sums (see estimate_nonlinear)."""
        mesh = self.mesh
        zface = 0.5 * (zvertex[mesh.faces[:, 0]] + zvertex[mesh.faces[:, 1]])
        out = np.empty(mesh.n_cells)
        for g in self.groups:
            ue = g["sgn"] * values[g["fid"]]
            z = zvertex[g["loop"]]
            if g["has_center"]:
                z = np.concatenate([z, zcenter[g["cells"]][:, None]], axis=1)
            ze = zface[g["fid"]]
            e_u = np.einsum("gi,gij,gj->g", ue, g["A"], ue)
            e_z = np.einsum("gi,gij,gj->g", z, g["S"], z)
            cross = np.einsum("gi,gi->g", ue, ze) \
                - ue.sum(axis=1) / g["areas"] \
                * np.einsum("gi,gi->g", g["Msum"], z)
            out[g["cells"]] = e_u + e_z + cross_factor * cross
        scale = np.maximum(self.energy_scale(values, zvertex, zcenter), 1e-300)
        bad = out < -1e-12 * scale
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise NegativeEstimate(
                f"eta_K^2 = {out[bad][0]:.3e} below the clamp in cell {k}")
        return np.maximum(out, 0.0)

    def energy_scale(self, values, zvertex, zcenter) -> np.ndarray:
        out = np.empty(self.mesh.n_cells)
        for g in self.groups:
            ue = g["sgn"] * values[g["fid"]]
            z = zvertex[g["loop"]]
            if g["has_center"]:
                z = np.concatenate([z, zcenter[g["cells"]][:, None]], axis=1)
            out[g["cells"]] = np.einsum("gi,gij,gj->g", ue, g["A"], ue) \
                + np.einsum("gi,gij,gj->g", z, g["S"], z)
        return out


def estimate_nonlinear(mesh: PolytopalMesh, mats, snapshot: SolverSnapshot,
                       zvals: PointValueVector, F,
                       config: EstimatorConfig, *, f=None,
                       oscillation: str = "reject", osc_norms=None,
                       constant_source=False,
                       groups: Optional[CellGroups] = None) -> EstimateBreakdown:
    """Error-component estimators of the quasi-linear problem.

    ``mats`` must carry the scaled weights: ``c^{-1} C^2 I`` in place of
    the inverse diffusion and ``c^{-2} C I`` in place of the diffusion.
    The spatial cross terms pick up the factor ``2 c^{-1} C``; the
    algebraic remainder is ``c^{-1/2} C C_F h_Om |K|^{-1/2} |R_K|``.
    Sources that are not cellwise constant add the oscillation component
    ``c^{-1/2} C (h_K/pi) ||f - f_K||_K`` when ``oscillation='add'``."""
    if config is None:
        raise MissingConfig("estimate_nonlinear needs an EstimatorConfig")
    comp = component_fluxes(snapshot, mesh)
    c, C = config.c, config.C
    if groups is None:
        groups = CellGroups(mesh, mats)
    # mid-iteration the lifting's divergence is the actual flux sum, not
    # the data F_K (they agree at convergence; the balance misfit is
    # carried by the remainder estimator)
    sp = groups.eta_sp_sq(comp["discretization"].values, zvals.vertex,
                          zvals.center, cross_factor=2.0 * C / c)
    li = np.maximum(groups.energy_sq(comp["linearization"].values), 0.0)
    al = np.maximum(groups.energy_sq(comp["algebraic"].values), 0.0)
    rem = (C / np.sqrt(c)) * config.friedrichs * config.h_domain \
        * np.abs(snapshot.residual_extended) / np.sqrt(mesh.areas)
    osc = None
    if not constant_source and (f is not None or osc_norms is not None):
        if oscillation == "reject":
            raise MissingConfig(
                "nonlinear estimator needs a cellwise-constant source; pass "
                "oscillation='add' (guaranteed) or 'ignore'")
        if oscillation == "add":
            if osc_norms is None:
                osc_norms = source_oscillation(mesh, f, F)
            osc = (C / np.sqrt(c)) * (mesh.diameters / np.pi) * osc_norms
        elif oscillation != "ignore":
            raise MissingConfig(f"unknown oscillation mode {oscillation!r}")
    return EstimateBreakdown(np.sqrt(sp), np.sqrt(li), np.sqrt(al), rem, osc)


# ----------------------------------------------------------------------
# exact errors and effectivity
# ----------------------------------------------------------------------

def flux_error_batch(flux_fn: Callable, tris, a, c, cell_of_tri, n_cells, *,
                     inv_weight=1.0, subdivisions=1, degree=5):
    """Weighted L2 flux error of a piecewise RT0 field against an
    analytic flux, accumulated per cell.

    ``(tris, a, c)`` are the field pieces; ``inv_weight`` multiplies the
    squared difference: ``1/k`` for the energy norm with scalar
    diffusion ``k``, the monotonicity constant ``c`` for the nonlinear
    measure.  ``subdivisions`` refines the quadrature for integrands
    with sub-cell features."""
    s = max(int(subdivisions), 1)
    sp = split_triangles(tris, s)
    rule = quad_rule(degree)
    pts = batch_quad_points(sp, rule)
    areas = _tri_areas_batch(sp)
    u = np.asarray(flux_fn(pts[..., 0].ravel(), pts[..., 1].ravel()),
                   dtype=float).reshape(pts.shape[0], pts.shape[1], 2)
    a_sp = np.repeat(np.asarray(a, dtype=float), s * s, axis=0)
    c_sp = np.repeat(np.asarray(c, dtype=float), s * s)
    uh = a_sp[:, None, :] + c_sp[:, None, None] * pts
    d = u - uh
    pieces = areas * (np.einsum("nqd,nqd->nq", d, d) @ rule.weights)
    pieces = pieces.reshape(len(tris), -1).sum(axis=1)
    per_cell_sq = np.zeros(n_cells)
    np.add.at(per_cell_sq, np.asarray(cell_of_tri), pieces)
    per_cell_sq *= np.broadcast_to(np.asarray(inv_weight, dtype=float),
                                   (n_cells,))
    per_cell_sq = np.maximum(per_cell_sq, 0.0)
    return np.sqrt(per_cell_sq), float(np.sqrt(per_cell_sq.sum()))


def exact_energy_error(flux_fn: Callable, fields, *, inv_weight=1.0,
                       subdivisions=1, degree=5):
    """Weighted L2 flux error of per-cell RT0 liftings (one field per
    cell, e.g. the fan liftings of a polytopal mesh)."""
    tris = np.vstack([f.tris for f in fields])
    a = np.vstack([f.a for f in fields])
    c = np.concatenate([f.c for f in fields])
    cell_of_tri = np.repeat(np.arange(len(fields)),
                            [len(f.c) for f in fields])
    return flux_error_batch(flux_fn, tris, a, c, cell_of_tri, len(fields),
                            inv_weight=inv_weight, subdivisions=subdivisions,
                            degree=degree)


def simplicial_error(mesh: SimplicialMesh, flux_fn, u_h, *, inv_weight=1.0,
                     subdivisions=1):
    """Energy error of a single RT0Field over a simplicial mesh."""
    return flux_error_batch(flux_fn, u_h.tris, u_h.a, u_h.c,
                            np.arange(mesh.n_cells), mesh.n_cells,
                            inv_weight=inv_weight, subdivisions=subdivisions)


def effectivity(total_estimate: float, total_error: float) -> float:
    """Ratio of the estimator to the error."""
    if total_error <= 0.0:
        raise ZeroError("effectivity undefined for zero error")
    return total_estimate / total_error
