"""Adaptive inexact solving and estimator-driven mesh refinement.

This module glues problems, schemes, reconstructions, and estimators
into runnable drivers:

* :func:`discretize` builds a scheme plus estimator context on a mesh;
* :func:`adaptive_inexact_solve` runs the nested linearization /
  algebraic loops with the component-balancing stopping criteria
  (steady restriction of the paper-style fully adaptive algorithm);
* :func:`amr_loop` and :func:`convergence_study` drive the mesh loops
  and emit rows of the study CSV schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import estimate as est
from . import localmat, reconstruct, scheme as sch
from .errors import MaxIterations, MissingConfig, SolverBreakdown
from .mesh import (Mesh, PolytopalMesh, SimplicialMesh, admissibility,
                   as_polytopal, refine)
from .problems import ManufacturedProblem
from .sparse_linalg import (Breakdown, bicgstab_step, cg_step, dense_lu_solve,
                            new_state, refresh_residual, run_to_tolerance)

_DENSE_LIMIT = 2500


@dataclass
class AdaptiveConfig:
    """Parameters of the adaptive stopping criteria and marking rules."""

    gamma_lin: float = 0.1
    gamma_alg: float = 0.01
    extra_steps: int = 5          # j; adaptively doubled, capped below
    extra_steps_cap: int = 80
    delta_ref: float = 0.7
    delta_deref: float = 0.2
    max_lin_iterations: int = 200
    max_alg_iterations: int = 100000
    eval_every: int = 5           # estimator cadence m (down to 1)
    lin_residual_fallback: float = 1e-8
    alg_residual_fallback: float = 1e-12
    rem_fraction: float = 0.1     # keep H_rem <= this x the reference below
    # "components": the smaller active one of H_alg, H_lin (strict rule;
    # ill-posed for linear problems where H_lin vanishes identically);
    # "estimators": the largest of H_sp, H_lin, H_alg (the remainder is
    # negligible against the other estimators in the bound)
    rem_reference: str = "components"

    def __post_init__(self):
        if not (0.0 <= self.gamma_lin < 1.0 and 0.0 <= self.gamma_alg < 1.0):
            raise MissingConfig("gamma_lin, gamma_alg must lie in [0, 1)")
        if not (0.0 < self.delta_deref < self.delta_ref < 1.0):
            raise MissingConfig("need 0 < delta_deref < delta_ref < 1")


@dataclass
class HistoryRecord:
    k: int
    i: int
    eta_sp: float
    eta_lin: float
    eta_alg: float
    eta_rem: float
    residual_norm: float
    extra_steps: int


@dataclass
class RunHistory:
    """Chronological log of one adaptive (or standard) solver run."""

    records: list = field(default_factory=list)
    linearization_iterations: int = 0
    algebraic_iterations: int = 0
    stopped_by: str = ""

    def append(self, rec: HistoryRecord):
        self.records.append(rec)

    @property
    def final(self) -> Optional[HistoryRecord]:
        return self.records[-1] if self.records else None


# ----------------------------------------------------------------------
# discretization bundle
# ----------------------------------------------------------------------

@dataclass
class Discretization:
    """A problem bound to a mesh, a scheme, and its estimator context."""

    problem: ManufacturedProblem
    mesh: Mesh
    scheme_name: str              # "tpfa" | "hmfe"
    poly: PolytopalMesh           # polytopal view used by the estimators
    F: np.ndarray                 # source integrals per cell
    boundary_value: Optional[Callable]
    fv: object = None             # LinearTPFA / NonlinearTPFA
    hmfe: Optional[sch.HMFESystem] = None
    config: Optional[est.EstimatorConfig] = None
    _mats: Optional[list] = None
    _osc: Optional[np.ndarray] = None
    _groups: Optional[est.CellGroups] = None
    threads: int = 1
    source_subdivisions: int = 2

    @property
    def n_cells(self):
        return self.mesh.n_cells

    @property
    def ndof(self):
        if self.scheme_name == "hmfe":
            return len(self.hmfe.interior)
        return self.mesh.n_cells

    def matrices(self):
        """Estimator element matrices: ``c^-1 C^2 I`` in the inverse-
        diffusion slot and ``c^-2 C I`` in the diffusion slot for the
        quasi-linear problems (c, C the config constants), else the
        problem's scalar diffusion."""
        if self._mats is None:
            if self.problem.is_nonlinear:
                c, C = self.config.c, self.config.C
                inv_w, w = C * C / c, C / (c * c)
            else:
                kd = self.problem.diffusion
                inv_w, w = 1.0 / kd, kd
            self._mats = localmat.mesh_matrices(self.poly, inv_w, w,
                                                threads=self.threads)
        return self._mats

    def oscillation_norms(self):
        """Cached per-cell ``||f - f_K||_K`` (zeros for constant sources)."""
        if self._osc is None:
            if self.problem.constant_source:
                self._osc = np.zeros(self.poly.n_cells)
            else:
                self._osc = est.source_oscillation(self.poly, self.problem.f,
                                                   self.F)
        return self._osc

    def groups(self):
        """Cached grouped gather machinery for the matrix estimators."""
        if self._groups is None:
            self._groups = est.CellGroups(self.poly, self.matrices())
        return self._groups

def _source_integrals(problem, mesh, subdivisions):
    if isinstance(mesh, SimplicialMesh):
        tris = mesh.vertices[mesh.cells]
        cell_of_tri = None
    else:
        tris, cell_of_tri = est._submesh_triangles(mesh)
    return est.cell_integrals(tris, cell_of_tri, mesh.n_cells, problem.f,
                              degree=5, subdivisions=subdivisions)


def discretize(problem: ManufacturedProblem, mesh: Mesh, scheme_name="tpfa", *,
               collocation=None, source_subdivisions=None,
               threads: int = 1) -> Discretization:
    """Bind a catalog problem to a mesh and scheme."""
    if source_subdivisions is None:
        source_subdivisions = problem.quad_subdivisions
    F = _source_integrals(problem, mesh, source_subdivisions)
    bval = None if problem.homogeneous else problem.trace
    poly = mesh if isinstance(mesh, PolytopalMesh) else as_polytopal(mesh)
    cfg_kw = {}
    if problem.is_nonlinear:
        # the estimator constants are those of the inverse (flux ->
        # gradient) map; for the prototype coefficient with parameters
        # (c, C) these are (1/C, 1/c)
        cfg_kw = dict(c=1.0 / problem.nonlinearity.C,
                      C=1.0 / problem.nonlinearity.c)
    config = est.EstimatorConfig(h_domain=problem.h_domain, **cfg_kw)
    disc = Discretization(problem, mesh, scheme_name, poly, F, bval,
                          config=config, threads=threads,
                          source_subdivisions=source_subdivisions)

    if scheme_name == "tpfa":
        adm = admissibility(mesh, collocation)
        if problem.is_nonlinear:
            disc.fv = sch.NonlinearTPFA(mesh, adm, problem.nonlinearity,
                                        boundary_value=bval, source_integrals=F)
        else:
            disc.fv = sch.LinearTPFA(mesh, adm, problem.diffusion,
                                     boundary_value=bval, source_integrals=F)
    elif scheme_name == "hmfe":
        if problem.is_nonlinear:
            raise MissingConfig("the hybridized path covers the linear problems")
        if not isinstance(mesh, PolytopalMesh):
            poly = as_polytopal(mesh)
            disc.poly = poly
        disc.hmfe = sch.assemble_hmfe(disc.poly,
                                      [m.a_mfe for m in disc.matrices()],
                                      boundary_value=bval, source_integrals=F)
    else:
        raise MissingConfig(f"unknown scheme {scheme_name!r}")
    return disc


# ----------------------------------------------------------------------
# linear solving and estimation
# ----------------------------------------------------------------------

@dataclass
class SolveResult:
    P: np.ndarray
    fluxes: sch.FaceFluxVector
    multipliers: Optional[np.ndarray] = None
    algebraic_iterations: int = 0
    linearization_iterations: int = 0


def _solve_spd(A, b, x0=None, rel_tol=1e-13):
    n = A.shape[0]
    if n <= _DENSE_LIMIT:
        return dense_lu_solve(A.todense(), b), 0
    return run_to_tolerance(A, b, x0=x0, rel_tol=rel_tol, max_iter=100 * n,
                            method="cg", jacobi=True)


def solve_linear(disc: Discretization, *, rel_tol=1e-13) -> SolveResult:
    """Converged solve of a linear discretization."""
    if disc.scheme_name == "hmfe":
        n = len(disc.hmfe.interior)
        if n == 0:
            lam_int = np.zeros(0)
            its = 0
        elif n <= _DENSE_LIMIT:
            lam_int = dense_lu_solve(disc.hmfe.matrix.todense(), disc.hmfe.rhs)
            its = 0
        else:
            lam_int, its = run_to_tolerance(disc.hmfe.matrix, disc.hmfe.rhs,
                                            rel_tol=rel_tol, max_iter=100 * n,
                                            method="cg", jacobi=True)
        lam = disc.hmfe.full_multipliers(lam_int)
        P, U = disc.hmfe.recover(lam)
        return SolveResult(P, U, lam, its)
    lin = disc.fv.linearize(np.zeros(disc.n_cells))
    A, b = lin.system()
    P, its = _solve_spd(A, b, rel_tol=rel_tol)
    return SolveResult(P, disc.fv.fluxes(P), None, its)


def solve_nonlinear(disc: Discretization, *, linearization="newton",
                    lin_tol=1e-8, max_iter=200, damping=True) -> SolveResult:
    """Standard-criterion nonlinear solve: iterate until the relative
    nonlinear residual drops below ``lin_tol``; exact algebraic solves."""
    fv = disc.fv
    P = np.zeros(disc.n_cells)
    r0 = np.linalg.norm(fv.residual_cells(P))
    r0 = max(r0, 1e-300)
    total_alg = 0
    for k in range(1, max_iter + 1):
        lin = fv.linearize(P, linearization)
        A, b = lin.system()
        try:
            P_new, its = _solve_spd(A, b, x0=P) if lin.method != "newton" \
                else (dense_lu_solve(A.todense(), b), 0) \
                if A.shape[0] <= _DENSE_LIMIT \
                else run_to_tolerance(A, b, x0=P, rel_tol=1e-13,
                                      max_iter=100 * A.shape[0],
                                      method="bicgstab", jacobi=True)
        except Breakdown as e:
            raise SolverBreakdown(str(e)) from None
        total_alg += its
        if damping:
            rk = np.linalg.norm(fv.residual_cells(P))
            step = P_new - P
            lam = 1.0
            for _ in range(8):
                if np.linalg.norm(fv.residual_cells(P + lam * step)) <= rk * (1 + 1e-12):
                    break
                lam *= 0.5
            P_new = P + lam * step
        P = P_new
        if np.linalg.norm(fv.residual_cells(P)) <= lin_tol * r0:
            return SolveResult(P, fv.fluxes(P), None, total_alg, k)
    raise MaxIterations(f"no convergence in {max_iter} linearization steps")


def point_values(disc: Discretization, P, multipliers=None):
    if disc.scheme_name == "hmfe" and multipliers is not None:
        return reconstruct.point_values_hyb(disc.poly, multipliers, P,
                                            boundary_values=disc.boundary_value)
    return reconstruct.point_values_avg(disc.poly, P,
                                        boundary_values=disc.boundary_value)


def estimate_solution(disc: Discretization, result: SolveResult,
                      path: str = "auto", *, include_oscillation=None):
    """Per-cell eta and total for a converged linear solve.

    Paths: ``p2`` (simplicial explicit reconstructions), ``matrix``
    (point values + element matrices), ``p2sub`` (reference quadratic on
    the polytopal submesh)."""
    problem = disc.problem
    if path == "auto":
        path = "p2" if isinstance(disc.mesh, SimplicialMesh) else "matrix"
    kd = problem.diffusion
    if path == "p2":
        u_h = reconstruct.lift_flux_simplicial(disc.mesh, result.fluxes)
        ptilde = reconstruct.postprocess_potential(u_h, result.P, kd)
        s_h = reconstruct.average_p2(disc.mesh, ptilde, disc.boundary_value)
        osc = True if include_oscillation is None else include_oscillation
        eta, total = est.estimate_poisson(
            disc.mesh, _scaled_field(u_h, kd), s_h, problem.f,
            source_integrals=disc.F / kd, include_oscillation=osc)
        if kd != 1.0:
            eta = eta * np.sqrt(kd)
            total = total * np.sqrt(kd)
        return eta, total
    if path == "matrix":
        zv = point_values(disc, result.P, result.multipliers)
        osc_mode = "add" if include_oscillation in (None, True) else "ignore"
        return est.estimate_darcy(disc.poly, disc.matrices(), result.fluxes,
                                  zv, disc.F, f=problem.f,
                                  oscillation=osc_mode, diffusion=kd,
                                  constant_source=problem.constant_source)
    if path == "p2sub":
        fields, pcs = reconstruct.lift_flux_polytopal(disc.poly, result.fluxes,
                                                      weight=1.0 / kd)
        submesh, u_sub, s_h = reconstruct.reconstruct_p2_polytopal(
            disc.poly, fields, pcs, result.P, scale=kd,
            boundary_values=disc.boundary_value)
        osc = True if include_oscillation is None else include_oscillation
        return est.estimate_p2_submesh(disc.poly, submesh, u_sub, s_h,
                                       problem.f, source_integrals=disc.F,
                                       diffusion=kd, include_oscillation=osc)
    raise MissingConfig(f"unknown estimator path {path!r}")


def _scaled_field(u_h, kd):
    """The Poisson-path conformity term is ||u_h + grad s||; for scalar
    diffusion k it becomes k^{-1/2}||u_h + k grad s|| = k^{1/2}||u_h/k
    + grad s||, so feed the scaled field and multiply after."""
    if kd == 1.0:
        return u_h
    from .localmat import RT0Field
    return RT0Field(u_h.tris, u_h.a / kd, u_h.c / kd)


def estimate_nonlinear_state(disc: Discretization, snapshot, *,
                             include_oscillation=True) -> est.EstimateBreakdown:
    zv = point_values(disc, snapshot.P)
    return est.estimate_nonlinear(
        disc.poly, disc.matrices(), snapshot, zv, disc.F, disc.config,
        f=disc.problem.f, osc_norms=disc.oscillation_norms(),
        oscillation="add" if include_oscillation else "ignore",
        constant_source=disc.problem.constant_source, groups=disc.groups())


def frozen_estimate_and_error(disc: Discretization, result: SolveResult, *,
                              subdivisions=None, path="p2sub"):
    """Frozen-coefficient evaluation of a converged quasi-linear solve.

    Freezes the scheme's own cell coefficients ``kappa_K`` (the linear
    Darcy problem the last linearization solved) and evaluates the
    linear matrix estimator and the energy error in the matching
    ``kappa^{-1/2}``-weighted norm.  This is the solution-adapted
    evaluation whose effectivity stays flat in the Lipschitz/monotonicity
    ratio; the global-constant theorem weights are pessimistic by a
    factor growing with C/c (see the decisions notes)."""
    problem = disc.problem
    if not problem.is_nonlinear:
        raise MissingConfig("frozen evaluation applies to quasi-linear runs")
    if subdivisions is None:
        subdivisions = max(2, problem.quad_subdivisions)
    kappa = disc.fv.cell_coefficients(result.P)
    fields, pcs = reconstruct.lift_flux_polytopal(disc.poly, result.fluxes,
                                                  weight=1.0 / kappa)
    if path == "matrix":
        mats = [localmat.cell_matrices(disc.poly.submeshes[k], 1.0 / kappa[k],
                                       kappa[k])
                for k in range(disc.poly.n_cells)]
        zv = point_values(disc, result.P)
        eta, total = est.estimate_darcy(
            disc.poly, mats, result.fluxes, zv, disc.F, f=problem.f,
            oscillation="add", diffusion=kappa,
            constant_source=problem.constant_source)
    else:
        submesh, u_sub, s_h = reconstruct.reconstruct_p2_polytopal(
            disc.poly, fields, pcs, result.P, scale=kappa,
            boundary_values=disc.boundary_value)
        eta, total = est.estimate_p2_submesh(
            disc.poly, submesh, u_sub, s_h, problem.f,
            source_integrals=disc.F, diffusion=kappa)
    _, err = est.exact_energy_error(problem.flux, fields,
                                    inv_weight=1.0 / kappa,
                                    subdivisions=subdivisions)
    return eta, total, err


def exact_error(disc: Discretization, result: SolveResult, *,
                subdivisions=None):
    """Energy-norm (linear) or c^{1/2}-weighted L2 (nonlinear) flux error
    against the problem's analytic flux."""
    problem = disc.problem
    if subdivisions is None:
        subdivisions = max(2, problem.quad_subdivisions)

    def flux_fn(x, y):
        return problem.flux(x, y)

    if problem.is_nonlinear:
        # the error measure c^{1/2} ||u - u_h|| with the inverse-map
        # monotonicity constant c = 1/C_prototype
        inv_w = disc.config.c
        lift_weight = 1.0
    else:
        inv_w = 1.0 / problem.diffusion
        lift_weight = 1.0 / problem.diffusion
    if isinstance(disc.mesh, SimplicialMesh):
        u_h = reconstruct.lift_flux_simplicial(disc.mesh, result.fluxes)
        return est.simplicial_error(disc.mesh, flux_fn, u_h, inv_weight=inv_w,
                                    subdivisions=subdivisions)
    fields, _ = reconstruct.lift_flux_polytopal(disc.poly, result.fluxes,
                                                weight=lift_weight)
    return est.exact_energy_error(flux_fn, fields, inv_weight=inv_w,
                                  subdivisions=subdivisions)


# ----------------------------------------------------------------------
# adaptive inexact solve
# ----------------------------------------------------------------------

def _linear_breakdown(disc, lin, k, i, P, P_ext, j) -> est.EstimateBreakdown:
    """Component estimators for a (possibly linear) TPFA-family scheme."""
    snap = sch.make_snapshot(disc.fv, lin, k, i, P, P_extended=P_ext,
                             extra_steps=j)
    return estimate_nonlinear_state(disc, snap)


def frozen_breakdown(disc: Discretization, snapshot) -> est.EstimateBreakdown:
    """Error components in the frozen-coefficient energy weights.

    Freezes the scheme's cell coefficients at the snapshot state and
    evaluates the component estimators as for the corresponding linear
    Darcy problem (cross factor 2, weights ``kappa^{-1}`` / ``kappa``).
    Tracks the actual energy error scale, unlike the global-constant
    theorem weights whose spatial term is pessimistic by a factor that
    grows with C/c."""
    poly = disc.poly
    kappa = disc.fv.cell_coefficients(snapshot.P)
    mats = [localmat.cell_matrices(poly.submeshes[k], 1.0 / kappa[k], kappa[k])
            for k in range(poly.n_cells)]
    groups = est.CellGroups(poly, mats)
    zv = point_values(disc, snapshot.P)
    comp = sch.component_fluxes(snapshot, poly
                                if isinstance(disc.mesh, PolytopalMesh)
                                else disc.mesh)
    sp = groups.eta_sp_sq(comp["discretization"].values, zv.vertex, zv.center,
                          cross_factor=2.0)
    li = np.maximum(groups.energy_sq(comp["linearization"].values), 0.0)
    al = np.maximum(groups.energy_sq(comp["algebraic"].values), 0.0)
    inv_sqrt_k = 1.0 / np.sqrt(kappa)
    rem = disc.config.friedrichs * disc.config.h_domain * inv_sqrt_k \
        * np.abs(snapshot.residual_extended) / np.sqrt(poly.areas)
    osc = None
    if not disc.problem.constant_source:
        osc = (poly.diameters / np.pi) * inv_sqrt_k * disc.oscillation_norms()
    return est.EstimateBreakdown(np.sqrt(sp), np.sqrt(li), np.sqrt(al), rem, osc)


def adaptive_inexact_solve(disc: Discretization, cfg: AdaptiveConfig, *,
                           linearization="newton", exact_algebra=False,
                           balance="theorem") -> tuple:
    """Nested adaptive solver with component-balancing stopping criteria.

    The inner Krylov loop advances step by step and stops once
    ``H_alg <= gamma_alg H_sp`` (evaluated every ``eval_every`` steps,
    using the iterate ``j`` steps back against the current one); the
    outer loop stops once ``H_lin <= gamma_lin H_sp``.  ``j`` doubles
    while the algebraic remainder exceeds ``rem_fraction`` of the
    smaller active component.  Returns ``(SolveResult, RunHistory)``.
    """
    fv = disc.fv
    if fv is None:
        raise MissingConfig("adaptive_inexact_solve drives the FV schemes")
    hist = RunHistory()
    n = disc.n_cells
    P = np.zeros(n)
    is_linear = not disc.problem.is_nonlinear
    r0 = max(np.linalg.norm(fv.residual_cells(P))
             if not is_linear else 1.0, 1e-300)

    for k in range(1, cfg.max_lin_iterations + 1):
        lin = fv.linearize(P, "fixed_point" if is_linear else linearization)
        A, b = lin.system()
        bd = None
        if exact_algebra:
            P_new = dense_lu_solve(A.todense(), b) if n <= _DENSE_LIMIT else \
                run_to_tolerance(A, b, x0=P, rel_tol=1e-13, max_iter=100 * n,
                                 method="cg" if lin.method != "newton"
                                 else "bicgstab", jacobi=True)[0]
            snap = sch.exact_algebra_snapshot(fv, lin, k, P_new)
            bd = frozen_breakdown(disc, snap) if balance == "frozen" \
                else estimate_nonlinear_state(disc, snap)
            hist.append(HistoryRecord(k, 0, bd.total_sp, bd.total_lin,
                                      bd.total_alg, bd.total_rem,
                                      float(np.linalg.norm(snap.residual)), 0))
            P = P_new
        else:
            P, bd = _algebraic_loop(disc, lin, k, P, b, A, cfg, hist)
        hist.linearization_iterations = k
        if is_linear:
            hist.stopped_by = hist.stopped_by or "linear"
            break
        # linearization stopping: balancing criterion, then fallback
        rel = np.linalg.norm(fv.residual_cells(P)) / r0
        if bd is not None and cfg.gamma_lin > 0 \
                and bd.total_lin <= cfg.gamma_lin * bd.total_sp:
            hist.stopped_by = "linearization balance"
            break
        if rel <= cfg.lin_residual_fallback:
            hist.stopped_by = "linearization residual fallback"
            break
    else:
        raise MaxIterations("linearization loop hit max_lin_iterations")
    return SolveResult(P, fv.fluxes(P), None,
                       hist.algebraic_iterations,
                       hist.linearization_iterations), hist


def _algebraic_loop(disc, lin, k, P0, b, A, cfg, hist):
    """Step-wise Krylov with estimator-based stopping; returns the
    adopted iterate (the extended one) and the last breakdown."""
    symmetric = lin.method != "newton"
    step = cg_step if symmetric else bicgstab_step
    state = new_state(A, b, x0=P0)
    nb = max(float(np.linalg.norm(b)), 1e-300)
    keep = cfg.extra_steps_cap + cfg.eval_every + 1
    ring = {0: state.x.copy()}
    j = cfg.extra_steps
    bd = None
    fallback_tol = cfg.alg_residual_fallback
    while state.iteration < cfg.max_alg_iterations:
        for _ in range(cfg.eval_every):
            try:
                step(A, b, state)
            except Breakdown as e:
                raise SolverBreakdown(f"algebraic solver broke down: {e}") from None
            ring[state.iteration] = state.x.copy()
            old = state.iteration - keep
            if old in ring:
                del ring[old]
        if state.iteration % (10 * cfg.eval_every) == 0:
            refresh_residual(A, b, state)
        i_now = state.iteration
        i_eval = i_now - j
        if i_eval >= 1 and i_eval in ring:
            bd = _linear_breakdown(disc, lin, k, i_eval, ring[i_eval],
                                   state.x, j)
            # grow j while the remainder dominates the active components,
            # shrink it back (hysteresis) once the remainder is negligible
            while _remainder_too_big(bd, cfg) and j < cfg.extra_steps_cap \
                    and (i_now - 2 * j) in ring and (i_now - 2 * j) >= 1:
                j = min(2 * j, cfg.extra_steps_cap)
                i_eval = i_now - j
                bd = _linear_breakdown(disc, lin, k, i_eval, ring[i_eval],
                                       state.x, j)
            while j > cfg.extra_steps and not _remainder_too_big(bd, cfg):
                j_try = max(j // 2, cfg.extra_steps)
                mid = i_eval + j_try
                if mid not in ring:
                    break
                # anchor the trial window at the same iterate so both
                # certifications are comparable
                bd_try = _linear_breakdown(disc, lin, k, i_eval,
                                           ring[i_eval], ring[mid], j_try)
                if _remainder_too_big(bd_try, cfg):
                    break
                j, bd = j_try, bd_try
            hist.append(HistoryRecord(k, i_eval, bd.total_sp, bd.total_lin,
                                      bd.total_alg, bd.total_rem,
                                      float(np.linalg.norm(state.r)), j))
            hist.algebraic_iterations += 0  # counted below
            if cfg.gamma_alg > 0 and bd.total_alg <= cfg.gamma_alg * bd.total_sp:
                hist.algebraic_iterations += i_now
                hist.stopped_by = "algebraic balance"
                return state.x.copy(), bd
        if float(np.linalg.norm(state.r)) <= fallback_tol * nb:
            refresh_residual(A, b, state)
            if float(np.linalg.norm(state.r)) <= fallback_tol * nb:
                hist.algebraic_iterations += state.iteration
                hist.stopped_by = "algebraic residual fallback"
                if bd is None:
                    snap = sch.exact_algebra_snapshot(disc.fv, lin, k, state.x)
                    bd = estimate_nonlinear_state(disc, snap)
                return state.x.copy(), bd
    raise MaxIterations("algebraic loop hit max_alg_iterations")


def _remainder_too_big(bd, cfg):
    if cfg.rem_reference == "estimators":
        ref = max(bd.total_sp, bd.total_lin, bd.total_alg)
    else:
        active = [v for v in (bd.total_alg, bd.total_lin) if v > 1e-300]
        ref = min(active) if active else 0.0
    if ref <= 0.0:
        return False
    return bd.total_rem > cfg.rem_fraction * ref


# ----------------------------------------------------------------------
# marking and mesh loops
# ----------------------------------------------------------------------

def mark_cells(eta, delta_ref: float):
    """Cells with ``eta_K >= delta_ref * max eta`` (scale-invariant)."""
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        return np.array([], dtype=np.int64)
    return np.flatnonzero(eta >= delta_ref * eta.max())


def derefine_set(eta, delta_deref: float):
    """Cells with ``eta_K <= delta_deref * max eta``."""
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        return np.array([], dtype=np.int64)
    return np.flatnonzero(eta <= delta_deref * eta.max())


@dataclass
class StudyRow:
    level: int
    ndof: int
    ncells: int
    error: float
    estimate: float
    eta_sp: float = 0.0
    eta_lin: float = 0.0
    eta_alg: float = 0.0
    eta_rem: float = 0.0

    @property
    def i_eff(self):
        return self.estimate / self.error if self.error > 0 else float("inf")

    def csv(self):
        return est.format_study_row(self.level, self.ndof, self.ncells,
                                    self.error, self.estimate, self.eta_sp,
                                    self.eta_lin, self.eta_alg, self.eta_rem)


def study_csv(rows) -> str:
    return ",".join(est.STUDY_COLUMNS) + "\n" + "\n".join(r.csv() for r in rows) + "\n"


def _solve_and_estimate(problem, mesh, scheme_name, estimator_path, *,
                        linearization="newton", threads=1,
                        include_oscillation=None, error_subdivisions=None):
    disc = discretize(problem, mesh, scheme_name, threads=threads)
    if problem.is_nonlinear:
        result = solve_nonlinear(disc, linearization=linearization)
        lin = disc.fv.linearize(result.P, linearization)
        snap = sch.exact_algebra_snapshot(disc.fv, lin,
                                          result.linearization_iterations,
                                          result.P)
        bd = estimate_nonlinear_state(disc, snap)
        eta = np.sqrt(bd.eta_sp**2 + bd.eta_lin**2 + bd.eta_alg**2 + bd.eta_rem**2)
        total = bd.total
        comps = (bd.total_sp, bd.total_lin, bd.total_alg, bd.total_rem)
    else:
        result = solve_linear(disc)
        eta, total = estimate_solution(disc, result, estimator_path,
                                       include_oscillation=include_oscillation)
        comps = (total, 0.0, 0.0, 0.0)
    _, err = exact_error(disc, result, subdivisions=error_subdivisions)
    return disc, result, eta, total, comps, err


def convergence_study(problem, mesh_generator, levels, scheme_name="tpfa",
                      estimator_path="auto", *, linearization="newton",
                      threads=1, include_oscillation=None,
                      error_subdivisions=None):
    """Uniform-refinement study: one row per level.

    ``mesh_generator(level)`` supplies the mesh of each level."""
    rows = []
    for lvl in range(levels):
        mesh = mesh_generator(lvl)
        disc, result, eta, total, comps, err = _solve_and_estimate(
            problem, mesh, scheme_name, estimator_path,
            linearization=linearization, threads=threads,
            include_oscillation=include_oscillation,
            error_subdivisions=error_subdivisions)
        rows.append(StudyRow(lvl, disc.ndof, mesh.n_cells, err, total, *comps))
    return rows


def amr_loop(problem, initial_mesh, cfg: AdaptiveConfig, levels, *,
             scheme_name="hmfe", estimator_path="auto", linearization="newton",
             threads=1, include_oscillation=None, target_estimate=None,
             derefinement=False, error_subdivisions=None,
             return_meshes=False):
    """Solve -> estimate -> mark -> refine until the level count (or the
    total-estimate target) is reached.  Derefinement is off by default
    for the steady problems."""
    mesh = initial_mesh
    rows, meshes = [], []
    for lvl in range(levels):
        disc, result, eta, total, comps, err = _solve_and_estimate(
            problem, mesh, scheme_name, estimator_path,
            linearization=linearization, threads=threads,
            include_oscillation=include_oscillation,
            error_subdivisions=error_subdivisions)
        rows.append(StudyRow(lvl, disc.ndof, mesh.n_cells, err, total, *comps))
        meshes.append(mesh)
        if target_estimate is not None and total <= target_estimate:
            break
        if lvl == levels - 1:
            break
        marked = mark_cells(eta, cfg.delta_ref)
        if derefinement:
            # retained for structural fidelity; no coarsening of the mesh
            # itself is performed in the steady restriction
            _ = derefine_set(eta, cfg.delta_deref)
        mesh = refine(mesh, marked)
    if return_meshes:
        return rows, meshes
    return rows
