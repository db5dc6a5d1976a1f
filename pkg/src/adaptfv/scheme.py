"""Locally conservative discretizations.

Two-point finite volumes (linear and quasi-linear) on admissible meshes,
the hybridized lowest-order mixed scheme on polytopal meshes, iterative
linearization, and extraction of the error-component face fluxes.

All face quantities live in a global per-face orientation ``n_sigma``;
per-cell outward values are obtained through the signs ``n_K . n_sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .errors import (JacobianSingular, MissingExtendedIterate,
                     SingularElementMatrix, TensorNotSupported)
from .localmat import lifting_matrix, rt0_coefficients
from .mesh import AdmissibilityData, Mesh, PolytopalMesh, SimplicialMesh
from .sparse_linalg import SparseMatrix, dense_lu_solve


# ----------------------------------------------------------------------
# face flux container
# ----------------------------------------------------------------------

@dataclass
class FaceFluxVector:
    """One real per mesh face, oriented along the global face normal."""

    mesh: Mesh
    values: np.ndarray

    def cell_ext(self, k) -> np.ndarray:
        """Outward-signed exterior flux vector of cell ``k`` (positive =
        outflow), in the cell's local edge order."""
        fids = self.mesh.cell_faces[k]
        return np.asarray(self.mesh.cell_face_signs[k], dtype=float) \
            * self.values[fids]

    def __add__(self, other):
        return FaceFluxVector(self.mesh, self.values + other.values)

    def __sub__(self, other):
        return FaceFluxVector(self.mesh, self.values - other.values)


def incidence_matrix(mesh: Mesh) -> SparseMatrix:
    """Signed cell-face incidence D with D[K, sigma] = n_K . n_sigma."""
    rows, cols, vals = [], [], []
    for k in range(mesh.n_cells):
        fids = mesh.cell_faces[k]
        sgns = mesh.cell_face_signs[k]
        rows.extend([k] * len(fids))
        cols.extend(int(f) for f in fids)
        vals.extend(float(s) for s in sgns)
    return SparseMatrix.from_coo(rows, cols, vals, (mesh.n_cells, mesh.n_faces))


# ----------------------------------------------------------------------
# linear TPFA
# ----------------------------------------------------------------------

def _scalar_diffusion(mesh, k):
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        return np.full(mesh.n_cells, float(k))
    if k.ndim == 1 and len(k) == mesh.n_cells:
        return k
    raise TensorNotSupported(
        "TPFA takes cellwise scalars; route full tensors through hmfe")


def tpfa_flux_operator(mesh: Mesh, adm: AdmissibilityData, k=1.0,
                       boundary_value: Optional[Callable] = None):
    """Affine map P -> face fluxes: returns (T, t) with U = T P + t.

    Interior: ``U_sigma = -(k_sigma |sigma| / d_KL)(p_L - p_K)`` with the
    harmonic face average ``k_sigma``; Dirichlet boundary uses the trace
    at the projected collocation point ``x_{K,sigma}``.
    """
    kc = _scalar_diffusion(mesh, k)
    nf, nc = mesh.n_faces, mesh.n_cells
    rows, cols, vals = [], [], []
    t = np.zeros(nf)
    for fid in range(nf):
        K, L = mesh.face_cells[fid]
        length = mesh.face_lengths[fid]
        if L >= 0:
            kf = 2.0 * kc[K] * kc[L] / (kc[K] + kc[L])
            tau = kf * length / adm.d_int[fid]
            rows += [fid, fid]
            cols += [int(K), int(L)]
            vals += [tau, -tau]
        else:
            tau = kc[K] * length / adm.d_bnd[fid]
            rows.append(fid)
            cols.append(int(K))
            vals.append(tau)
            if boundary_value is not None:
                x = adm.boundary_points[fid]
                t[fid] = -tau * float(boundary_value(x[0], x[1]))
    T = SparseMatrix.from_coo(rows, cols, vals, (nf, nc))
    return T, t


def assemble_tpfa(mesh: Mesh, adm: AdmissibilityData, k, f=None, *,
                  boundary_value: Optional[Callable] = None,
                  source_integrals=None):
    """Two-point FV system: row K encodes the flux balance
    ``sum_sigma U_{K,sigma} = (f, 1)_K``.

    ``f`` gives cellwise-constant source values; ``source_integrals``
    supplies ``(f, 1)_K`` directly and wins when both are given.
    """
    if source_integrals is not None:
        F = np.asarray(source_integrals, dtype=float)
    elif f is not None:
        F = np.asarray(f, dtype=float) * mesh.areas
    else:
        F = np.zeros(mesh.n_cells)
    T, t = tpfa_flux_operator(mesh, adm, k, boundary_value)
    D = incidence_matrix(mesh)
    A = SparseMatrix(D._m @ T._m)
    return A, F - D.matvec(t)


def tpfa_fluxes(mesh: Mesh, adm: AdmissibilityData, k, P, *,
                boundary_value: Optional[Callable] = None) -> FaceFluxVector:
    """Face fluxes of a TPFA potential vector (globally oriented)."""
    T, t = tpfa_flux_operator(mesh, adm, k, boundary_value)
    return FaceFluxVector(mesh, T.matvec(np.asarray(P, dtype=float)) + t)


# ----------------------------------------------------------------------
# hybridized mixed scheme on polytopal meshes
# ----------------------------------------------------------------------

@dataclass
class HMFESystem:
    """Condensed SPD system in the face multipliers, plus recovery data."""

    mesh: PolytopalMesh
    matrix: SparseMatrix          # over all faces; boundary rows eliminated
    rhs: np.ndarray               # over interior faces
    interior: np.ndarray          # interior face ids
    boundary_values: np.ndarray   # Dirichlet multipliers per boundary face
    ainv: list                    # per cell: element matrix inverse
    avec: list                    # per cell: Ainv @ 1
    asum: np.ndarray              # per cell: 1^t Ainv 1
    F: np.ndarray

    def full_multipliers(self, lam_int) -> np.ndarray:
        lam = np.zeros(self.mesh.n_faces)
        lam[self.interior] = lam_int
        b = self.mesh.boundary_faces
        lam[b] = self.boundary_values[b]
        return lam

    def recover(self, lam_full):
        """Per-cell potentials and the global face-flux vector."""
        mesh = self.mesh
        P = np.empty(mesh.n_cells)
        U = np.zeros(mesh.n_faces)
        for kc in range(mesh.n_cells):
            fids = mesh.cell_faces[kc]
            lamK = lam_full[fids]
            P[kc] = (self.F[kc] + self.avec[kc] @ lamK) / self.asum[kc]
            u_ext = self.avec[kc] * P[kc] - self.ainv[kc] @ lamK
            sgn = np.asarray(mesh.cell_face_signs[kc], dtype=float)
            # owner writes the global value; the neighbor's copy agrees
            own = mesh.face_cells[fids, 0] == kc
            U[fids[own]] = (sgn * u_ext)[own]
        return P, FaceFluxVector(mesh, U)

    def multiplier_from_cell(self, kc, lam_full):
        """Lambda recomputed from cell kc's side: P_K - (A_K U_K^ext)."""
        mesh = self.mesh
        fids = mesh.cell_faces[kc]
        lamK = lam_full[fids]
        P = (self.F[kc] + self.avec[kc] @ lamK) / self.asum[kc]
        u_ext = self.avec[kc] * P - self.ainv[kc] @ lamK
        Ahat = np.linalg.inv(self.ainv[kc])
        return P - Ahat @ u_ext


def assemble_hmfe(mesh: PolytopalMesh, element_matrices, f=None, *,
                  boundary_value: Optional[Callable] = None,
                  source_integrals=None) -> HMFESystem:
    """Hybridize a saddle-point scheme with the given SPD element
    matrices: eliminate per-cell fluxes and potentials, leaving an SPD
    system in the face Lagrange multipliers.

    ``element_matrices`` is a sequence of per-cell SPD matrices indexed
    like ``mesh.cell_faces[k]`` (default choice: ``A_MFE``)."""
    nc, nf = mesh.n_cells, mesh.n_faces
    if source_integrals is not None:
        F = np.asarray(source_integrals, dtype=float)
    elif f is not None:
        F = np.asarray(f, dtype=float) * mesh.areas
    else:
        F = np.zeros(nc)

    ainv, avec, asum = [], [], np.empty(nc)
    rows, cols, vals = [], [], []
    for k in range(nc):
        Ahat = np.asarray(element_matrices[k], dtype=float)
        fids = mesh.cell_faces[k]
        if Ahat.shape != (len(fids), len(fids)):
            raise SingularElementMatrix(f"cell {k}: element matrix size mismatch")
        try:
            Ai = np.linalg.inv(Ahat)
        except np.linalg.LinAlgError:
            raise SingularElementMatrix(f"cell {k}: singular element matrix") from None
        a = Ai @ np.ones(len(fids))
        s = float(a.sum())
        if not np.isfinite(s) or s <= 0:
            raise SingularElementMatrix(f"cell {k}: 1^t A^-1 1 not positive")
        ainv.append(Ai)
        avec.append(a)
        asum[k] = s
        loc = Ai - np.outer(a, a) / s
        for i, fi in enumerate(fids):
            for j, fj in enumerate(fids):
                rows.append(int(fi))
                cols.append(int(fj))
                vals.append(loc[i, j])
    M = sp.coo_matrix((vals, (rows, cols)), shape=(nf, nf)).tocsr()

    rhs_full = np.zeros(nf)
    for k in range(nc):
        fids = mesh.cell_faces[k]
        rhs_full[fids] += avec[k] * F[k] / asum[k]

    bnd = mesh.boundary_faces
    interior = mesh.interior_faces
    lam_b = np.zeros(nf)
    if boundary_value is not None:
        for fid in bnd:
            x = mesh.face_midpoints[fid]
            lam_b[fid] = float(boundary_value(x[0], x[1]))
    rhs = rhs_full[interior] - np.asarray((M[:, bnd] @ lam_b[bnd]))[interior]
    Mii = SparseMatrix(M[interior][:, interior])
    return HMFESystem(mesh, Mii, rhs, interior, lam_b, ainv, avec, asum, F)


def solve_hmfe(system: HMFESystem, *, method: str = "direct", rel_tol: float = 1e-13):
    """Solve the condensed system and recover potentials and fluxes."""
    if len(system.interior) == 0:
        lam_int = np.zeros(0)
    elif method == "direct":
        lam_int = dense_lu_solve(system.matrix.todense(), system.rhs)
    else:
        from .sparse_linalg import run_to_tolerance
        lam_int, _ = run_to_tolerance(system.matrix, system.rhs,
                                      rel_tol=rel_tol, method="cg")
    lam = system.full_multipliers(lam_int)
    P, U = system.recover(lam)
    return P, U, lam


# ----------------------------------------------------------------------
# quasi-linear diffusion coefficient
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Nonlinearity:
    """Prototype coefficient ``k(r) = c + (C - c)/sqrt(1 + r^2)``.

    Both ``c <= k(r) <= C`` and ``c <= (k(r) r)' <= C`` hold, so the flux
    map is strongly monotone and Lipschitz with constants (c, C)."""

    c: float
    C: float

    def __post_init__(self):
        if not (0 < self.c <= self.C):
            raise ValueError("need 0 < c <= C")

    def k(self, r):
        return self.c + (self.C - self.c) / np.sqrt(1.0 + np.square(r))

    def dk(self, r):
        return -(self.C - self.c) * r * (1.0 + np.square(r)) ** -1.5

    def dk_over_r(self, r):
        """``k'(r)/r``, finite at r = 0."""
        return -(self.C - self.c) * (1.0 + np.square(r)) ** -1.5


# ----------------------------------------------------------------------
# nonlinear two-point scheme
# ----------------------------------------------------------------------

class NonlinearTPFA:
    """Quasi-linear FV scheme: fluxes ``xi_sigma(P) U_sigma(P)`` where
    ``U`` is the two-point difference and ``xi = k(|xi_h|)`` evaluates the
    coefficient at face barycenters of the lifted gradient field.

    The lifted field on each cell is the minimal-L2 RT0 lifting of the
    cell's two-point fluxes over its submesh (for triangle cells this is
    the plain RT0 interpolant)."""

    def __init__(self, mesh: Mesh, adm: AdmissibilityData,
                 nonlinearity: Nonlinearity, f=None, *,
                 boundary_value: Optional[Callable] = None,
                 source_integrals=None):
        self.mesh = mesh
        self.adm = adm
        self.nl = nonlinearity
        self.boundary_value = boundary_value
        if source_integrals is not None:
            self.F = np.asarray(source_integrals, dtype=float)
        elif f is not None:
            self.F = np.asarray(f, dtype=float) * mesh.areas
        else:
            self.F = np.zeros(mesh.n_cells)
        self.T, self.t = tpfa_flux_operator(mesh, adm, 1.0, boundary_value)
        self.D = incidence_matrix(mesh)
        self._build_gradient_ops()

    # -- lifted gradient machinery ------------------------------------
    def _lifting_eval(self, k):
        """(n_ext, 2, n_ext) response: field value at exterior face
        midpoints per unit outward exterior flux."""
        mesh = self.mesh
        if isinstance(mesh, SimplicialMesh):
            pts = mesh.vertices[mesh.cells[k]]
            area = mesh.areas[k]
            mids = 0.5 * (pts + np.roll(pts, -1, axis=0))
            out = np.empty((3, 2, 3))
            for j in range(3):
                opp = pts[(j + 2) % 3]
                for i in range(3):
                    out[i, :, j] = (mids[i] - opp) / (2.0 * area)
            return out
        sub = mesh.submeshes[k]
        n_ext = sub.n_ext
        X = lifting_matrix(sub, 1.0)
        n_int = len(sub.int_faces)
        out = np.empty((n_ext, 2, n_ext))
        mids = 0.5 * (sub.points[np.arange(n_ext)]
                      + sub.points[(np.arange(n_ext) + 1) % n_ext])
        for j in range(n_ext):
            u_ext = np.zeros(n_ext)
            u_ext[j] = 1.0
            u_int = -X[:n_int] @ u_ext if n_int else np.zeros(0)
            a, c = rt0_coefficients(sub, u_ext, u_int)
            for i in range(n_ext):
                tri = i if sub.has_center else 0
                out[i, :, j] = a[tri] + c[tri] * mids[i]
        return out

    def _build_gradient_ops(self):
        """Sparse maps from global face fluxes to the averaged lifted
        gradient components at face midpoints."""
        mesh = self.mesh
        nf = mesh.n_faces
        sides = np.zeros(nf)
        rows, cols, vx, vy = [], [], [], []
        for k in range(mesh.n_cells):
            fids = np.asarray(mesh.cell_faces[k])
            sgns = np.asarray(mesh.cell_face_signs[k], dtype=float)
            E = self._lifting_eval(k)
            for i, fi in enumerate(fids):
                sides[fi] += 1.0
                for j, fj in enumerate(fids):
                    rows.append(int(fi))
                    cols.append(int(fj))
                    vx.append(E[i, 0, j] * sgns[j])
                    vy.append(E[i, 1, j] * sgns[j])
        wx = sp.coo_matrix((vx, (rows, cols)), shape=(nf, nf)).tocsr()
        wy = sp.coo_matrix((vy, (rows, cols)), shape=(nf, nf)).tocsr()
        inv_sides = sp.diags(1.0 / sides)
        self.Wx = inv_sides @ wx
        self.Wy = inv_sides @ wy
        # compositions used by the Jacobian
        self.WxT = self.Wx @ self.T._m
        self.WyT = self.Wy @ self.T._m
        self.wxt0 = self.Wx @ self.t
        self.wyt0 = self.Wy @ self.t

    def gradient_reps(self, P):
        """Averaged lifted-gradient representative at each face midpoint."""
        P = np.asarray(P, dtype=float)
        gx = self.WxT @ P + self.wxt0
        gy = self.WyT @ P + self.wyt0
        return gx, gy

    def xi(self, P):
        gx, gy = self.gradient_reps(P)
        return self.nl.k(np.hypot(gx, gy))

    def cell_coefficients(self, P):
        """Per-cell frozen diffusion: the mean of the face coefficients
        xi_sigma over each cell's faces."""
        xi = self.xi(P)
        out = np.empty(self.mesh.n_cells)
        for k in range(self.mesh.n_cells):
            out[k] = xi[self.mesh.cell_faces[k]].mean()
        return out

    def fluxes(self, P) -> FaceFluxVector:
        """Nonlinear face fluxes xi(P) * U(P), globally oriented."""
        P = np.asarray(P, dtype=float)
        two_point = self.T.matvec(P) + self.t
        return FaceFluxVector(self.mesh, self.xi(P) * two_point)

    def residual_cells(self, P):
        """Per-cell misfit  sum_sigma xi U n.n - (f,1)_K."""
        return self.D.matvec(self.fluxes(P).values) - self.F

    def flux_jacobian(self, P) -> sp.csr_matrix:
        """Analytic Jacobian of the nonlinear face-flux map (chain rule)."""
        P = np.asarray(P, dtype=float)
        two_point = self.T.matvec(P) + self.t
        gx, gy = self.gradient_reps(P)
        r = np.hypot(gx, gy)
        xi = self.nl.k(r)
        phi = self.nl.dk_over_r(r)
        J = sp.diags(xi) @ self.T._m \
            + sp.diags(two_point * phi * gx) @ self.WxT \
            + sp.diags(two_point * phi * gy) @ self.WyT
        return J.tocsr()

    def linearize(self, P_prev, method: str = "newton") -> "LinearizedFluxes":
        """Affine flux map of one linearization step.

        ``fixed_point`` freezes xi at P_prev (SPD system); ``newton``
        uses the analytic flux Jacobian (possibly nonsymmetric)."""
        P_prev = np.asarray(P_prev, dtype=float)
        U0 = self.fluxes(P_prev).values
        if method == "fixed_point":
            G = sp.diags(self.xi(P_prev)) @ self.T._m
        elif method == "newton":
            G = self.flux_jacobian(P_prev)
        else:
            raise ValueError(f"unknown linearization {method!r}")
        return LinearizedFluxes(self, P_prev, U0, G.tocsr(), method)


def nonlinear_residual(mesh, adm, nonlinearity, f, P, *,
                       boundary_value=None, source_integrals=None):
    """Per-cell residuals of the quasi-linear FV scheme at state P."""
    s = NonlinearTPFA(mesh, adm, nonlinearity, f,
                      boundary_value=boundary_value,
                      source_integrals=source_integrals)
    return s.residual_cells(P)


@dataclass
class LinearizedFluxes:
    """Affine face-flux map ``U^{k-1}(P) = U0 + G (P - P0)`` of one
    linearization step, with the induced cell balance system."""

    scheme: object
    P0: np.ndarray
    U0: np.ndarray
    G: sp.csr_matrix
    method: str

    def fluxes(self, P) -> np.ndarray:
        return self.U0 + self.G @ (np.asarray(P, dtype=float) - self.P0)

    def system(self):
        """(matrix, rhs) over cells: D U^{k-1}(P) = F."""
        D = self.scheme.D
        A = SparseMatrix(D._m @ self.G)
        rhs = self.scheme.F - D.matvec(self.U0 - self.G @ self.P0)
        return A, rhs


# ----------------------------------------------------------------------
# solver snapshots and error-component fluxes
# ----------------------------------------------------------------------

@dataclass
class SolverSnapshot:
    """State of the nested solvers at linearization step k, algebraic
    step i, with the extended iterate after j extra steps.

    The flux balance holds with machine accuracy in the form
    ``sum_sigma U^{k-1}(P^{k,i})_sigma n_K.n_sigma = F_K - R_K^{k,i}``.
    """

    k: int
    i: int
    P: np.ndarray                       # P^{k,i}
    fluxes_nonlinear: np.ndarray        # U(P^{k,i})
    fluxes_linearized: np.ndarray       # U^{k-1}(P^{k,i})
    fluxes_extended: Optional[np.ndarray]   # U^{k-1}(P^{k,i+j})
    residual: np.ndarray                # R^{k,i}
    residual_extended: Optional[np.ndarray]  # R^{k,i+j}
    extra_steps: int = 0


def make_snapshot(scheme, lin: LinearizedFluxes, k, i, P, P_extended=None,
                  extra_steps=0) -> SolverSnapshot:
    U_nl = scheme.fluxes(P).values
    U_lin = lin.fluxes(P)
    R = scheme.F - scheme.D.matvec(U_lin)
    U_ext = R_ext = None
    if P_extended is not None:
        U_ext = lin.fluxes(P_extended)
        R_ext = scheme.F - scheme.D.matvec(U_ext)
    return SolverSnapshot(k, i, np.asarray(P, dtype=float), U_nl, U_lin,
                          U_ext, R, R_ext, extra_steps)


def exact_algebra_snapshot(scheme, lin, k, P) -> SolverSnapshot:
    """Snapshot for a direct (or fully converged) algebraic solve: the
    extended iterate coincides with P, so the algebraic component and
    remainder vanish identically."""
    return make_snapshot(scheme, lin, k, 0, P, P_extended=P, extra_steps=0)


def component_fluxes(snapshot: SolverSnapshot, mesh) -> dict:
    """Split the extended linearized fluxes into discretization,
    linearization, and algebraic parts (paper-style decomposition):
    ``U + U_lin + U_alg = U^{k-1}(P^{k,i+j})`` so that the summed
    divergence identity holds per cell up to ``R^{k,i+j}``."""
    if snapshot.fluxes_extended is None:
        raise MissingExtendedIterate(
            "component fluxes need the extra-step iterate; run j more steps")
    U = snapshot.fluxes_nonlinear
    U_lin = snapshot.fluxes_linearized - U
    U_alg = snapshot.fluxes_extended - snapshot.fluxes_linearized
    return {
        "discretization": FaceFluxVector(mesh, U),
        "linearization": FaceFluxVector(mesh, U_lin),
        "algebraic": FaceFluxVector(mesh, U_alg),
    }


# ----------------------------------------------------------------------
# linear scheme adapter (so the adaptive loop treats linear problems as
# a single linearization step)
# ----------------------------------------------------------------------

class LinearTPFA:
    """Linear TPFA wrapped in the nonlinear-scheme interface."""

    def __init__(self, mesh: Mesh, adm: AdmissibilityData, k=1.0, f=None, *,
                 boundary_value: Optional[Callable] = None,
                 source_integrals=None):
        self.mesh = mesh
        if source_integrals is not None:
            self.F = np.asarray(source_integrals, dtype=float)
        elif f is not None:
            self.F = np.asarray(f, dtype=float) * mesh.areas
        else:
            self.F = np.zeros(mesh.n_cells)
        self.T, self.t = tpfa_flux_operator(mesh, adm, k, boundary_value)
        self.D = incidence_matrix(mesh)

    def fluxes(self, P) -> FaceFluxVector:
        return FaceFluxVector(self.mesh, self.T.matvec(np.asarray(P, dtype=float))
                              + self.t)

    def linearize(self, P_prev, method: str = "fixed_point") -> LinearizedFluxes:
        P_prev = np.asarray(P_prev, dtype=float)
        return LinearizedFluxes(self, P_prev, self.fluxes(P_prev).values,
                                self.T._m.tocsr(), "linear")
