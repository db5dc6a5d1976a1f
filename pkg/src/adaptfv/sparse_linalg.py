"""Sparse storage and step-wise Krylov solvers.

CSR storage is backed by scipy.sparse; the CG and BiCGStab iterations
are written out explicitly so the adaptive loop can advance them one
step at a time and inspect the iterate between steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import Breakdown, Singular

_DRIFT_GUARD_EVERY = 50


class SparseMatrix:
    """Square-or-rectangular CSR matrix (row offsets, column indices, values)."""

    def __init__(self, csr):
        if not sp.issparse(csr):
            raise TypeError("SparseMatrix wraps a scipy sparse matrix")
        self._m = csr.tocsr()
        self._m.sum_duplicates()
        self._m.sort_indices()

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        return cls(sp.coo_matrix((vals, (rows, cols)), shape=shape))

    @classmethod
    def from_dense(cls, arr):
        return cls(sp.csr_matrix(np.asarray(arr, dtype=float)))

    @property
    def shape(self):
        return self._m.shape

    @property
    def row_offsets(self):
        return self._m.indptr

    @property
    def col_indices(self):
        return self._m.indices

    @property
    def values(self):
        return self._m.data

    def matvec(self, x):
        return self._m @ x

    def rmatvec(self, x):
        return self._m.T @ x

    def diagonal(self):
        return self._m.diagonal()

    def todense(self):
        return self._m.toarray()

    def transpose(self):
        return SparseMatrix(self._m.T.tocsr())

    def is_symmetric(self, tol=1e-12):
        d = self._m - self._m.T
        scale = max(np.abs(self._m.data).max() if self._m.nnz else 0.0, 1e-300)
        return np.abs(d.data).max() <= tol * scale if d.nnz else True

    def __matmul__(self, x):
        return self._m @ x


@dataclass
class IterativeState:
    """State advanced by one Krylov step at a time.

    The residual vector is updated recurrently; callers doing long runs
    should refresh it from ``b - A x`` every ~50 steps (run_to_tolerance
    does this drift guard automatically).
    """

    x: np.ndarray
    r: np.ndarray
    iteration: int = 0
    # method internals
    p: Optional[np.ndarray] = None
    rho: Optional[float] = None
    r0hat: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    omega: Optional[float] = None
    precond: Optional[np.ndarray] = None   # Jacobi inverse diagonal
    z: Optional[np.ndarray] = None


def new_state(A: SparseMatrix, b, x0=None, jacobi: bool = False) -> IterativeState:
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x)
    pre = None
    if jacobi:
        d = A.diagonal()
        if np.any(d == 0):
            raise Breakdown("zero diagonal entry, Jacobi preconditioner unusable")
        pre = 1.0 / d
    return IterativeState(x=x, r=r, precond=pre)


def refresh_residual(A: SparseMatrix, b, state: IterativeState):
    state.r = np.asarray(b, dtype=float) - A.matvec(state.x)


def cg_step(A: SparseMatrix, b, state: IterativeState) -> IterativeState:
    """One (optionally Jacobi-preconditioned) conjugate gradient step."""
    z = state.r if state.precond is None else state.precond * state.r
    rho = float(state.r @ z)
    if state.p is None:
        state.p = z.copy()
    else:
        if state.rho == 0.0:
            raise Breakdown("CG: rho vanished")
        state.p = z + (rho / state.rho) * state.p
    Ap = A.matvec(state.p)
    den = float(state.p @ Ap)
    if den <= 0.0:
        if den == 0.0:
            raise Breakdown("CG: p^T A p = 0")
        raise Breakdown("CG: matrix not positive definite along search direction")
    alpha = rho / den
    state.x = state.x + alpha * state.p
    state.r = state.r - alpha * Ap
    state.rho = rho
    state.iteration += 1
    return state


def bicgstab_step(A: SparseMatrix, b, state: IterativeState) -> IterativeState:
    """One BiCGStab step (van der Vorst), with optional Jacobi preconditioning."""
    pre = state.precond

    def M(y):
        return y if pre is None else pre * y

    if state.r0hat is None:
        state.r0hat = state.r.copy()
        state.rho = 1.0
        state.alpha = 1.0
        state.omega = 1.0
        state.v = np.zeros_like(state.r)
        state.p = np.zeros_like(state.r)
    rho_new = float(state.r0hat @ state.r)
    if rho_new == 0.0 or state.omega == 0.0:
        raise Breakdown("BiCGStab: rho or omega vanished")
    beta = (rho_new / state.rho) * (state.alpha / state.omega)
    state.p = state.r + beta * (state.p - state.omega * state.v)
    phat = M(state.p)
    state.v = A.matvec(phat)
    den = float(state.r0hat @ state.v)
    if den == 0.0:
        raise Breakdown("BiCGStab: r0hat . v = 0")
    state.alpha = rho_new / den
    s = state.r - state.alpha * state.v
    shat = M(s)
    t = A.matvec(shat)
    tt = float(t @ t)
    if tt == 0.0:
        # s is already the exact residual update
        state.x = state.x + state.alpha * phat
        state.r = s
        state.rho = rho_new
        state.omega = 1.0
        state.iteration += 1
        return state
    omega = float(t @ s) / tt
    if omega == 0.0:
        raise Breakdown("BiCGStab: omega = 0")
    state.x = state.x + state.alpha * phat + omega * shat
    state.r = s - omega * t
    state.rho = rho_new
    state.omega = omega
    state.iteration += 1
    return state


def run_to_tolerance(A: SparseMatrix, b, x0=None, rel_tol: float = 1e-12,
                     max_iter: int = 10000, method: str = "cg",
                     jacobi: bool = False):
    """Iterate until ``||b - A x|| <= rel_tol ||b||``.

    Returns ``(x, iterations)``.  Deterministic: no randomized restarts;
    a Krylov breakdown is retried once from the current iterate and then
    surfaces to the caller.
    """
    b = np.asarray(b, dtype=float)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return np.zeros_like(b), 0
    step = {"cg": cg_step, "bicgstab": bicgstab_step}[method]
    state = new_state(A, b, x0, jacobi=jacobi)
    restarted = False
    while state.iteration < max_iter:
        if np.linalg.norm(state.r) <= rel_tol * nb:
            refresh_residual(A, b, state)
            if np.linalg.norm(state.r) <= rel_tol * nb:
                return state.x, state.iteration
        try:
            step(A, b, state)
        except Breakdown:
            if restarted:
                raise
            restarted = True
            x = state.x
            state = new_state(A, b, x, jacobi=jacobi)
            continue
        if state.iteration % _DRIFT_GUARD_EVERY == 0:
            refresh_residual(A, b, state)
    if np.linalg.norm(b - A.matvec(state.x)) <= rel_tol * nb:
        return state.x, state.iteration
    raise Breakdown(f"{method} did not reach {rel_tol:g} in {max_iter} iterations")


def dense_lu_solve(A_dense, B):
    """Solve dense ``A X = B`` by LU with partial pivoting (LAPACK)."""
    A_dense = np.asarray(A_dense, dtype=float)
    B = np.asarray(B, dtype=float)
    if A_dense.size == 0:
        return np.zeros_like(B)
    try:
        X = np.linalg.solve(A_dense, B)
    except np.linalg.LinAlgError as e:
        raise Singular(str(e)) from None
    if not np.all(np.isfinite(X)):
        raise Singular("non-finite solution (singular to working precision)")
    return X
