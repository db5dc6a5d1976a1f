import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptfv import localmat as L
from adaptfv import mesh as M
from adaptfv import scheme as S
from adaptfv.errors import (MissingExtendedIterate, SingularElementMatrix,
                            TensorNotSupported)
from adaptfv.sparse_linalg import dense_lu_solve, run_to_tolerance


def rhombus_mesh():
    h = np.sqrt(3.0) / 2.0
    return M.build_simplicial([[0, 0], [1, 0], [0.5, h], [0.5, -h]],
                              [[0, 1, 2], [0, 3, 1]])


class TestTPFA:
    def test_zero_data_zero_solution(self):
        m = M.triangle_grid(3)
        adm = M.admissibility(m)
        A, b = S.assemble_tpfa(m, adm, 1.0, f=np.zeros(m.n_cells))
        assert np.allclose(b, 0.0)
        assert A.is_symmetric()

    def test_two_cell_rhombus_vs_dense(self):
        m = rhombus_mesh()
        adm = M.admissibility(m)
        A, b = S.assemble_tpfa(m, adm, 1.0, f=np.ones(2))
        P = dense_lu_solve(A.todense(), b)
        # dense oracle built from first principles
        tau = {}
        fid = m.interior_faces[0]
        tau_i = m.face_lengths[fid] / abs(adm.d_int[fid])
        rows = np.zeros((2, 2))
        rhs = m.areas.copy()
        rows[0, 0] += tau_i
        rows[0, 1] -= tau_i
        rows[1, 1] += tau_i
        rows[1, 0] -= tau_i
        for fid in m.boundary_faces:
            K = m.face_cells[fid, 0]
            rows[K, K] += m.face_lengths[fid] / adm.d_bnd[fid]
        P_oracle = dense_lu_solve(rows, rhs)
        assert np.allclose(P, P_oracle, rtol=1e-13)

    def test_conservation(self):
        m = M.triangle_grid(5)
        adm = M.admissibility(m)
        F = np.sin(np.arange(m.n_cells)) * m.areas
        A, b = S.assemble_tpfa(m, adm, 1.0, source_integrals=F)
        P, _ = run_to_tolerance(A, b, rel_tol=1e-14, max_iter=10**5)
        U = S.tpfa_fluxes(m, adm, 1.0, P)
        D = S.incidence_matrix(m)
        assert np.abs(D.matvec(U.values) - F).max() <= 1e-12 * max(np.abs(F).max(), 1)

    def test_flux_formula_examples(self):
        # p_K = 1, p_L = 0, |sigma| = 1, d = 1 -> outflux 1 from K
        m = rhombus_mesh()
        adm = M.admissibility(m)
        fid = m.interior_faces[0]
        K = m.face_cells[fid, 0]
        P = np.zeros(2)
        P[K] = 1.0
        U = S.tpfa_fluxes(m, adm, 1.0, P)
        expected = m.face_lengths[fid] / adm.d_int[fid]
        assert U.cell_ext(K)[list(m.cell_faces[K]).index(fid)] \
            == pytest.approx(expected, rel=1e-14)

    def test_constant_potential_boundary_flux(self):
        m = rhombus_mesh()
        adm = M.admissibility(m)
        P = np.ones(2)
        U = S.tpfa_fluxes(m, adm, 1.0, P)
        for fid in m.boundary_faces:
            K = m.face_cells[fid, 0]
            expected = m.face_lengths[fid] * P[K] / adm.d_bnd[fid]
            i = list(m.cell_faces[K]).index(fid)
            assert U.cell_ext(K)[i] == pytest.approx(expected, rel=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_antisymmetry_random(self, seed):
        rng = np.random.default_rng(seed)
        m = M.triangle_grid(3)
        adm = M.admissibility(m)
        P = rng.normal(size=m.n_cells)
        U = S.tpfa_fluxes(m, adm, 1.0, P)
        for fid in m.interior_faces:
            K, Lc = m.face_cells[fid]
            uK = U.cell_ext(K)[list(m.cell_faces[K]).index(fid)]
            uL = U.cell_ext(Lc)[list(m.cell_faces[Lc]).index(fid)]
            assert uK == pytest.approx(-uL, abs=1e-12 * (1 + abs(uK)))

    def test_tensor_rejected(self):
        m = M.triangle_grid(2)
        adm = M.admissibility(m)
        with pytest.raises(TensorNotSupported):
            S.assemble_tpfa(m, adm, np.eye(2), f=None)

    def test_harmonic_face_average(self):
        m = M.rectangle_grid(2)
        adm = M.admissibility(m)
        k = np.array([1.0, 3.0, 1.0, 3.0])
        T, _ = S.tpfa_flux_operator(m, adm, k)
        fid = [f for f in m.interior_faces
               if set(m.face_cells[f]) == {0, 1}][0]
        tau = T.todense()[fid, 0]
        expected = 2 * 1 * 3 / (1 + 3) * m.face_lengths[fid] / adm.d_int[fid]
        assert tau == pytest.approx(expected, rel=1e-13)


class TestHMFE:
    def make(self, n, f=None):
        pm = M.rectangle_grid(n)
        mats = [L.schur_a_mfe(L.assemble_blocks(pm.submeshes[k], 1.0))
                for k in range(pm.n_cells)]
        return pm, mats, S.assemble_hmfe(pm, mats, f=f)

    def test_single_cell_zero(self):
        pm, mats, sys1 = self.make(1, f=np.zeros(1))
        P, U, lam = S.solve_hmfe(sys1)
        assert np.allclose(P, 0.0, atol=1e-14)
        assert np.allclose(U.values, 0.0, atol=1e-14)

    def test_balance_2x2(self):
        pm, mats, sys2 = self.make(2, f=np.ones(4))
        P, U, lam = S.solve_hmfe(sys2)
        D = S.incidence_matrix(pm)
        assert np.abs(D.matvec(U.values) - pm.areas).max() <= 1e-11

    def test_multiplier_univalued(self, rng):
        pm = M.rectangle_grid(2)
        mats = [L.schur_a_mfe(L.assemble_blocks(pm.submeshes[k], 1.0))
                for k in range(pm.n_cells)]
        sys2 = S.assemble_hmfe(pm, mats, f=rng.normal(size=4))
        P, U, lam = S.solve_hmfe(sys2)
        for fid in pm.interior_faces:
            K, Lc = pm.face_cells[fid]
            a = sys2.multiplier_from_cell(K, lam)[list(pm.cell_faces[K]).index(fid)]
            b = sys2.multiplier_from_cell(Lc, lam)[list(pm.cell_faces[Lc]).index(fid)]
            assert a == pytest.approx(b, abs=1e-11)
            assert a == pytest.approx(lam[fid], abs=1e-11)

    def test_vs_dense_saddle_oracle(self):
        pm, mats, sys3 = self.make(3, f=np.ones(9))
        P, U, lam = S.solve_hmfe(sys3)
        nf, nc = pm.n_faces, pm.n_cells
        Ag = np.zeros((nf, nf))
        Bg = np.zeros((nc, nf))
        for k in range(nc):
            fids = pm.cell_faces[k]
            sg = pm.cell_face_signs[k]
            for i, fi in enumerate(fids):
                Bg[k, fi] = -sg[i]
                for j, fj in enumerate(fids):
                    Ag[fi, fj] += sg[i] * sg[j] * mats[k][i, j]
        big = np.block([[Ag, Bg.T], [Bg, np.zeros((nc, nc))]])
        sol = dense_lu_solve(big, np.concatenate([np.zeros(nf), -pm.areas]))
        assert np.abs(sol[:nf] - U.values).max() <= 1e-10
        assert np.abs(sol[nf:] - P).max() <= 1e-10

    def test_singular_element_matrix(self):
        pm = M.rectangle_grid(1)
        with pytest.raises(SingularElementMatrix):
            S.assemble_hmfe(pm, [np.zeros((4, 4))], f=np.zeros(1))


class TestNonlinearity:
    def test_bounds_sampled(self):
        nl = S.Nonlinearity(1.0, 1e4)
        r = np.concatenate([[0.0], np.logspace(-8, 6, 200)])
        k = nl.k(r)
        assert np.all(k <= nl.C + 1e-9) and np.all(k >= nl.c - 1e-9)
        # (k(r) r)' within [c, C], via tight finite differences
        for rr in np.logspace(-3, 6, 40):
            h = 1e-6 * max(rr, 1.0)
            d = (nl.k(rr + h) * (rr + h) - nl.k(rr - h) * (rr - h)) / (2 * h)
            assert nl.c - 1e-5 <= d <= nl.C + 1e-5

    def test_invalid(self):
        with pytest.raises(ValueError):
            S.Nonlinearity(2.0, 1.0)


def brute_force_residual(mesh, adm, nl, F, P):
    """Independent re-evaluation of the quasi-linear residual on a
    simplicial mesh: explicit RT0 lifting per cell, face-midpoint
    coefficient, two-point fluxes assembled one face at a time."""
    def lifted(k, x):
        pts = mesh.vertices[mesh.cells[k]]
        area = mesh.areas[k]
        val = np.zeros(2)
        for i, fid in enumerate(mesh.cell_faces[k]):
            sign = mesh.cell_face_signs[k][i]
            # raw two-point flux through this face, outward from k
            K, Lc = mesh.face_cells[fid]
            if Lc >= 0:
                other = Lc if K == k else K
                raw = -(mesh.face_lengths[fid] / abs(adm.d_int[fid])) \
                    * (P[other] - P[k])
            else:
                raw = (mesh.face_lengths[fid] / adm.d_bnd[fid]) * P[k]
            opp = pts[(i + 2) % 3]
            val += raw * (x - opp) / (2.0 * area)
        return val

    res = np.zeros(mesh.n_cells)
    for k in range(mesh.n_cells):
        for i, fid in enumerate(mesh.cell_faces[k]):
            K, Lc = mesh.face_cells[fid]
            xmid = mesh.face_midpoints[fid]
            if Lc >= 0:
                other = Lc if K == k else K
                g = 0.5 * (lifted(k, xmid) + lifted(other, xmid))
                raw = -(mesh.face_lengths[fid] / abs(adm.d_int[fid])) \
                    * (P[other] - P[k])
            else:
                g = lifted(k, xmid)
                raw = (mesh.face_lengths[fid] / adm.d_bnd[fid]) * P[k]
            res[k] += nl.k(np.hypot(*g)) * raw
        res[k] -= F[k]
    return res


class TestNonlinearTPFA:
    def test_zero_state(self):
        m = M.triangle_grid(2)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(1, 10), f=np.zeros(m.n_cells))
        assert np.allclose(s.residual_cells(np.zeros(m.n_cells)), 0.0)

    def test_linear_limit_matches_scaled_tpfa(self, rng):
        # C = c: the coefficient is the constant c, so the residual is
        # c times the unit-diffusion TPFA residual
        m = M.triangle_grid(2)
        adm = M.admissibility(m)
        c = 3.0
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(c, c), f=np.ones(m.n_cells))
        P = rng.normal(size=m.n_cells)
        A, _ = S.assemble_tpfa(m, adm, 1.0, f=np.ones(m.n_cells))
        assert np.allclose(s.residual_cells(P), c * A.matvec(P) - s.F, atol=1e-12)

    def test_brute_force_oracle(self, rng):
        m = M.triangle_grid(2)  # 10 cells
        adm = M.admissibility(m)
        nl = S.Nonlinearity(1.0, 10.0)
        F = rng.normal(size=m.n_cells)
        s = S.NonlinearTPFA(m, adm, nl, source_integrals=F)
        P = rng.normal(size=m.n_cells)
        ours = s.residual_cells(P)
        ref = brute_force_residual(m, adm, nl, F, P)
        assert np.allclose(ours, ref, atol=1e-12 * max(1, np.abs(ref).max()))

    def test_linearize_linear_limit_one_step(self):
        m = M.rectangle_grid(2)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(2, 2), f=np.ones(m.n_cells))
        for method in ("fixed_point", "newton"):
            lin = s.linearize(np.zeros(m.n_cells), method)
            A, b = lin.system()
            P1 = dense_lu_solve(A.todense(), b)
            assert np.abs(s.residual_cells(P1)).max() < 1e-12

    def test_fixed_point_symmetric(self, rng):
        m = M.triangle_grid(3)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(1, 50), f=np.ones(m.n_cells))
        lin = s.linearize(rng.normal(size=m.n_cells), "fixed_point")
        A, _ = lin.system()
        assert A.is_symmetric(1e-13)

    def test_newton_jacobian_fd(self, rng):
        m = M.rectangle_grid(2)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(1, 10), f=np.ones(m.n_cells))
        P = rng.normal(size=m.n_cells)
        J = (s.D._m @ s.flux_jacobian(P)).toarray()
        h = 1e-6
        for j in range(m.n_cells):
            e = np.zeros(m.n_cells)
            e[j] = h
            col = (s.residual_cells(P + e) - s.residual_cells(P - e)) / (2 * h)
            scale = max(np.abs(col).max(), 1.0)
            assert np.abs(J[:, j] - col).max() <= 1e-6 * scale

    def test_fixed_point_converges(self):
        m = M.rectangle_grid(3)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(1, 10), f=np.ones(m.n_cells))
        P = np.zeros(m.n_cells)
        norms = [np.linalg.norm(s.residual_cells(P))]
        for _ in range(20):
            lin = s.linearize(P, "fixed_point")
            A, b = lin.system()
            P = dense_lu_solve(A.todense(), b)
            norms.append(np.linalg.norm(s.residual_cells(P)))
        floor = 1e-12 * norms[0]
        for a, b_ in zip(norms, norms[1:]):
            assert b_ < a or b_ < floor


class TestSnapshots:
    def setup_state(self, rng):
        m = M.triangle_grid(2)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(1, 10), f=np.ones(m.n_cells))
        P = rng.normal(size=m.n_cells)
        lin = s.linearize(P, "newton")
        return m, s, lin, P

    def test_balance_invariant(self, rng):
        m, s, lin, P0 = self.setup_state(rng)
        P_i = P0 + 0.1 * rng.normal(size=m.n_cells)
        snap = S.make_snapshot(s, lin, 1, 1, P_i, P_extended=P_i)
        lhs = s.D.matvec(snap.fluxes_linearized)
        assert np.allclose(lhs, s.F - snap.residual, atol=1e-13 * max(1, np.abs(s.F).max()))

    def test_exact_solver_components_vanish(self, rng):
        m, s, lin, P0 = self.setup_state(rng)
        # converge fully: Newton to machine precision from the zero state
        P = np.zeros(m.n_cells)
        for _ in range(60):
            l2 = s.linearize(P, "newton")
            A, b = l2.system()
            P = dense_lu_solve(A.todense(), b)
        lin_c = s.linearize(P, "newton")
        snap = S.exact_algebra_snapshot(s, lin_c, 1, P)
        comp = S.component_fluxes(snap, m)
        assert np.abs(comp["linearization"].values).max() < 1e-10
        assert np.abs(comp["algebraic"].values).max() < 1e-12
        assert np.abs(snap.residual_extended).max() < 1e-10

    def test_linear_problem_one_newton_no_lin_error(self, rng):
        m = M.triangle_grid(2)
        adm = M.admissibility(m)
        s = S.NonlinearTPFA(m, adm, S.Nonlinearity(2, 2), f=np.ones(m.n_cells))
        lin = s.linearize(np.zeros(m.n_cells), "newton")
        A, b = lin.system()
        P1 = dense_lu_solve(A.todense(), b)
        snap = S.exact_algebra_snapshot(s, lin, 1, P1)
        comp = S.component_fluxes(snap, m)
        assert np.abs(comp["linearization"].values).max() < 1e-12

    def test_divergence_identity_random_state(self, rng):
        m, s, lin, P0 = self.setup_state(rng)
        P_i = P0 + 0.2 * rng.normal(size=m.n_cells)
        P_ij = P_i + 0.05 * rng.normal(size=m.n_cells)
        snap = S.make_snapshot(s, lin, 2, 3, P_i, P_extended=P_ij, extra_steps=4)
        comp = S.component_fluxes(snap, m)
        total = (comp["discretization"].values + comp["linearization"].values
                 + comp["algebraic"].values)
        # independent recomputation of the extended residual
        R_ref = s.F - s.D.matvec(lin.fluxes(P_ij))
        assert np.allclose(s.D.matvec(total), s.F - R_ref, atol=1e-11)

    def test_missing_extended_iterate(self, rng):
        m, s, lin, P0 = self.setup_state(rng)
        snap = S.make_snapshot(s, lin, 1, 1, P0)
        with pytest.raises(MissingExtendedIterate):
            S.component_fluxes(snap, m)
