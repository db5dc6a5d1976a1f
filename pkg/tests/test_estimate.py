import numpy as np
import pytest

from adaptfv import adaptive as A
from adaptfv import estimate as E
from adaptfv import localmat as L
from adaptfv import mesh as M
from adaptfv import problems as P
from adaptfv import reconstruct as R
from adaptfv import scheme as S
from adaptfv.errors import (MissingConfig, NegativeEstimate, NotEquilibrated,
                            ZeroError)
from adaptfv.sparse_linalg import SparseMatrix, cg_step, new_state
from oracles import duffy_gauss, random_convex_polygon


class TestPoissonPath:
    def test_exact_gradient_zero_estimate(self):
        # u_h = -grad s_h with an affine potential and f = 0
        m = M.triangle_grid(2)
        tris = m.vertices[m.cells]
        a = np.tile([-1.0, -2.0], (m.n_cells, 1))
        u = L.RT0Field(tris, a, np.zeros(m.n_cells))
        nodes = np.concatenate(
            [tris, 0.5 * (tris[:, [1, 2, 0]] + tris[:, [2, 0, 1]])], axis=1)
        vals = nodes[..., 0] + 2.0 * nodes[..., 1]
        s_h = R.P2Potential(tris, vals)
        eta, total = E.estimate_poisson(m, u, s_h, check_equilibration=False)
        assert total < 1e-13

    def test_oscillation_vanishes_for_constant_f(self):
        m = M.triangle_grid(2)
        zeros = L.RT0Field(m.vertices[m.cells], np.zeros((m.n_cells, 2)),
                           np.zeros(m.n_cells))
        s0 = R.P2Potential(m.vertices[m.cells], np.zeros((m.n_cells, 6)))
        f = lambda x, y: 3.0 + 0.0 * x
        _, with_osc = E.estimate_poisson(m, zeros, s0, f,
                                         check_equilibration=False)
        _, without = E.estimate_poisson(m, zeros, s0, f,
                                        check_equilibration=False,
                                        include_oscillation=False)
        assert with_osc == pytest.approx(without, rel=1e-12)

    def test_peak_estimators_vs_high_order_oracle(self):
        # 4-cell patch near the peak (cells resolve f, so the stated
        # degree-5 oscillation quadrature is meaningful); eta_K against
        # an independent Duffy-Gauss oracle
        prob = P.catalog("peak")
        lo, hi = 0.65, 0.85
        m = M.build_simplicial(
            [[lo, lo], [hi, lo], [hi, hi], [lo, hi], [0.76, 0.74]],
            [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
        disc = A.discretize(prob, m, "tpfa", collocation="circumcenter",
                            source_subdivisions=8)
        res = A.solve_linear(disc)
        u = R.lift_flux_simplicial(m, res.fluxes)
        s_h = R.average_p2(m, R.postprocess_potential(u, res.P),
                           boundary_values=prob.trace)
        eta, _ = E.estimate_poisson(m, u, s_h, prob.f,
                                    source_integrals=disc.F,
                                    oscillation_subdivisions=12)
        for k in range(m.n_cells):
            tri = m.vertices[m.cells[k]]

            def conf(x, y, k=k):
                pts = np.column_stack([x, y])
                v = u.eval_piece(k, pts) + s_h.grad_piece(k, pts)
                return np.einsum("qd,qd->q", v, v)
            mean = disc.F[k] / m.areas[k]

            def osc(x, y, mean=mean):
                return (prob.f(x, y) - mean) ** 2
            ref = duffy_gauss(tri, conf, 12) \
                + (m.diameters[k] / np.pi) ** 2 * duffy_gauss(tri, osc, 25)
            assert eta[k] ** 2 == pytest.approx(ref, rel=1e-8)

    def test_not_equilibrated_raises(self):
        m = M.triangle_grid(2)
        u = L.RT0Field(m.vertices[m.cells], np.zeros((m.n_cells, 2)),
                       np.ones(m.n_cells))  # div = 2 everywhere
        s0 = R.P2Potential(m.vertices[m.cells], np.zeros((m.n_cells, 6)))
        with pytest.raises(NotEquilibrated):
            E.estimate_poisson(m, u, s0, source_integrals=np.zeros(m.n_cells))


class TestMatrixPath:
    def test_zero_state(self):
        pm = M.rectangle_grid(1)
        mats = L.cell_matrices(pm.submeshes[0], 1.0, 1.0)
        val = E.estimate_darcy_matrix(np.zeros(4), np.zeros(5), np.zeros(4),
                                      0.0, 1.0, mats)
        assert val == 0.0

    def test_matrix_equals_quadrature(self, rng):
        worst = 0.0
        for _ in range(20):
            pts = random_convex_polygon(rng)
            pm = M.build_polytopal(pts, [list(range(len(pts)))])
            sub = pm.submeshes[0]
            kd = rng.uniform(0.3, 4.0)
            mats = L.cell_matrices(sub, 1.0 / kd, kd)
            u_ext = rng.normal(size=sub.n_ext)
            z = rng.normal(size=sub.n_points)
            idx = np.arange(sub.n_ext)
            z_ext = 0.5 * (z[idx] + z[(idx + 1) % sub.n_ext])
            eta_sq = E.estimate_darcy_matrix(
                u_ext, z, z_ext, float(u_ext.sum()), pm.areas[0], mats)
            field, _ = R.solve_local_neumann(sub, u_ext, 1.0 / kd)
            val = 0.0
            for t in range(len(sub.tris)):
                tri = sub.points[sub.tris[t]]
                gs = z[sub.tris[t]] @ R._grad_lambdas(tri)

                def dens(x, y, t=t, gs=gs):
                    v = field.eval_piece(t, np.column_stack([x, y])) + kd * gs
                    return np.einsum("qd,qd->q", v, v) / kd
                val += L.integrate(tri, dens, degree=2)
            worst = max(worst, abs(eta_sq - val) / max(val, 1e-300))
        assert worst <= 1e-10

    def test_given_element_matrix_path_identical(self, rng):
        # supplying A_hat = A_MFE reproduces the theorem value exactly
        pts = random_convex_polygon(rng)
        pm = M.build_polytopal(pts, [list(range(len(pts)))])
        mats = L.cell_matrices(pm.submeshes[0], 1.0, 1.0)
        u = rng.normal(size=pm.submeshes[0].n_ext)
        z = rng.normal(size=pm.submeshes[0].n_points)
        idx = np.arange(len(u))
        ze = 0.5 * (z[idx] + z[(idx + 1) % len(u)])
        v1 = E.estimate_darcy_matrix(u, z, ze, float(u.sum()), pm.areas[0], mats)
        given = L.CellLocalMatrices(mats.a_mfe.copy(), mats.s_fe, mats.m_fe, 1.0)
        v2 = E.estimate_darcy_matrix(u, z, ze, float(u.sum()), pm.areas[0], given)
        assert v1 == v2

    def test_negative_estimate_raises(self):
        pm = M.rectangle_grid(1)
        mats = L.cell_matrices(pm.submeshes[0], 1.0, 1.0)
        u = np.array([1.0, 1.0, 1.0, 1.0])
        z = np.zeros(5)
        ze = np.full(4, -10.0)  # inconsistent data mimicking a sign bug
        with pytest.raises(NegativeEstimate):
            E.estimate_darcy_matrix(u, z, ze, float(u.sum()), 1.0, mats)

    def test_scaling_covariance(self, rng):
        # K -> lam K with P -> P / lam keeps fluxes fixed and scales the
        # estimator total by lam^{-1/2}
        lam = 4.0
        pm = M.rectangle_grid(2)
        mats1 = L.mesh_matrices(pm, 1.0, 1.0)
        matsL = L.mesh_matrices(pm, 1.0 / lam, lam)
        P1 = rng.normal(size=4)
        zv1 = R.point_values_avg(pm, P1)
        zvL = R.point_values_avg(pm, P1 / lam)
        U = S.FaceFluxVector(pm, rng.normal(size=pm.n_faces))
        F = np.array([float(U.cell_ext(k).sum()) for k in range(4)])
        _, t1 = E.estimate_darcy(pm, mats1, U, zv1, F)
        _, tL = E.estimate_darcy(pm, matsL, U, zvL, F)
        assert tL == pytest.approx(t1 / np.sqrt(lam), rel=1e-12)

    def test_non_constant_source_rejected(self):
        prob = P.catalog("peak")
        pm = M.rectangle_grid(2)
        disc = A.discretize(prob, pm, "hmfe")
        res = A.solve_linear(disc)
        zv = R.point_values_avg(pm, res.P)
        with pytest.raises(MissingConfig):
            E.estimate_darcy(pm, disc.matrices(), res.fluxes, zv, disc.F,
                             f=prob.f, oscillation="reject")


class TestNonlinearPath:
    def make_state(self, C=10.0, n=4):
        prob = P.catalog("smooth_nonlinear", c=1.0, C=C)
        mesh = M.rectangle_grid(n)
        disc = A.discretize(prob, mesh, "tpfa")
        res = A.solve_nonlinear(disc, linearization="newton", lin_tol=1e-12)
        lin = disc.fv.linearize(res.P, "newton")
        snap = S.exact_algebra_snapshot(disc.fv, lin, 1, res.P)
        return disc, res, snap

    def test_converged_components_vanish(self):
        disc, res, snap = self.make_state()
        bd = A.estimate_nonlinear_state(disc, snap)
        assert bd.total_lin <= 1e-9 * bd.total_sp
        assert bd.total_alg == 0.0
        assert bd.total_rem <= 1e-9 * bd.total_sp

    def test_linear_limit_reduces_to_scaled_linear(self):
        # C = c = k: the nonlinear spatial estimator equals the linear
        # matrix estimator of the k-diffusion problem
        kd = 2.0
        probN = P.catalog("smooth_nonlinear", c=kd, C=kd)
        mesh = M.rectangle_grid(3)
        disc = A.discretize(probN, mesh, "tpfa")
        res = A.solve_nonlinear(disc, linearization="newton", lin_tol=1e-13)
        lin = disc.fv.linearize(res.P, "newton")
        snap = S.exact_algebra_snapshot(disc.fv, lin, 1, res.P)
        bd = A.estimate_nonlinear_state(disc, snap, include_oscillation=False)
        mats = L.mesh_matrices(mesh, 1.0 / kd, kd)
        zv = R.point_values_avg(mesh, res.P)
        F = np.array([float(res.fluxes.cell_ext(k).sum())
                      for k in range(mesh.n_cells)])
        _, lin_total = E.estimate_darcy(mesh, mats, res.fluxes, zv, F)
        assert bd.total_sp == pytest.approx(lin_total, rel=1e-10)

    def test_eta_alg_equals_lifted_energy(self, rng):
        disc, res, snap0 = self.make_state()
        mesh = disc.poly
        lin = disc.fv.linearize(snap0.P, "newton")
        P_i = snap0.P + 0.05 * rng.normal(size=mesh.n_cells)
        P_ij = P_i + 0.01 * rng.normal(size=mesh.n_cells)
        snap = S.make_snapshot(disc.fv, lin, 1, 1, P_i, P_extended=P_ij,
                               extra_steps=3)
        bd = A.estimate_nonlinear_state(disc, snap)
        comp = S.component_fluxes(snap, mesh)
        c_cfg, C_cfg = disc.config.c, disc.config.C
        w = C_cfg * C_cfg / c_cfg
        energy = 0.0
        for k in range(mesh.n_cells):
            field, _ = R.solve_local_neumann(mesh.submeshes[k],
                                             comp["algebraic"].cell_ext(k), 1.0)
            for t in range(len(field.c)):
                def dens(x, y, t=t, field=field):
                    v = field.eval_piece(t, np.column_stack([x, y]))
                    return np.einsum("qd,qd->q", v, v)
                energy += w * L.integrate(field.tris[t], dens, degree=2)
        assert bd.total_alg ** 2 == pytest.approx(energy, rel=1e-10)

    def test_more_extra_steps_never_increase_rem(self):
        # on a converging CG run the extended residual shrinks with j
        prob = P.catalog("smooth_nonlinear", c=1.0, C=10.0)
        mesh = M.rectangle_grid(4)
        disc = A.discretize(prob, mesh, "tpfa")
        lin = disc.fv.linearize(np.zeros(mesh.n_cells), "fixed_point")
        Amat, b = lin.system()
        state = new_state(Amat, b)
        iters = {}
        for i in range(1, 31):
            cg_step(Amat, b, state)
            iters[i] = state.x.copy()
        rems = []
        for j in (5, 10, 20):
            snap = S.make_snapshot(disc.fv, lin, 1, 10, iters[10],
                                   P_extended=iters[10 + j], extra_steps=j)
            bd = A.estimate_nonlinear_state(disc, snap)
            rems.append(bd.total_rem)
        assert rems[1] <= rems[0] * (1 + 1e-12)
        assert rems[2] <= rems[1] * (1 + 1e-12)

    def test_missing_config(self):
        disc, res, snap = self.make_state()
        zv = R.point_values_avg(disc.poly, res.P)
        with pytest.raises(MissingConfig):
            E.estimate_nonlinear(disc.poly, disc.matrices(), snap, zv,
                                 disc.F, None)


class TestExactError:
    def test_rt0_exact_field_zero_error(self):
        # analytic flux already in RT0 (affine with matching structure)
        m = M.triangle_grid(2)
        flux = lambda x, y: np.stack([1.0 + 2.0 * x, -3.0 + 2.0 * y], axis=-1)
        u = L.RT0Field(m.vertices[m.cells],
                       np.tile([1.0, -3.0], (m.n_cells, 1)),
                       np.full(m.n_cells, 2.0))
        _, err = E.simplicial_error(m, flux, u)
        assert err < 1e-13

    def test_zero_field_gives_norm_of_u(self):
        m = M.triangle_grid(3)
        flux = lambda x, y: np.stack([np.sin(x), np.cos(y)], axis=-1)
        zero = L.RT0Field(m.vertices[m.cells], np.zeros((m.n_cells, 2)),
                          np.zeros(m.n_cells))
        _, err = E.simplicial_error(m, flux, zero, subdivisions=3)
        ref_sq = sum(duffy_gauss(m.vertices[m.cells[k]],
                                 lambda x, y: np.sin(x)**2 + np.cos(y)**2, 10)
                     for k in range(m.n_cells))
        assert err == pytest.approx(np.sqrt(ref_sq), rel=1e-8)

    def test_error_decreases_under_refinement(self):
        prob = P.catalog("peak")
        errs = []
        for n in (4, 8, 16):
            disc = A.discretize(prob, M.triangle_grid(n))
            res = A.solve_linear(disc)
            _, err = A.exact_error(disc, res)
            errs.append(err)
        assert errs[1] < errs[0] and errs[2] < errs[1]


class TestEffectivity:
    def test_unit(self):
        assert E.effectivity(2.0, 2.0) == 1.0

    def test_zero_error(self):
        with pytest.raises(ZeroError):
            E.effectivity(1.0, 0.0)


class TestConfig:
    def test_friedrichs_bounds(self):
        E.EstimatorConfig(h_domain=1.0, friedrichs=1.0)
        E.EstimatorConfig(h_domain=1.0, friedrichs=1.0 / (2 * np.pi))
        with pytest.raises(MissingConfig):
            E.EstimatorConfig(h_domain=1.0, friedrichs=0.01)
        with pytest.raises(MissingConfig):
            E.EstimatorConfig(h_domain=1.0, friedrichs=1.5)

    def test_constants_ordering(self):
        with pytest.raises(MissingConfig):
            E.EstimatorConfig(h_domain=1.0, c=2.0, C=1.0)


class TestStudyCSV:
    def test_format_row(self):
        row = E.format_study_row(1, 10, 20, 0.5, 1.0)
        parts = row.split(",")
        assert parts[:3] == ["1", "10", "20"]
        assert float(parts[3]) == 0.5
        assert float(parts[-1]) == 2.0
