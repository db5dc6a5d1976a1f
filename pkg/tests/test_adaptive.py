import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptfv import adaptive as A
from adaptfv import mesh as M
from adaptfv import problems as P
from adaptfv.errors import MissingConfig


class TestMarking:
    def test_all_equal_all_marked(self):
        assert len(A.mark_cells(np.ones(7), 0.7)) == 7

    def test_single_spike(self):
        eta = np.array([0.1, 0.1, 5.0, 0.1])
        assert list(A.mark_cells(eta, 0.7)) == [2]

    def test_threshold_arithmetic(self):
        marked = A.mark_cells(np.array([1.0, 0.8, 0.5]), 0.7)
        assert list(marked) == [0, 1]

    def test_zero_threshold_marks_all(self):
        assert len(A.mark_cells(np.array([1.0, 0.1, 0.0]), 0.0)) == 3

    def test_derefine_set(self):
        out = A.derefine_set(np.array([1.0, 0.1, 0.3]), 0.2)
        assert list(out) == [1]

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1e-6, 1e6), st.integers(0, 10**6))
    def test_scale_invariance(self, lam, seed):
        rng = np.random.default_rng(seed)
        eta = rng.uniform(0, 1, 17)
        a = A.mark_cells(eta, 0.7)
        b = A.mark_cells(lam * eta, 0.7)
        assert np.array_equal(a, b)


class TestConfig:
    def test_validation(self):
        with pytest.raises(MissingConfig):
            A.AdaptiveConfig(delta_ref=0.2, delta_deref=0.7)
        with pytest.raises(MissingConfig):
            A.AdaptiveConfig(gamma_lin=1.5)
        A.AdaptiveConfig()


class TestAdaptiveSolve:
    def test_linear_single_linearization(self):
        prob = P.catalog("peak")
        disc = A.discretize(prob, M.triangle_grid(4))
        res, hist = A.adaptive_inexact_solve(disc, A.AdaptiveConfig())
        assert hist.linearization_iterations == 1
        assert hist.final.eta_lin == 0.0

    def test_degenerate_gammas_fall_back(self):
        prob = P.catalog("peak")
        disc = A.discretize(prob, M.triangle_grid(3))
        cfg = A.AdaptiveConfig(gamma_lin=0.0, gamma_alg=0.0)
        res, hist = A.adaptive_inexact_solve(disc, cfg)
        assert "fallback" in hist.stopped_by
        # solved to the standard tolerance
        lin = disc.fv.linearize(np.zeros(disc.n_cells))
        Amat, b = lin.system()
        r = np.linalg.norm(b - Amat.matvec(res.P))
        assert r <= 1e-11 * np.linalg.norm(b)

    def test_termination_criteria_logged(self):
        prob = P.catalog("smooth_nonlinear", c=1.0, C=10.0)
        disc = A.discretize(prob, M.rectangle_grid(6))
        cfg = A.AdaptiveConfig(gamma_lin=0.1, gamma_alg=0.01)
        res, hist = A.adaptive_inexact_solve(disc, cfg,
                                             linearization="fixed_point")
        last = hist.final
        assert last.eta_alg <= cfg.gamma_alg * last.eta_sp
        assert last.eta_lin <= cfg.gamma_lin * last.eta_sp
        active = [v for v in (last.eta_alg, last.eta_lin) if v > 1e-300]
        assert last.eta_rem <= cfg.rem_fraction * min(active) \
            or last.extra_steps >= cfg.extra_steps_cap

    def test_adaptive_never_more_linearizations(self):
        prob = P.catalog("smooth_nonlinear", c=1.0, C=100.0)
        mesh = M.rectangle_grid(6)
        disc = A.discretize(prob, mesh)
        std = A.solve_nonlinear(disc, linearization="fixed_point",
                                lin_tol=1e-8, damping=False, max_iter=2000)
        disc2 = A.discretize(prob, mesh)
        cfg = A.AdaptiveConfig(gamma_lin=0.1, max_lin_iterations=2000)
        _, hist = A.adaptive_inexact_solve(disc2, cfg,
                                           linearization="fixed_point",
                                           exact_algebra=True,
                                           balance="frozen")
        assert hist.linearization_iterations <= std.linearization_iterations


class TestStudies:
    def test_single_level_single_row(self):
        prob = P.catalog("peak")
        rows = A.convergence_study(prob, lambda l: M.triangle_grid(4), 1)
        assert len(rows) == 1

    def test_error_decreases_and_bound_holds(self):
        prob = P.catalog("peak")
        rows = A.convergence_study(prob, lambda l: M.triangle_grid(4 * 2**l), 3)
        errs = [r.error for r in rows]
        assert errs[1] < errs[0] and errs[2] < errs[1]
        assert all(r.i_eff >= 1.0 - 1e-8 for r in rows)

    def test_csv_schema(self):
        prob = P.catalog("peak")
        rows = A.convergence_study(prob, lambda l: M.triangle_grid(3), 1)
        text = A.study_csv(rows)
        header = text.splitlines()[0].split(",")
        assert header == ["level", "ndof", "ncells", "error", "estimate",
                          "eta_sp", "eta_lin", "eta_alg", "eta_rem", "i_eff"]

    def test_uniform_marking_reproduces_uniform_study(self):
        prob = P.catalog("peak")
        cfg = A.AdaptiveConfig(delta_ref=1e-9, delta_deref=1e-10)
        amr = A.amr_loop(prob, M.rectangle_grid(4), cfg, 2,
                         scheme_name="hmfe", estimator_path="matrix")
        uni = A.convergence_study(prob, lambda l: M.rectangle_grid(4 * 2**l),
                                  2, "hmfe", "matrix")
        for ra, ru in zip(amr, uni):
            assert ra.ncells == ru.ncells
            assert ra.error == pytest.approx(ru.error, rel=1e-10)
            assert ra.estimate == pytest.approx(ru.estimate, rel=1e-10)

    def test_amr_target_estimate_stops_early(self):
        prob = P.catalog("lshape_linear")
        cfg = A.AdaptiveConfig(delta_ref=0.7)
        rows = A.amr_loop(prob, M.lshape_rectangle_grid(4), cfg, 50,
                          scheme_name="hmfe", estimator_path="matrix",
                          target_estimate=0.12)
        assert len(rows) < 50
        assert rows[-1].estimate <= 0.12


class TestFrozenEvaluation:
    def test_frozen_linear_limit_matches_linear(self):
        kd = 2.0
        probN = P.catalog("smooth_nonlinear", c=kd, C=kd)
        mesh = M.rectangle_grid(4)
        disc = A.discretize(probN, mesh, "tpfa")
        res = A.solve_nonlinear(disc, linearization="newton", lin_tol=1e-13)
        eta, total, err = A.frozen_estimate_and_error(disc, res)
        # compare against the plain linear evaluation with diffusion kd
        lin_prob = P.ManufacturedProblem(
            "lin", "unit_square", probN.p, probN.grad_p, probN.f, diffusion=kd)
        disc_l = A.discretize(lin_prob, mesh, "tpfa")
        res_l = A.solve_linear(disc_l)
        _, total_l = A.estimate_solution(disc_l, res_l, "p2sub")
        _, err_l = A.exact_error(disc_l, res_l)
        assert err == pytest.approx(err_l, rel=1e-9)
        assert total == pytest.approx(total_l, rel=1e-9)

    def test_frozen_rejects_linear_problem(self):
        prob = P.catalog("peak")
        disc = A.discretize(prob, M.rectangle_grid(2))
        res = A.solve_linear(disc)
        with pytest.raises(MissingConfig):
            A.frozen_estimate_and_error(disc, res)
