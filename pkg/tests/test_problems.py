import numpy as np
import pytest

from adaptfv import problems as P
from adaptfv.errors import OutsideDomain, UnknownProblem


def fd_divflux(prob, x, y, h):
    """Fourth-order central differences of the analytic flux divergence."""
    def ux(xx, yy):
        return prob.flux(xx, yy)[..., 0]

    def uy(xx, yy):
        return prob.flux(xx, yy)[..., 1]
    dux = (ux(x - 2 * h, y) - 8 * ux(x - h, y)
           + 8 * ux(x + h, y) - ux(x + 2 * h, y)) / (12 * h)
    duy = (uy(x, y - 2 * h) - 8 * uy(x, y - h)
           + 8 * uy(x, y + h) - uy(x, y + 2 * h)) / (12 * h)
    return dux, duy


def sample_points(prob, rng, n=20):
    pts = []
    while len(pts) < n:
        if prob.name.startswith("alpha200"):
            x, y = rng.uniform(0.42, 0.58, 2)
        elif prob.domain == "unit_square":
            x, y = rng.uniform(0.05, 0.95, 2)
        else:
            x, y = rng.uniform(-0.9, 0.9, 2)
            if not (prob.contains(x, y) and min(abs(x), abs(y)) > 0.05
                    and np.hypot(x, y) > 0.1):
                continue
        pts.append((x, y))
    return pts


class TestPointValues:
    def test_peak_value(self):
        assert P.catalog("peak").p(0.75, 0.75) == pytest.approx(0.87890625,
                                                                abs=1e-15)

    def test_lshape_value(self):
        # r = 1, theta = pi/2: sin(pi/3 + 3pi/2) = -cos(pi/3) = -1/2
        assert P.catalog("lshape_linear").p(0.0, 1.0) == pytest.approx(
            -0.5, abs=1e-12)

    def test_smooth_nonlinear_center(self):
        prob = P.catalog("smooth_nonlinear", c=1.0, C=10.0)
        assert prob.p(0.5, 0.5) == pytest.approx(1.0, abs=1e-15)

    def test_alpha200_center_and_decay(self):
        prob = P.catalog("alpha200")
        assert prob.p(0.5, 0.5) == pytest.approx(1.0, rel=1e-12)
        assert prob.p(0.2, 0.6) < 1e-40
        assert prob.p(0.0, 0.5) == 0.0

    def test_unknown(self):
        with pytest.raises(UnknownProblem):
            P.catalog("does_not_exist")


class TestPDEResidualGuard:
    @pytest.mark.parametrize("name,params,h", [
        ("peak", {}, 1e-5),
        ("lshape_linear", {}, 1e-6),
        ("alpha200", {}, 1e-5),
        ("smooth_nonlinear", dict(c=1.0, C=10.0), 1e-6),
        ("smooth_nonlinear", dict(c=1.0, C=1e6), 1e-6),
        ("lshape_nonlinear", dict(c=1.0, C=10.0), 1e-6),
    ])
    def test_f_matches_divergence(self, rng, name, params, h):
        prob = P.catalog(name, **params)
        worst = 0.0
        for x, y in sample_points(prob, rng):
            dux, duy = fd_divflux(prob, x, y, h)
            fv = float(prob.f(x, y))
            scale = max(abs(dux), abs(duy), abs(fv), 1e-12)
            worst = max(worst, abs((dux + duy) - fv) / scale)
        assert worst <= 1e-5


class TestFluxAndDomain:
    def test_center_flux_zero(self):
        prob = P.catalog("smooth_nonlinear", c=1.0, C=10.0)
        assert np.allclose(P.evaluate_flux(prob, 0.5, 0.5), 0.0, atol=1e-14)

    def test_linear_limit_flux(self):
        c = 3.0
        prob = P.catalog("smooth_nonlinear", c=c, C=c)
        g = prob.grad_p(0.3, 0.7)
        assert np.allclose(prob.flux(0.3, 0.7), -c * g, rtol=1e-14)

    def test_peak_flux_vs_fd_gradient(self, rng):
        prob = P.catalog("peak")
        h = 1e-6
        for x, y in sample_points(prob, rng, 5):
            gx = (prob.p(x + h, y) - prob.p(x - h, y)) / (2 * h)
            gy = (prob.p(x, y + h) - prob.p(x, y - h)) / (2 * h)
            u = prob.flux(x, y)
            assert np.allclose(u, [-gx, -gy],
                               atol=1e-6 * max(1, abs(gx), abs(gy)))

    def test_outside_domain(self):
        prob = P.catalog("lshape_linear")
        with pytest.raises(OutsideDomain):
            P.evaluate_flux(prob, -0.5, -0.5)
        P.evaluate_flux(prob, 0.5, 0.5)

    def test_homogeneous_boundary_values(self, rng):
        for name in ("peak", "alpha200"):
            prob = P.catalog(name)
            t = rng.uniform(0, 1, 50)
            for xy in (np.column_stack([t, np.zeros_like(t)]),
                       np.column_stack([np.ones_like(t), t])):
                assert np.abs(prob.p(xy[:, 0], xy[:, 1])).max() <= 1e-12

    def test_h_domain(self):
        assert P.catalog("peak").h_domain == pytest.approx(np.sqrt(2))
        assert P.catalog("lshape_linear").h_domain == pytest.approx(2 * np.sqrt(2))
