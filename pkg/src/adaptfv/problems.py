"""Manufactured problems with analytic potentials, fluxes, and sources.

All evaluators are vectorized over numpy arrays.  The quasi-linear
problems use the prototype coefficient ``k(r) = c + (C-c)/sqrt(1+r^2)``
applied to the gradient magnitude; their sources are encoded from the
hand-derived chain rule and double-checked by finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import OutsideDomain, UnknownProblem
from .scheme import Nonlinearity


@dataclass(frozen=True)
class ManufacturedProblem:
    name: str
    domain: str                       # "unit_square" | "lshape"
    p: Callable                       # potential p(x, y)
    grad_p: Callable                  # (x, y) -> (n, 2)
    f: Callable                       # source
    diffusion: float = 1.0            # scalar k for linear problems
    nonlinearity: Optional[Nonlinearity] = None
    homogeneous: bool = True
    constant_source: bool = False     # f cellwise constant on any mesh
    quad_subdivisions: int = 1        # composite quadrature for sharp data

    @property
    def is_nonlinear(self):
        return self.nonlinearity is not None

    def trace(self, x, y):
        """Dirichlet boundary values (the exact trace)."""
        return self.p(x, y)

    def flux(self, x, y):
        """Analytic flux -K grad p (or -k(|grad p|) grad p)."""
        g = self.grad_p(x, y)
        if self.nonlinearity is None:
            return -self.diffusion * g
        r = np.hypot(g[..., 0], g[..., 1])
        return -self.nonlinearity.k(r)[..., None] * g

    def contains(self, x, y, pad=0.0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.domain == "unit_square":
            return (x >= -pad) & (x <= 1 + pad) & (y >= -pad) & (y <= 1 + pad)
        inside_square = (x >= -1 - pad) & (x <= 1 + pad) & (y >= -1 - pad) & (y <= 1 + pad)
        notch = (x <= pad) & (y <= pad)
        return inside_square & ~notch

    @property
    def h_domain(self):
        return np.sqrt(2.0) if self.domain == "unit_square" else 2.0 * np.sqrt(2.0)


def evaluate_flux(problem: ManufacturedProblem, x, y):
    """Analytic flux with a domain-membership guard."""
    if not np.all(problem.contains(x, y, pad=1e-12)):
        raise OutsideDomain(f"point outside the {problem.domain} domain")
    return problem.flux(x, y)


# ----------------------------------------------------------------------
# linear problems
# ----------------------------------------------------------------------

def _peak():
    a = 0.75

    def g(t):
        return t * (1.0 - t)

    def E(x, y):
        return np.exp(-100.0 * ((x - a) ** 2 + (y - a) ** 2))

    def p(x, y):
        return 25.0 * g(x) * g(y) * E(x, y)

    def grad_p(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        e = E(x, y)
        px = 25.0 * g(y) * e * ((1.0 - 2.0 * x) - 200.0 * (x - a) * g(x))
        py = 25.0 * g(x) * e * ((1.0 - 2.0 * y) - 200.0 * (y - a) * g(y))
        return np.stack([px, py], axis=-1)

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        e = E(x, y)
        pxx = 25.0 * g(y) * e * (-2.0 - 200.0 * g(x)
                                 - 400.0 * (x - a) * (1.0 - 2.0 * x)
                                 + 40000.0 * (x - a) ** 2 * g(x))
        pyy = 25.0 * g(x) * e * (-2.0 - 200.0 * g(y)
                                 - 400.0 * (y - a) * (1.0 - 2.0 * y)
                                 + 40000.0 * (y - a) ** 2 * g(y))
        return -(pxx + pyy)

    return ManufacturedProblem("peak", "unit_square", p, grad_p, f)


def _lshape_polar(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    th = np.arctan2(y, x)
    return r, th


def _lshape_linear():
    def p(x, y):
        r, th = _lshape_polar(x, y)
        return np.where(r > 0, r ** (2.0 / 3.0)
                        * np.sin(2.0 * th / 3.0 + 1.5 * np.pi), 0.0)

    def grad_p(x, y):
        r, th = _lshape_polar(x, y)
        r = np.maximum(r, 1e-300)
        s = np.sin(2.0 * th / 3.0 + 1.5 * np.pi)
        c = np.cos(2.0 * th / 3.0 + 1.5 * np.pi)
        dr = (2.0 / 3.0) * r ** (-1.0 / 3.0) * s
        dth = (2.0 / 3.0) * r ** (-1.0 / 3.0) * c
        gx = dr * np.cos(th) - dth * np.sin(th)
        gy = dr * np.sin(th) + dth * np.cos(th)
        return np.stack([gx, gy], axis=-1)

    def f(x, y):
        return np.zeros_like(np.asarray(x, dtype=float))

    return ManufacturedProblem("lshape_linear", "lshape", p, grad_p, f,
                               homogeneous=False, constant_source=True)


def _alpha200():
    alpha = 200.0
    log2 = np.log(2.0)

    def _logF(t):
        # log of (2^2a t^a (1-t)^a); -inf at the boundary
        with np.errstate(divide="ignore"):
            return 2.0 * alpha * log2 + alpha * (np.log(t) + np.log(1.0 - t))

    def p(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = (x > 0) & (x < 1) & (y > 0) & (y < 1)
        out = np.zeros(np.broadcast(x, y).shape)
        xs, ys = np.broadcast_arrays(x, y)
        li = _logF(np.where(inside, xs, 0.5)) + _logF(np.where(inside, ys, 0.5))
        out = np.where(inside, np.exp(li), 0.0)
        return out

    def _ratios(t):
        # F'/F and F''/F of F = (2^2 t (1-t))^alpha, stable for t in (0,1)
        q = (1.0 - 2.0 * t) / (t * (1.0 - t))
        r1 = alpha * q
        r2 = alpha ** 2 * q ** 2 + alpha * (-2.0 * t ** 2 + 2.0 * t - 1.0) \
            / (t * (1.0 - t)) ** 2
        return r1, r2

    def grad_p(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xs, ys = np.broadcast_arrays(x, y)
        inside = (xs > 0) & (xs < 1) & (ys > 0) & (ys < 1)
        xi = np.where(inside, xs, 0.5)
        yi = np.where(inside, ys, 0.5)
        val = np.exp(_logF(xi) + _logF(yi))
        r1x, _ = _ratios(xi)
        r1y, _ = _ratios(yi)
        gx = np.where(inside, val * r1x, 0.0)
        gy = np.where(inside, val * r1y, 0.0)
        return np.stack([gx, gy], axis=-1)

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xs, ys = np.broadcast_arrays(x, y)
        inside = (xs > 0) & (xs < 1) & (ys > 0) & (ys < 1)
        xi = np.where(inside, xs, 0.5)
        yi = np.where(inside, ys, 0.5)
        val = np.exp(_logF(xi) + _logF(yi))
        _, r2x = _ratios(xi)
        _, r2y = _ratios(yi)
        return np.where(inside, -val * (r2x + r2y), 0.0)

    return ManufacturedProblem("alpha200", "unit_square", p, grad_p, f,
                               quad_subdivisions=4)


# ----------------------------------------------------------------------
# quasi-linear problems
# ----------------------------------------------------------------------

def _smooth_nonlinear(c=1.0, C=10.0):
    nl = Nonlinearity(c, C)

    def g(t):
        return t * (1.0 - t)

    def p(x, y):
        return 16.0 * g(np.asarray(x, dtype=float)) * g(np.asarray(y, dtype=float))

    def grad_p(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.stack([16.0 * (1.0 - 2.0 * x) * g(y),
                         16.0 * g(x) * (1.0 - 2.0 * y)], axis=-1)

    def f(x, y):
        # f = -div(k(|grad p|) grad p)
        #   = (C-c)(1+q^2)^{-3/2} (grad p . H grad p) - k(q) lap p
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gp = grad_p(x, y)
        q2 = np.einsum("...d,...d->...", gp, gp)
        q = np.sqrt(q2)
        pxx = -32.0 * g(y)
        pyy = -32.0 * g(x)
        pxy = 16.0 * (1.0 - 2.0 * x) * (1.0 - 2.0 * y)
        hquad = gp[..., 0] ** 2 * pxx + 2.0 * gp[..., 0] * gp[..., 1] * pxy \
            + gp[..., 1] ** 2 * pyy
        lap = pxx + pyy
        return (C - c) * (1.0 + q2) ** -1.5 * hquad - nl.k(q) * lap

    return ManufacturedProblem(f"smooth_nonlinear(c={c:g},C={C:g})",
                               "unit_square", p, grad_p, f, nonlinearity=nl)


def _lshape_nonlinear(c=1.0, C=10.0):
    nl = Nonlinearity(c, C)
    lin = _lshape_linear()

    def f(x, y):
        # lap p = 0 and |grad p| = (2/3) r^{-1/3} depends on r only, so
        # f = -k'(q) q'(r) dp/dr with q'(r) = -(2/9) r^{-4/3}
        r, th = _lshape_polar(x, y)
        r = np.maximum(r, 1e-300)
        s = np.sin(2.0 * th / 3.0 + 1.5 * np.pi)
        q = (2.0 / 3.0) * r ** (-1.0 / 3.0)
        dpdr = (2.0 / 3.0) * r ** (-1.0 / 3.0) * s
        return nl.dk(q) * (2.0 / 9.0) * r ** (-4.0 / 3.0) * dpdr

    return ManufacturedProblem(f"lshape_nonlinear(c={c:g},C={C:g})", "lshape",
                               lin.p, lin.grad_p, f, nonlinearity=nl,
                               homogeneous=False)


_CATALOG = {
    "peak": _peak,
    "lshape_linear": _lshape_linear,
    "alpha200": _alpha200,
    "smooth_nonlinear": _smooth_nonlinear,
    "lshape_nonlinear": _lshape_nonlinear,
}


def catalog(name: Optional[str] = None, **params) -> ManufacturedProblem:
    """Fetch a named problem; the quasi-linear entries accept c and C."""
    if name is None:
        raise UnknownProblem("problem name required; one of "
                             + ", ".join(sorted(_CATALOG)))
    try:
        maker = _CATALOG[name]
    except KeyError:
        raise UnknownProblem(
            f"{name!r}; known: {', '.join(sorted(_CATALOG))}") from None
    return maker(**params)


def catalog_names():
    return tuple(sorted(_CATALOG))
