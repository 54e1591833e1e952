"""Manufactured-solution machinery for solver verification.

A smooth exact solution compatible with every boundary condition (flat wall
profiles for the scalars, no-slip velocity from a streamfunction, analytic
divergence zero) is pushed through the PDE system symbolically; the leftover
residuals become source terms injected into the solver.  Errors against the
closed forms then measure pure discretization error.
"""

from functools import lru_cache

import numpy as np
import sympy as sp

from .flow import project_velocity


@lru_cache(maxsize=None)
def _build(eps, lam, ly, no_flow, no_m):
    x, y, t = sp.symbols("x y t", real=True)
    k = sp.pi / ly

    m = 2 + sp.Rational(1, 2) * sp.cos(x) * sp.cos(k * y) * sp.exp(-t)
    if no_m:
        m = sp.Integer(0)
    c = (sp.Rational(3, 2)
         + sp.Rational(2, 5) * sp.cos(x + 1) * sp.cos(k * y) * sp.exp(-t))
    psi = sp.sin(x + sp.Rational(1, 2)) * sp.sin(k * y) ** 2 * sp.exp(-t)
    if no_flow:
        psi = sp.Integer(0)
    u1 = sp.diff(psi, y)
    u2 = -sp.diff(psi, x)
    p = sp.Rational(3, 10) * sp.cos(x + 2) * sp.cos(k * y) * sp.exp(-t)
    if no_flow:
        p = sp.Integer(0)

    def lap(f):
        return sp.diff(f, x, 2) + sp.diff(f, y, 2)

    def adv(f):
        return u1 * sp.diff(f, x) + u2 * sp.diff(f, y)

    s_m = (sp.diff(m, t) + adv(m)
           + sp.diff(m * sp.diff(c, x), x) + sp.diff(m * sp.diff(c, y), y)
           - lap(m))
    s_c = sp.diff(c, t) + adv(c) + m * c - eps * lap(c)
    s_u1 = sp.diff(u1, t) + adv(u1) + sp.diff(p, x) - lap(u1)
    s_u2 = sp.diff(u2, t) + adv(u2) + sp.diff(p, y) + lam * m - lap(u2)

    syms = (x, y, t)
    fields = {name: sp.lambdify(syms, f, "numpy")
              for name, f in (("m", m), ("c", c), ("u1", u1), ("u2", u2),
                              ("p", p))}
    sources = {name: sp.lambdify(syms, f, "numpy")
               for name, f in (("m", s_m), ("c", s_c), ("u1", s_u1),
                               ("u2", s_u2))}
    return fields, sources


class Manufactured:
    """Exact fields and matching sources for given (eps, lambda, Ly).

    no_flow freezes the velocity at zero; no_m drops the cell density, so
    the c equation reduces to transport-diffusion (both together give the
    pure-diffusion benchmark, no_m alone the pure-advection one at eps=0).
    """

    def __init__(self, eps, lam, ly=4.0, no_flow=False, no_m=False):
        self.eps = float(eps)
        self.lam = float(lam)
        self.ly = float(ly)
        self.fields, self.sources = _build(sp.nsimplify(self.eps),
                                           sp.nsimplify(self.lam),
                                           sp.nsimplify(self.ly), no_flow,
                                           no_m)

    def initial(self, grid, prepare=True):
        """Initial fields; prepare=True projects the velocity onto the
        discretely divergence-free set (the closed form is solenoidal only
        up to spatial truncation, and an unprepared start costs one
        temporal order)."""
        xx, yy = grid.x[:, None], grid.y[None, :]
        yyf = grid.yf[None, :]

        def full(name, yv, shape):
            return np.broadcast_to(self.fields[name](xx, yv, 0.0),
                                   shape).astype(float)

        nn = (grid.nx, grid.ny)
        out = {
            "m": full("m", yy, nn),
            "c": full("c", yy, nn),
            "u1": full("u1", yy, nn),
            "u2f": full("u2", yyf, (grid.nx, grid.ny - 1)),
        }
        if prepare:
            out["u1"], out["u2f"] = project_velocity(grid, out["u1"],
                                                     out["u2f"])
        return out

    def exact(self, grid, name, t):
        xx, yy = grid.x[:, None], grid.y[None, :]
        return np.broadcast_to(self.fields[name](xx, yy, t),
                               (grid.nx, grid.ny)).astype(float)

    def errors(self, grid, state):
        """Sup-norm errors of the evolved state against the closed forms."""
        t = state.t
        out = {
            "m": np.abs(state.m - self.exact(grid, "m", t)).max(),
            "c": np.abs(state.c - self.exact(grid, "c", t)).max(),
            "u1": np.abs(state.u1 - self.exact(grid, "u1", t)).max(),
            "u2": np.abs(state.u2 - self.exact(grid, "u2", t)).max(),
        }
        return out
