"""Batched tridiagonal solves, the hot kernel of every implicit sub-step."""

import os

import numpy as np
from numba import njit


def _configure_threads():
    n = os.environ.get("CNS_THREADS")
    if n:
        from numba import set_num_threads

        set_num_threads(max(1, int(n)))


_configure_threads()


@njit(cache=True)
def _thomas(dl, d, du, b, out):
    nsys, n = d.shape
    cp = np.empty(n)
    for s in range(nsys):
        w = d[s, 0]
        out[s, 0] = b[s, 0] / w
        cp[0] = du[s, 0] / w
        for i in range(1, n):
            w = d[s, i] - dl[s, i] * cp[i - 1]
            cp[i] = du[s, i] / w
            out[s, i] = (b[s, i] - dl[s, i] * out[s, i - 1]) / w
        for i in range(n - 2, -1, -1):
            out[s, i] -= cp[i] * out[s, i + 1]


def solve_tridiag_batch(dl, d, du, b):
    """Solve nsys independent systems; dl[:,0] and du[:,-1] are ignored.

    All arguments are (nsys, n) float64 arrays. Returns a new array.
    """
    out = np.empty_like(b)
    _thomas(np.ascontiguousarray(dl), np.ascontiguousarray(d),
            np.ascontiguousarray(du), np.ascontiguousarray(b), out)
    return out


def apply_tridiag(dl, d, du, f):
    """Apply batched tridiagonal matrices to f, shapes as in solve_tridiag_batch."""
    out = d * f
    out[:, 1:] += dl[:, 1:] * f[:, :-1]
    out[:, :-1] += du[:, :-1] * f[:, 1:]
    return out


@njit(cache=True)
def _factor(dl, d, du, w, dinv):
    nsys, n = d.shape
    for s in range(nsys):
        dinv[s, 0] = 1.0 / d[s, 0]
        w[s, 0] = 0.0
        for i in range(1, n):
            wi = dl[s, i] * dinv[s, i - 1]
            w[s, i] = wi
            dinv[s, i] = 1.0 / (d[s, i] - wi * du[s, i - 1])


@njit(cache=True)
def _solve_factored(w, dinv, du, b, out):
    nsys, n = b.shape
    for s in range(nsys):
        out[s, 0] = b[s, 0]
        for i in range(1, n):
            out[s, i] = b[s, i] - w[s, i] * out[s, i - 1]
        out[s, n - 1] = out[s, n - 1] * dinv[s, n - 1]
        for i in range(n - 2, -1, -1):
            out[s, i] = (out[s, i] - du[s, i] * out[s, i + 1]) * dinv[s, i]


def factor_tridiag_batch(dl, d, du):
    """LU-factor constant batched tridiagonal matrices once.

    Returns an opaque tuple for solve_factored; division-free solves where
    the same matrices are reused every step.
    """
    dl = np.ascontiguousarray(dl)
    d = np.ascontiguousarray(d)
    du = np.ascontiguousarray(du)
    w = np.empty_like(d)
    dinv = np.empty_like(d)
    _factor(dl, d, du, w, dinv)
    return (w, dinv, du, dl, d)


def solve_factored(fac, b):
    """Solve with a factor_tridiag_batch factorization; b is (nsys, n)."""
    w, dinv, du = fac[0], fac[1], fac[2]
    out = np.empty_like(b)
    _solve_factored(w, dinv, du, np.ascontiguousarray(b), out)
    return out
