"""Grids and discrete calculus on the periodic strip and the layer half-line.

The strip is periodic in x (uniform spacing, spectral derivatives) and
wall-bounded in y with a tanh-graded vertex-centered grid clustering at
y = 0.  Fields are plain (nx, ny) float64 arrays without a duplicated
periodic seam.  The layer coordinate z = y/sqrt(eps) lives on a uniform
grid on [0, Lz] with homogeneous-decay far end.
"""

import warnings

import numpy as np
from scipy.interpolate import CubicSpline


class DecayViolation(Warning):
    """A layer field does not satisfy the exponential-decay hypothesis."""


def fd_weights(xs, x0, m):
    """Finite-difference weights for the m-th derivative at x0 on nodes xs.

    Fornberg's recursion; exact for polynomials up to degree len(xs)-1.
    """
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    w = np.zeros((m + 1, n))
    w[0, 0] = 1.0
    c1 = 1.0
    c4 = xs[0] - x0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    w[k, i] = c1 * (k * w[k - 1, i - 1] - c5 * w[k, i - 1]) / c2
                w[0, i] = -c1 * c5 * w[0, i - 1] / c2
            for k in range(mn, 0, -1):
                w[k, j] = ((c4 * w[k, j] - k * w[k - 1, j])) / c3
            w[0, j] = c4 * w[0, j] / c3
        c1 = c2
    return w[m]


def _stencil_table(y, m, width):
    """Per-row stencil weights/indices for d^m/dy^m on the node set y."""
    ny = len(y)
    half = (width - 1) // 2
    W = np.zeros((ny, width))
    J = np.zeros((ny, width), dtype=np.int64)
    for i in range(ny):
        lo = min(max(i - half, 0), ny - width)
        idx = np.arange(lo, lo + width)
        W[i] = fd_weights(y[idx], y[i], m)
        J[i] = idx
    return W, J


class StripGrid:
    """Periodic-in-x strip with tanh-graded wall-normal nodes."""

    def __init__(self, nx, ny, period_x=2.0 * np.pi, height_y=4.0,
                 stretch_ratio=20.0):
        if nx < 4 or (nx & (nx - 1)) != 0:
            raise ValueError(f"nx must be a power of two >= 4, got {nx}")
        if ny < 8:
            raise ValueError(f"ny too small: {ny}")
        if stretch_ratio < 1.0:
            raise ValueError("stretch_ratio must be >= 1")
        self.nx = nx
        self.ny = ny
        self.lx = float(period_x)
        self.ly = float(height_y)
        self.stretch_ratio = float(stretch_ratio)

        self.x = self.lx * np.arange(nx) / nx
        self.dx = self.lx / nx

        # y(t) = Ly [1 - tanh(s(1-t))/tanh(s)];  spacing ratio = cosh^2 s.
        t = np.arange(ny) / (ny - 1)
        if stretch_ratio == 1.0:
            y = self.ly * t
        else:
            s = np.arccosh(np.sqrt(stretch_ratio))
            y = self.ly * (1.0 - np.tanh(s * (1.0 - t)) / np.tanh(s))
        y[0] = 0.0
        y[-1] = self.ly
        self.y = y
        self.hy = np.diff(y)                       # node spacings, (ny-1,)
        self.yf = 0.5 * (y[:-1] + y[1:])           # interior faces (midpoints)
        # control volumes around nodes; identical to trapezoid weights
        self.dvol = np.empty(ny)
        self.dvol[0] = self.yf[0] - y[0]
        self.dvol[1:-1] = np.diff(self.yf)
        self.dvol[-1] = y[-1] - self.yf[-1]

        self.kx = 2.0 * np.pi / self.lx * np.arange(nx // 2 + 1)
        # 4-point first-derivative stencils: third order everywhere, which
        # keeps the composition ddy(ddy(f)) second order at the wall rows
        self._W1, self._J1 = _stencil_table(y, 1, 4)
        self._W2, self._J2 = _stencil_table(y, 2, 4)

    def spacing_ratio(self):
        return self.hy.max() / self.hy.min()

    def points_in_layer(self, eps):
        """Number of nodes with y <= sqrt(eps); layer-resolution diagnostic."""
        return int(np.count_nonzero(self.y <= np.sqrt(eps)))

    def zeros(self):
        return np.zeros((self.nx, self.ny))

    def mesh(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    def __eq__(self, other):
        return (isinstance(other, StripGrid) and self.nx == other.nx
                and self.ny == other.ny and self.lx == other.lx
                and self.ly == other.ly
                and self.stretch_ratio == other.stretch_ratio)


class LayerGrid:
    """Uniform grid for the stretched wall coordinate z on [0, Lz]."""

    def __init__(self, nz, extent_z=24.0):
        if nz < 8:
            raise ValueError(f"nz too small: {nz}")
        self.nz = nz
        self.lz = float(extent_z)
        self.z = np.linspace(0.0, self.lz, nz)
        self.dz = self.z[1]

    def zeros(self, nx):
        return np.zeros((nx, self.nz))

    def __eq__(self, other):
        return (isinstance(other, LayerGrid) and self.nz == other.nz
                and self.lz == other.lz)


def check_finite(f, name="field"):
    if not np.all(np.isfinite(f)):
        raise FloatingPointError(f"{name} contains NaN/Inf")


def ddx(grid, f):
    """Spectral x-derivative; exact for resolvable trigonometric fields."""
    F = np.fft.rfft(f, axis=0)
    F *= 1j * grid.kx[:, None]
    return np.fft.irfft(F, n=grid.nx, axis=0)


def ddy(grid, f, order=1):
    """Wall-normal derivative, second-order stencils on the graded nodes."""
    if order == 1:
        W, J = grid._W1, grid._J1
    elif order == 2:
        W, J = grid._W2, grid._J2
    else:
        raise ValueError(f"order must be 1 or 2, got {order}")
    return np.einsum("ik,...ik->...i", W, f[..., J])


def gradient(grid, f):
    return ddx(grid, f), ddy(grid, f, order=1)


def divergence(grid, u1, u2):
    return ddx(grid, u1) + ddy(grid, u2, order=1)


def laplacian(grid, f):
    return ddx(grid, ddx(grid, f)) + ddy(grid, f, order=2)


def extract_trace(grid, f, kind="value"):
    """Wall trace at y = 0: the value row bit-exactly, or one-sided dy, dyy."""
    if kind == "value":
        return f[:, 0].copy()
    if kind == "dy":
        W, J = grid._W1, grid._J1
    elif kind == "dyy":
        W, J = grid._W2, grid._J2
    else:
        raise ValueError(f"unknown trace kind {kind!r}")
    return f[:, J[0]] @ W[0]


def layer_to_strip(lgrid, vals, grid, eps, decay_tol=1e-6):
    """Evaluate a layer field at z = y/sqrt(eps) on the strip nodes.

    Cubic-spline in z (linear in the data), zero beyond Lz.  Warns when the
    far-end magnitude violates the decay hypothesis at decay_tol level.
    """
    if eps <= 0.0:
        raise ValueError("layer_to_strip requires eps > 0")
    vals = np.asarray(vals)
    scale = np.abs(vals).max()
    if scale > 0.0 and np.abs(vals[:, -1]).max() > decay_tol * scale:
        warnings.warn("layer field does not decay at z = Lz", DecayViolation)
    zq = grid.y / np.sqrt(eps)
    inside = zq <= lgrid.lz
    out = np.zeros((vals.shape[0], grid.ny))
    if inside.any():
        interp = CubicSpline(lgrid.z, vals, axis=1, extrapolate=False)
        out[:, inside] = interp(zq[inside])
    return out


def integrate(grid, f):
    """Integral over the strip with trapezoid weights in y, exact dx in x."""
    return grid.dx * float(np.sum(f @ grid.dvol))


def norm_l2(grid, f):
    return np.sqrt(grid.dx * float(np.sum((f * f) @ grid.dvol)))


def norm_sup(f):
    return float(np.abs(f).max())
