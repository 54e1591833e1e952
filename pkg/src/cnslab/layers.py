"""Wall-corrector hierarchy on the stretched coordinate z = y / sqrt(eps).

The limit run records wall traces; this module marches the two corrector
problems those traces drive,

    w_t + z a(x,t) w_z + b(x,t) w = w_zz + S,      z in (0, inf),

with a the wall slope of u2 and b = m (c + 1) at the wall, a flux datum at
z = 0 and decay at infinity.  From the two solutions it assembles every
derived field the composite expansion and its residual forcings consume:
the slaved cell correctors, the pressure tail, and the third corrector xi
with its ten tail integrals.  Everything lives on one uniform z grid
truncated at zmax; epsilon enters only later, through evaluation at
z = y / sqrt(eps), so a single march serves every epsilon in a sweep.

Time marching is trapezoidal in the diffusion and reaction terms and
extrapolated (AB2) in the stretched drift, with a sign-switched one-sided
second-order stencil for w_z; the flux datum enters through a ghost node.
"""

import numpy as np

from .kernels import solve_tridiag_batch
from .traces import TRACE_TAGS

LAYER_FIELDS = (
    "cB1", "dz_cB1", "dzz_cB1", "mB1", "dz_mB1",
    "cB2", "dz_cB2", "dzz_cB2", "mB2", "dz_mB2", "mB2_t",
    "pB2", "xi", "dz_xi", "xi_t",
)


class LayerError(Exception):
    pass


class TraceGap(LayerError):
    """Requested times or tags are not covered by the recorded traces."""


class DecayViolation(LayerError):
    """A corrector has not decayed by the truncation edge; enlarge zmax."""


class TimeDifferencing(LayerError):
    """Traces are too sparse in time to form the needed differences."""


def tail(f, dz):
    """Reverse cumulative trapezoid along the last axis: T_j = int_{z_j} f.

    The grid truncates the half-line, so the integrand is assumed
    negligible beyond the last node (see DecayViolation).
    """
    seg = 0.5 * dz * (f[..., 1:] + f[..., :-1])
    out = np.zeros_like(f)
    out[..., :-1] = np.cumsum(seg[..., ::-1], axis=-1)[..., ::-1]
    return out


def _ddx(f, lx):
    n = f.shape[0]
    k = (2.0 * np.pi / lx) * np.fft.rfftfreq(n, 1.0 / n)
    return np.fft.irfft(1j * k[:, None] * np.fft.rfft(f, axis=0), n=n, axis=0)


def _d1z(w, dz, wall):
    """First z-derivative; the wall row carries the exact flux datum."""
    out = np.empty_like(w)
    out[:, 1:-1] = (w[:, 2:] - w[:, :-2]) / (2.0 * dz)
    out[:, 0] = wall
    out[:, -1] = (3.0 * w[:, -1] - 4.0 * w[:, -2] + w[:, -3]) / (2.0 * dz)
    return out


def _d2z(w, dz, wall):
    """Second z-derivative with the datum ghost at the wall row."""
    out = np.empty_like(w)
    out[:, 1:-1] = (w[:, 2:] - 2.0 * w[:, 1:-1] + w[:, :-2]) / dz ** 2
    out[:, 0] = (2.0 * w[:, 1] - 2.0 * w[:, 0]) / dz ** 2 - 2.0 * wall / dz
    out[:, -1] = (2.0 * w[:, -1] - 5.0 * w[:, -2]
                  + 4.0 * w[:, -3] - w[:, -4]) / dz ** 2
    return out


class LayerStepper:
    """One corrector problem's time stepper on the uniform z grid.

    step() advances w by dt with frozen-in-time rows a (drift slope,
    explicit AB2), b0/b1 (reaction, trapezoid), g0/g1 (wall flux datum)
    and an optional pre-averaged source; it returns (w_next, drift_now)
    where drift_now must be fed back as drift_prev on the next call
    (None restarts with a one-step method).
    """

    def __init__(self, x, z):
        self.x = np.asarray(x, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.dz = float(self.z[1] - self.z[0])
        if not np.allclose(np.diff(self.z), self.dz):
            raise ValueError("layer grid must be uniform in z")

    def drift(self, w, a):
        """z a w_z with second-order stencils one-sided against the drift."""
        dz = self.dz
        dm = np.empty_like(w)
        dm[:, 2:] = (3.0 * w[:, 2:] - 4.0 * w[:, 1:-1] + w[:, :-2]) / (2 * dz)
        dm[:, 1] = (w[:, 2] - w[:, 0]) / (2 * dz)
        dm[:, 0] = 0.0
        dp = np.empty_like(w)
        dp[:, :-2] = (-3.0 * w[:, :-2] + 4.0 * w[:, 1:-1] - w[:, 2:]) / (2 * dz)
        dp[:, -2] = (w[:, -1] - w[:, -3]) / (2 * dz)
        dp[:, -1] = 0.0
        wz = np.where((a > 0.0)[:, None], dm, dp)
        return (a[:, None] * self.z[None, :]) * wz

    def step(self, w, dt, a, b0, b1, g0, g1, s_half=None, drift_prev=None):
        dz = self.dz
        dz2 = dz ** 2
        adv = self.drift(w, a)
        ab = adv if drift_prev is None else 1.5 * adv - 0.5 * drift_prev

        expl = np.empty_like(w)
        expl[:, 1:-1] = (w[:, 2:] - 2.0 * w[:, 1:-1] + w[:, :-2]) / dz2
        expl[:, 0] = (2.0 * w[:, 1] - 2.0 * w[:, 0]) / dz2 - 2.0 * g0 / dz
        expl[:, -1] = 0.0

        rhs = w / dt + 0.5 * expl - 0.5 * b0[:, None] * w - ab
        if s_half is not None:
            rhs = rhs + s_half
        rhs[:, 0] -= g1 / dz
        rhs[:, -1] = 0.0                      # pinned far edge

        nx, nzp = w.shape
        lo = np.full((nx, nzp), -0.5 / dz2)
        di = 1.0 / dt + 1.0 / dz2 + 0.5 * b1[:, None] * np.ones(nzp)
        up = np.full((nx, nzp), -0.5 / dz2)
        up[:, 0] = -1.0 / dz2                 # ghost-folded wall row
        lo[:, -1] = 0.0
        di[:, -1] = 1.0
        up[:, -1] = 0.0
        return solve_tridiag_batch(lo, di, up, rhs), adv


def compute_theta(z, dz, mB1, dz_cB1, dy_c0, dy_m0):
    """Defect between the slaved second cell corrector and m0*cB2."""
    zz = z[None, :]
    return (dy_c0[:, None] * tail(mB1, dz)
            + tail(mB1 * dz_cB1, dz)
            + dy_m0[:, None] * tail(zz * dz_cB1, dz))


def theta_dz(z, mB1, dz_cB1, dy_c0, dy_m0):
    """Exact z-derivative of compute_theta (tails differentiate to
    their integrands)."""
    zz = z[None, :]
    return -(dy_c0[:, None] * mB1 + mB1 * dz_cB1
             + dy_m0[:, None] * zz * dz_cB1)


def compute_gamma(z, cB1, dz_cB1, dx_cB1, mB1, dy_u10, dyy_u20, dy_m0, dy_c0):
    """Source feeding the second corrector problem (five local terms)."""
    zz = z[None, :]
    return (- zz * dy_u10[:, None] * dx_cB1
            - 0.5 * zz ** 2 * dyy_u20[:, None] * dz_cB1
            - zz * dy_m0[:, None] * cB1
            - zz * mB1 * dy_c0[:, None]
            - mB1 * cB1)


def compute_xi(z, dz, lx, cB1, dz_cB1, cB2, dz_cB2, mB1, dz_mB1, mB1_t,
               mB2, m0, dy_m0, dyy_m0, dy_c0, dyy_c0, dx_c0, dy_u20):
    """Third corrector from its ten tail integrals; returns (xi, dz_xi).

    dz_xi is exact given the tails: single tails differentiate to their
    integrands, double tails to single tails, so no numerical z-derivative
    of xi is ever taken.
    """
    zz = z[None, :]

    def T(f):
        return tail(f, dz)

    def col(r):
        return r[:, None]

    s1 = zz * col(dy_m0) * dz_cB2
    s2 = col(dy_c0) * mB2
    s3 = 0.5 * zz ** 2 * col(dyy_m0) * dz_cB1
    s9 = mB1 * dz_cB2 + mB2 * dz_cB1
    t4 = T(_ddx(_ddx(mB1, lx), lx))
    t5 = T(mB1_t)
    t6 = T(zz * col(dy_u20) * dz_mB1)
    t7 = T(_ddx(col(m0) * _ddx(cB1, lx) + mB1 * col(dx_c0), lx))
    t8 = T((mB1 + zz * dz_mB1) * col(dyy_c0))
    t10 = T(zz * dz_cB1 * col(dyy_m0))

    xi = (- T(s1) - col(dy_c0) * T(mB2) - T(s3)
          - T(t4) + T(t5) + T(t6) + T(t7) + T(t8)
          - T(s9) + T(t10))
    dz_xi = (s1 + s2 + s3
             + t4 - t5 - t6 - t7 - t8
             + s9 - t10)
    return xi, dz_xi


def _interp_rows(times, arr, t):
    if t <= times[0]:
        return arr[0].copy()
    if t >= times[-1]:
        return arr[-1].copy()
    j = int(np.searchsorted(times, t, side="right")) - 1
    w = (t - times[j]) / (times[j + 1] - times[j])
    return (1.0 - w) * arr[j] + w * arr[j + 1]


class _Rows:
    """Trace rows (and the time derivative of the wall cell density) at
    arbitrary t, linearly interpolated."""

    def __init__(self, traces):
        self.tr = traces
        self.m_t = np.gradient(traces.data["m"], traces.times, axis=0)

    def at(self, t):
        out = {tag: self.tr.interp(tag, t) for tag in TRACE_TAGS}
        out["m_t"] = _interp_rows(self.tr.times, self.m_t, t)
        return out


def _source2(z, dz, lx, rows, cB1):
    """Gamma - c0 * Theta, the source of the second corrector problem."""
    g = -rows["dy_c"]
    dzc = _d1z(cB1, dz, g)
    mB1 = rows["m"][:, None] * cB1
    gam = compute_gamma(z, cB1, dzc, _ddx(cB1, lx), mB1,
                        rows["dy_u1"], rows["dyy_u2"],
                        rows["dy_m"], rows["dy_c"])
    th = compute_theta(z, dz, mB1, dzc, rows["dy_c"], rows["dy_m"])
    return gam - rows["c"][:, None] * th


def _assemble(z, dz, lx, rows, cB1, cB2, lam):
    """Full derived-field stack at one time level (no time differences)."""
    zz = z[None, :]
    zero = np.zeros(cB1.shape[0])
    g = -rows["dy_c"]
    dz_cB1 = _d1z(cB1, dz, g)
    dzz_cB1 = _d2z(cB1, dz, g)
    dz_cB2 = _d1z(cB2, dz, zero)
    dzz_cB2 = _d2z(cB2, dz, zero)

    m0 = rows["m"][:, None]
    mB1 = m0 * cB1
    dz_mB1 = m0 * dz_cB1
    a = rows["dy_u2"][:, None]
    b = (rows["m"] * (rows["c"] + 1.0))[:, None]
    cB1_t = dzz_cB1 - zz * a * dz_cB1 - b * cB1
    mB1_t = rows["m_t"][:, None] * cB1 + m0 * cB1_t

    th = compute_theta(z, dz, mB1, dz_cB1, rows["dy_c"], rows["dy_m"])
    mB2 = m0 * cB2 - th
    dz_mB2 = m0 * dz_cB2 - theta_dz(z, mB1, dz_cB1,
                                    rows["dy_c"], rows["dy_m"])
    pB2 = lam * tail(mB1, dz)

    xi, dz_xi = compute_xi(
        z, dz, lx, cB1, dz_cB1, cB2, dz_cB2, mB1, dz_mB1, mB1_t, mB2,
        rows["m"], rows["dy_m"], rows["dyy_m"], rows["dy_c"],
        rows["dyy_c"], rows["dx_c"], rows["dy_u2"])
    return {
        "cB1": cB1.copy(), "dz_cB1": dz_cB1, "dzz_cB1": dzz_cB1,
        "mB1": mB1, "dz_mB1": dz_mB1,
        "cB2": cB2.copy(), "dz_cB2": dz_cB2, "dzz_cB2": dzz_cB2,
        "mB2": mB2, "dz_mB2": dz_mB2,
        "pB2": pB2, "xi": xi, "dz_xi": dz_xi,
    }


class LayerSolution:
    """Corrector stack at the stored evaluation times.

    slab(i) returns the field dict on the (x, z) grid at times[i]; all
    epsilon dependence is deferred to evaluation at z = y / sqrt(eps).
    """

    def __init__(self, x, z, times, slabs, lam):
        self.x = x
        self.z = z
        self.dz = float(z[1] - z[0])
        self.lz = float(z[-1])
        self.times = np.asarray(times, dtype=float)
        self.lam = lam
        self._slabs = slabs

    def index(self, t):
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise TraceGap(f"no stored corrector slab at t={t!r}")
        return j

    def slab(self, i):
        return self._slabs[i]


def build_layers(traces, lam, eval_times, nz=640, zmax=24.0, n_sub=None,
                 cfl=0.4, decay_tol=1e-6):
    """March both corrector problems over the trace window.

    eval_times must be a subset of the recorded trace times; at each one
    the full derived stack (LAYER_FIELDS) is assembled, with the two time
    derivatives taken by centered differences over one march substep
    (backward at the final time).  Raises TraceGap for missing tags or
    unaligned times, TimeDifferencing for traces too sparse to
    differentiate, DecayViolation if a corrector has not decayed by zmax.
    """
    missing = [tag for tag in TRACE_TAGS if tag not in traces.data]
    if missing:
        raise TraceGap(f"traces missing tags {missing}")
    tt = traces.times
    if len(tt) < 3:
        raise TimeDifferencing("need at least three trace rows")
    dts = np.diff(tt)
    dt_tr = float(dts[0])
    if not np.allclose(dts, dt_tr, rtol=1e-6):
        raise TimeDifferencing("trace times must be uniformly spaced")

    eval_times = np.sort(np.asarray(eval_times, dtype=float))
    idx_tr = []
    for t in eval_times:
        j = int(np.argmin(np.abs(tt - t)))
        if abs(tt[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise TraceGap(f"evaluation time {t!r} is not a trace time")
        idx_tr.append(j)

    x = traces.x
    nx = len(x)
    lx = float(nx * (x[1] - x[0])) if nx > 1 else 2.0 * np.pi
    z = np.linspace(0.0, zmax, nz + 1)
    dz = z[1] - z[0]

    if n_sub is None:
        amax = float(np.max(np.abs(traces.data["dy_u2"])))
        vmax = zmax * amax
        dt_adv = cfl * dz / vmax if vmax > 0.0 else np.inf
        n_sub = max(2, int(np.ceil(dt_tr / min(dt_adv, 0.5 * dt_tr))))
    dt_sub = dt_tr / n_sub

    rowsrc = _Rows(traces)
    stepper = LayerStepper(x, z)
    cB1 = np.zeros((nx, nz + 1))
    cB2 = np.zeros((nx, nz + 1))
    drift1 = drift2 = None
    rows_now = rowsrc.at(tt[0])
    s_now = _source2(z, dz, lx, rows_now, cB1)

    last_idx = max(idx_tr)
    nsteps = last_idx * n_sub + 1          # one extra for the last centered
    nsteps = min(nsteps, (len(tt) - 1) * n_sub)
    slabs = [None] * len(eval_times)
    want = {}                              # step index -> slab slot
    for slot, j in enumerate(idx_tr):
        want.setdefault(j * n_sub, []).append(slot)
    pending = []                           # (slot, slab_minus, slab_mid, step)

    # the centered difference needs the states one substep behind; keep a
    # two-deep state history keyed by step index
    hist = {0: (cB1, cB2)}

    def maybe_record(step, t, c1, c2, rows):
        for slot in want.get(step, ()):
            prev = max(step - 1, 0)
            rows_m = rowsrc.at(tt[0] + prev * dt_sub)
            slab_m = _assemble(z, dz, lx, rows_m, *hist[prev], lam)
            slab_0 = _assemble(z, dz, lx, rows, c1, c2, lam)
            pending.append([slot, slab_m, slab_0, step])

    t = tt[0]
    maybe_record(0, t, cB1, cB2, rows_now)
    for k in range(nsteps):
        t1 = tt[0] + (k + 1) * dt_sub
        rows_next = rowsrc.at(t1)
        a0 = rows_now["dy_u2"]
        b0 = rows_now["m"] * (rows_now["c"] + 1.0)
        b1 = rows_next["m"] * (rows_next["c"] + 1.0)
        g0 = -rows_now["dy_c"]
        g1 = -rows_next["dy_c"]
        c1_new, drift1 = stepper.step(cB1, dt_sub, a0, b0, b1, g0, g1,
                                      None, drift1)
        s_next = _source2(z, dz, lx, rows_next, c1_new)
        zero = np.zeros(nx)
        c2_new, drift2 = stepper.step(cB2, dt_sub, a0, b0, b1, zero, zero,
                                      0.5 * (s_now + s_next), drift2)
        cB1, cB2, rows_now, s_now, t = c1_new, c2_new, rows_next, s_next, t1
        hist[k + 1] = (cB1, cB2)
        hist.pop(k - 1, None)

        for rec in list(pending):
            slot, slab_m, slab_0, step0 = rec
            if k + 1 == step0 + 1:
                slab_p = _assemble(z, dz, lx, rows_now, cB1, cB2, lam)
                span = 2.0 * dt_sub if step0 > 0 else dt_sub
                slab_0["mB2_t"] = (slab_p["mB2"] - slab_m["mB2"]) / span
                slab_0["xi_t"] = (slab_p["xi"] - slab_m["xi"]) / span
                slabs[slot] = slab_0
                pending.remove(rec)
        maybe_record(k + 1, t, cB1, cB2, rows_now)

    # a slab recorded on the very last march step gets a backward difference
    for rec in pending:
        slot, slab_m, slab_0, step0 = rec
        slab_0["mB2_t"] = (slab_0["mB2"] - slab_m["mB2"]) / dt_sub
        slab_0["xi_t"] = (slab_0["xi"] - slab_m["xi"]) / dt_sub
        slabs[slot] = slab_0

    for slot, slab in enumerate(slabs):
        if slab is None:
            raise TraceGap(
                f"march never reached evaluation time {eval_times[slot]!r}")
        for name in ("cB1", "cB2"):
            f = slab[name]
            edge = float(np.max(np.abs(f[:, -4:])))
            if edge > decay_tol * float(np.max(np.abs(f))) + 1e-14:
                raise DecayViolation(
                    f"{name} at t={eval_times[slot]:g} reaches the "
                    f"truncation edge (|edge| = {edge:.3e})")

    return LayerSolution(x, z, eval_times, slabs, lam)
