"""Wall-corrector machinery against independent oracles.

The stepper is checked against a frozen-coefficient closed form and a
manufactured time-dependent solution; tail integrals against analytic
integrals and an independent per-node quadrature; the assembled stack
against exact slaving identities and z-refinement.
"""

import numpy as np
import pytest

from cnslab import layers
from cnslab.traces import TraceSet


def _grid(nx=4, nz=640, zmax=24.0):
    x = np.linspace(0, 2 * np.pi, nx, endpoint=False)
    z = np.linspace(0.0, zmax, nz + 1)
    return x, z


def synthetic_traces(nx=8, nt=9, t_end=0.4):
    x = np.linspace(0, 2 * np.pi, nx, endpoint=False)
    tgrid = np.linspace(0.0, t_end, nt)

    def mk(base, tfun):
        return np.array([base * tfun(t) for t in tgrid])

    xprof = 1.0 + 0.5 * np.cos(x)
    data = {
        "m":      mk(1.0 + 0.2 * np.cos(x), lambda t: 1.0 + 0.3 * t),
        "c":      mk(0.5 + 0.1 * np.sin(x), lambda t: 1.0 + t),
        "dy_m":   mk(0.2 * xprof, lambda t: t),
        "dyy_m":  mk(0.1 * np.sin(x), lambda t: 1.0),
        "dy_c":   mk(0.3 * xprof, lambda t: t),
        "dyy_c":  mk(0.15 * np.cos(x), lambda t: 1.0 + 0.5 * t),
        "dx_c":   mk(-0.5 * np.sin(x), lambda t: 1.0),
        "dy_u1":  mk(0.4 * np.cos(x), lambda t: t),
        "dy_u2":  mk(0.1 * np.sin(x), lambda t: t),
        "dyy_u2": mk(0.2 * np.cos(x), lambda t: t),
    }
    return TraceSet(tgrid, x, data)


def test_tail_matches_closed_form():
    z = np.linspace(0.0, 24.0, 1281)
    T = layers.tail(np.exp(-z)[None, :], z[1] - z[0])
    ref = np.exp(-z) - np.exp(-24.0)
    assert np.max(np.abs(T[0] - ref)) < 1e-4


def test_stepper_frozen_coefficients_reach_closed_form_steady_state():
    # with a = 0, constant b and datum g the steady profile is
    # (-g / sqrt(b)) exp(-sqrt(b) z)
    x, z = _grid()
    st = layers.LayerStepper(x, z)
    beta = 0.8
    g = -0.3 * (1.0 + 0.5 * np.cos(x))
    b = np.full(len(x), beta)
    a = np.zeros(len(x))
    w = np.zeros((len(x), len(z)))
    drift = None
    for _ in range(2000):
        w, drift = st.step(w, 0.02, a, b, b, g, g, None, drift)
    ref = (-g[:, None] / np.sqrt(beta)) * np.exp(-np.sqrt(beta) * z[None, :])
    assert np.max(np.abs(w - ref)) < 3e-4


def test_stepper_manufactured_solution_second_order():
    lx = 2 * np.pi

    def run(nz, dt, zmax=20.0, t_end=1.0, nx=8):
        xg = np.linspace(0, lx, nx, endpoint=False)
        zg = np.linspace(0.0, zmax, nz + 1)
        st = layers.LayerStepper(xg, zg)
        P = (1.0 + 0.3 * np.cos(xg))[:, None]
        zz = zg[None, :]
        amp = lambda t: 1.0 + 0.5 * np.sin(t)
        cstar = lambda t: amp(t) * P * np.exp(-zz)
        arow = 0.1 + 0.05 * np.cos(xg)
        brow = 0.6 + 0.2 * np.sin(xg)

        def src(t):
            cs = cstar(t)
            return (0.5 * np.cos(t) * P * np.exp(-zz)
                    - zz * arow[:, None] * cs + brow[:, None] * cs - cs)

        g = lambda t: -amp(t) * P[:, 0]
        w = cstar(0.0).copy()
        drift = None
        for k in range(int(round(t_end / dt))):
            t0, t1 = k * dt, (k + 1) * dt
            w, drift = st.step(w, dt, arow, brow, brow, g(t0), g(t1),
                               0.5 * (src(t0) + src(t1)), drift)
        return np.max(np.abs(w - cstar(t_end)))

    e1, e2, e3 = run(100, 0.02), run(200, 0.01), run(400, 0.005)
    assert np.log2(e1 / e2) > 1.9
    assert np.log2(e2 / e3) > 1.9


def test_domain_doubling_changes_nothing():
    x, _ = _grid()
    beta = 0.8
    g = -0.3 * (1.0 + 0.5 * np.cos(x))
    b = np.full(len(x), beta)
    a = np.zeros(len(x))

    def frozen(zmax, nz):
        zg = np.linspace(0.0, zmax, nz + 1)
        st = layers.LayerStepper(x, zg)
        w = np.zeros((len(x), nz + 1))
        drift = None
        for _ in range(500):
            w, drift = st.step(w, 0.02, a, b, b, g, g, None, drift)
        return w

    w24 = frozen(24.0, 640)
    w48 = frozen(48.0, 1280)
    assert np.max(np.abs(w24 - w48[:, :641])) < 1e-8


def test_theta_closed_form():
    # constant rows and cB1 = phi(x) exp(-z) give
    # Theta = mu gc phi e^-z - mu phi^2 e^-2z / 2 - gm phi (1+z) e^-z
    nx, nz, zmax = 6, 2000, 30.0
    x = np.linspace(0, 2 * np.pi, nx, endpoint=False)
    z = np.linspace(0.0, zmax, nz + 1)
    dz = z[1] - z[0]
    zz = z[None, :]
    phi = (1.0 + 0.4 * np.cos(x))[:, None]
    mu, gc, gm = 1.3, 0.7, -0.25
    cB1 = phi * np.exp(-zz)
    mB1 = mu * cB1
    dz_cB1 = -cB1
    th = layers.compute_theta(z, dz, mB1, dz_cB1,
                              np.full(nx, gc), np.full(nx, gm))
    ref = (mu * gc * phi * np.exp(-zz)
           - 0.5 * mu * phi ** 2 * np.exp(-2 * zz)
           - gm * phi * (1.0 + zz) * np.exp(-zz))
    assert np.max(np.abs(th - ref)) < 5e-4
    # the analytic derivative matches a numerical one away from the edges
    thz = layers.theta_dz(z, mB1, dz_cB1, np.full(nx, gc), np.full(nx, gm))
    grad = np.gradient(th, dz, axis=1)
    assert np.max(np.abs(thz[:, 2:-2] - grad[:, 2:-2])) < 2e-3


def test_xi_matches_independent_quadrature():
    rng = np.random.default_rng(7)
    nx, nz, zmax, lx = 6, 200, 20.0, 2 * np.pi
    x = np.linspace(0, lx, nx, endpoint=False)
    z = np.linspace(0.0, zmax, nz + 1)
    dz = z[1] - z[0]
    zz = z[None, :]

    def xrow():
        cf = rng.normal(size=3)
        return (1.0 + 0.3 * np.cos(x) * cf[0] + 0.2 * np.sin(x) * cf[1]
                + 0.1 * np.cos(2 * x) * cf[2])

    def field(k):
        return xrow()[:, None] * np.exp(-k * zz) * (1.0 + 0.5 * zz)

    cB1 = field(1.0)
    cB2 = field(1.5)
    mB1 = field(1.2)
    mB1_t = field(0.9)
    mB2 = field(1.1)
    dz_cB1 = np.gradient(cB1, dz, axis=1)
    dz_cB2 = np.gradient(cB2, dz, axis=1)
    dz_mB1 = np.gradient(mB1, dz, axis=1)
    rows = {t: xrow() for t in ("m", "dy_m", "dyy_m", "dy_c", "dyy_c",
                                "dx_c", "dy_u2")}

    xi, dz_xi = layers.compute_xi(
        z, dz, lx, cB1, dz_cB1, cB2, dz_cB2, mB1, dz_mB1, mB1_t, mB2,
        rows["m"], rows["dy_m"], rows["dyy_m"], rows["dy_c"],
        rows["dyy_c"], rows["dx_c"], rows["dy_u2"])

    # independent evaluation: full-complex FFT derivative and per-node
    # quadrature instead of the module's reverse cumulative tails
    def ddx_ind(f):
        F = np.fft.fft(f, axis=0)
        k = np.fft.fftfreq(nx, d=lx / nx) * 2 * np.pi
        return np.real(np.fft.ifft(1j * k[:, None] * F, axis=0))

    def tail_ind(f):
        out = np.zeros_like(f)
        for j in range(f.shape[1] - 1):
            out[:, j] = np.trapezoid(f[:, j:], z[j:], axis=1)
        return out

    col = lambda r: r[:, None]
    xi_ref = (
        - tail_ind(zz * col(rows["dy_m"]) * dz_cB2)
        - col(rows["dy_c"]) * tail_ind(mB2)
        - tail_ind(0.5 * zz ** 2 * col(rows["dyy_m"]) * dz_cB1)
        - tail_ind(tail_ind(ddx_ind(ddx_ind(mB1))))
        + tail_ind(tail_ind(mB1_t))
        + tail_ind(tail_ind(zz * col(rows["dy_u2"]) * dz_mB1))
        + tail_ind(tail_ind(ddx_ind(col(rows["m"]) * ddx_ind(cB1)
                                    + mB1 * col(rows["dx_c"]))))
        + tail_ind(tail_ind((mB1 + zz * dz_mB1) * col(rows["dyy_c"])))
        - tail_ind(mB1 * dz_cB2 + mB2 * dz_cB1)
        + tail_ind(tail_ind(zz * dz_cB1 * col(rows["dyy_m"])))
    )
    scale = np.max(np.abs(xi_ref))
    assert scale > 1.0           # the synthetic fields actually exercise it
    assert np.max(np.abs(xi - xi_ref)) < 1e-12 * scale
    # analytic z-derivative against differencing the assembled xi
    grad = np.gradient(xi, dz, axis=1)[:, 2:-2]
    assert np.max(np.abs(dz_xi[:, 2:-2] - grad)) < 5e-2


def test_build_layers_identities_and_datum():
    tr = synthetic_traces()
    sol = layers.build_layers(tr, lam=1.0, eval_times=[0.2, 0.4],
                              nz=240, zmax=24.0)
    slab = sol.slab(sol.index(0.4))
    assert sorted(slab.keys()) == sorted(layers.LAYER_FIELDS)
    m_row = tr.interp("m", 0.4)
    assert np.array_equal(slab["mB1"], m_row[:, None] * slab["cB1"])
    assert np.array_equal(slab["pB2"],
                          layers.tail(slab["mB1"], sol.dz))
    np.testing.assert_allclose(slab["dz_cB1"][:, 0], -tr.interp("dy_c", 0.4))
    # the pressure tail differentiates back to the first cell corrector
    gp = np.gradient(slab["pB2"], sol.dz, axis=1)[:, 2:-2]
    scale = np.max(np.abs(slab["mB1"]))
    assert np.max(np.abs(gp + slab["mB1"][:, 2:-2])) < 5e-2 * scale
    for name in layers.LAYER_FIELDS:
        assert np.all(np.isfinite(slab[name]))


def test_build_layers_z_refinement_second_order():
    tr = synthetic_traces()
    ref = layers.build_layers(tr, lam=1.0, eval_times=[0.4], nz=1920,
                              zmax=24.0, n_sub=8).slab(0)
    errs = {}
    for nz in (120, 240, 480):
        slab = layers.build_layers(tr, lam=1.0, eval_times=[0.4], nz=nz,
                                   zmax=24.0, n_sub=8).slab(0)
        step = 1920 // nz
        errs[nz] = {name: np.max(np.abs(slab[name] - ref[name][:, ::step]))
                    for name in ("cB1", "cB2", "xi", "mB2", "pB2", "dz_xi")}
    for name in errs[120]:
        s1 = np.log2(errs[120][name] / errs[240][name])
        s2 = np.log2(errs[240][name] / errs[480][name])
        assert s1 > 1.9, (name, s1)
        assert s2 > 1.9, (name, s2)


def test_build_layers_trace_validation():
    tr = synthetic_traces()
    broken = TraceSet(tr.times, tr.x,
                      {k: v for k, v in tr.data.items() if k != "dy_u2"})
    with pytest.raises(layers.TraceGap):
        layers.build_layers(broken, lam=1.0, eval_times=[0.4], nz=80)
    with pytest.raises(layers.TraceGap):
        layers.build_layers(tr, lam=1.0, eval_times=[0.123], nz=80)
    short = TraceSet(tr.times[:2], tr.x,
                     {k: v[:2] for k, v in tr.data.items()})
    with pytest.raises(layers.TimeDifferencing):
        layers.build_layers(short, lam=1.0, eval_times=[tr.times[1]], nz=80)


def test_build_layers_decay_guard():
    tr = synthetic_traces()
    with pytest.raises(layers.DecayViolation):
        layers.build_layers(tr, lam=1.0, eval_times=[0.4], nz=40, zmax=3.0)


def test_layer_solution_index():
    tr = synthetic_traces()
    sol = layers.build_layers(tr, lam=1.0, eval_times=[0.2, 0.4],
                              nz=120, zmax=24.0)
    assert sol.index(0.2) == 0
    assert sol.index(0.4) == 1
    with pytest.raises(layers.TraceGap):
        sol.index(0.3)
