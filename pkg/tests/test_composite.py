import numpy as np
import pytest

from cnslab import composite, flow, grids, layers, mms, scenarios
from cnslab.composite import GridMismatch
from cnslab.layers import LAYER_FIELDS, LayerSolution, TimeDifferencing


def zero_slab(nx, nzp):
    return {k: np.zeros((nx, nzp)) for k in LAYER_FIELDS}


def synthetic_layer(nx=16, nz=320, zmax=16.0, times=(0.0,), lam=1.0, **fields):
    x = 2 * np.pi * np.arange(nx) / nx
    z = np.linspace(0.0, zmax, nz + 1)
    slabs = []
    for _ in times:
        slab = zero_slab(nx, nz + 1)
        for k, fn in fields.items():
            slab[k] = fn(x[:, None], z[None, :])
        slabs.append(slab)
    return LayerSolution(x, z, np.asarray(times, float), slabs, lam)


# ------------------------------------------------------------------- norms

def test_l2_norm_of_constant_field():
    g = grids.StripGrid(16, 32)
    val = composite.norms(g, np.ones((16, 32)), "l2")
    assert abs(val - np.sqrt(g.lx * g.ly)) < 1e-12


def test_l2_norm_analytic_oracle():
    # separable integrand: Lx/2 in x, (1 - e^{-2Ly})/2 in y
    g = grids.StripGrid(64, 2048, stretch_ratio=20.0)
    f = np.sin(2 * np.pi * g.x / g.lx)[:, None] * np.exp(-g.y)[None, :]
    exact = np.sqrt(g.lx / 2.0 * (1.0 - np.exp(-2.0 * g.ly)) / 2.0)
    assert abs(composite.norms(g, f, "l2") - exact) / exact < 1e-6
    assert composite.norms(g, np.exp(-g.y)[None, :] * np.ones((64, 1)),
                           "sup") == 1.0


def test_norm_kinds_over_series():
    g = grids.StripGrid(8, 16)
    series = np.stack([j * np.ones((8, 16)) for j in (1.0, -3.0, 2.0)])
    area = np.sqrt(g.lx * g.ly)
    assert abs(composite.norms(g, series, "linf_l2") - 3.0 * area) < 1e-12
    assert composite.norms(g, series, "linf_sup") == 3.0
    with pytest.raises(ValueError):
        composite.norms(g, series[0], "linf_l2")
    with pytest.raises(ValueError):
        composite.norms(g, series, "idk")


# ---------------------------------------------------------------- stretching

def test_map_slab_is_composition_with_stretching():
    lay = synthetic_layer(cB1=lambda x, z: (1 + 0.3 * np.cos(x))
                          * np.exp(-z))
    for eps in (1.0, 0.25):
        g = grids.StripGrid(16, 200, stretch_ratio=4.0)
        out = composite.map_slab(lay, 0, g, eps, fields=("cB1",))["cB1"]
        exact = (1 + 0.3 * np.cos(g.x))[:, None] * np.exp(
            -g.y / np.sqrt(eps))[None, :]
        assert np.abs(out - exact).max() < 1e-6


def test_map_slab_vanishes_beyond_layer_domain():
    # e^{-8} at the far edge still trips the decay warning; expected here
    lay = synthetic_layer(zmax=4.0, cB1=lambda x, z: np.exp(-2 * z))
    g = grids.StripGrid(16, 64)
    with pytest.warns(grids.DecayViolation):
        out = composite.map_slab(lay, 0, g, 0.04, fields=("cB1",))["cB1"]
    beyond = g.y > 4.0 * np.sqrt(0.04)
    assert beyond.any() and np.all(out[:, beyond] == 0.0)


def test_map_slab_warns_on_nondecaying_field():
    lay = synthetic_layer(zmax=4.0, cB1=lambda x, z: np.cosh(z - 4.0))
    g = grids.StripGrid(16, 64)
    with pytest.warns(grids.DecayViolation):
        composite.map_slab(lay, 0, g, 0.5, fields=("cB1",))


# ------------------------------------------------------------------ assemble

def test_assemble_zero_correctors_is_outer_bitwise():
    g = grids.StripGrid(16, 48)
    rng = np.random.default_rng(3)
    outer = {k: rng.normal(size=(16, 48)) for k in ("m", "c", "p")}
    lay = synthetic_layer(nz=64, times=(0.0,))
    one = composite.assemble_at(
        g, outer, composite.map_slab(lay, 0, g, 0.1), 0.1)
    for src, dst in (("m", "Ma"), ("c", "Ca"), ("p", "Pa")):
        assert one[dst].tobytes() == outer[src].tobytes()
    assert one["dy_Ca"].tobytes() == grids.ddy(g, outer["c"], 1).tobytes()


def test_assemble_weights_and_missing_second_order_c_term():
    g = grids.StripGrid(16, 48)
    rng = np.random.default_rng(4)
    outer = {k: rng.normal(size=(16, 48)) for k in ("m", "c", "p")}
    shape = lambda x, z: (1 + 0.1 * np.sin(x)) * np.exp(-z)
    lay = synthetic_layer(mB1=shape, cB1=shape, cB2=shape, mB2=shape,
                          pB2=shape, xi=shape)
    eps = 0.01
    mp = composite.map_slab(lay, 0, g, eps)
    one = composite.assemble_at(g, outer, mp, eps)
    s = np.sqrt(eps)
    ref_m = s * mp["mB1"] + eps * mp["mB2"] + eps * s * mp["xi"]
    ref_c = s * mp["cB1"] + eps * mp["cB2"]      # no eps^{3/2} term in c
    assert np.allclose(one["Ma"] - outer["m"], ref_m, rtol=0, atol=1e-15)
    assert np.allclose(one["Ca"] - outer["c"], ref_c, rtol=0, atol=1e-15)
    assert np.allclose(one["Pa"] - outer["p"], eps * mp["pB2"],
                       rtol=0, atol=1e-15)
    # xi feeds Ma only: zeroing it must leave Ca and Pa untouched
    lay2 = synthetic_layer(mB1=shape, cB1=shape, cB2=shape, mB2=shape,
                           pB2=shape)
    one2 = composite.assemble_at(
        g, outer, composite.map_slab(lay2, 0, g, eps), eps)
    assert one2["Ca"].tobytes() == one["Ca"].tobytes()
    assert one2["Pa"].tobytes() == one["Pa"].tobytes()
    assert np.abs(one2["Ma"] - one["Ma"]).max() > 0


def test_assemble_rejects_nonpositive_eps():
    g = grids.StripGrid(16, 48)
    with pytest.raises(ValueError):
        composite.assemble(g, [0.0], {}, None, 0.0)


# ---------------------------------------------------------------- remainders

def test_remainders_roundtrip_and_scaling():
    g = grids.StripGrid(16, 48)
    rng = np.random.default_rng(5)
    full = {k: rng.normal(size=(16, 48)) for k in ("m", "c", "u1", "u2")}
    outer = {k: rng.normal(size=(16, 48)) for k in ("u1", "u2")}
    comp = {"Ma": rng.normal(size=(16, 48)), "Ca": rng.normal(size=(16, 48))}
    eps = 2.0 ** -7
    rem = composite.remainders(g, full, outer, comp, eps)
    rec = comp["Ma"] + np.sqrt(eps) * rem["M"]
    tol = 4.0 * np.spacing(np.abs(full["m"]).max()
                           + np.abs(comp["Ma"]).max())
    assert np.abs(rec - full["m"]).max() <= tol

    self_rem = composite.remainders(
        g, {"m": comp["Ma"], "c": comp["Ca"],
            "u1": outer["u1"], "u2": outer["u2"]}, outer, comp, eps)
    for k in ("M", "C", "U1", "U2"):
        assert np.all(self_rem[k] == 0.0)

    rem2 = composite.remainders(g, full, outer, comp, eps / 2.0)
    assert np.allclose(rem2["M"], np.sqrt(2.0) * rem["M"], rtol=1e-14)


def test_remainders_grid_mismatch():
    g = grids.StripGrid(16, 48)
    full = {k: np.zeros((16, 48)) for k in ("m", "c", "u1", "u2")}
    outer = {"u1": np.zeros((16, 48)), "u2": np.zeros((8, 48))}
    comp = {"Ma": np.zeros((16, 48)), "Ca": np.zeros((16, 48))}
    with pytest.raises(GridMismatch):
        composite.remainders(g, full, outer, comp, 0.1)


# ------------------------------------------------- end-to-end on a desk run

@pytest.fixture(scope="module")
def desk():
    g = grids.StripGrid(64, 128, stretch_ratio=20.0)
    init = scenarios.make_initial(g, "paper")
    res = flow.run(g, flow.SolverConfig(dt=1e-3, t_end=0.3, eps=0.0, lam=1.0,
                                        fluid_on=True, output_every=10,
                                        trace_every=10),
                   init, record_traces=True)
    sel = res.times >= 0.1 - 1e-12     # past the startup transient
    times = res.times[sel]
    snaps = {k: [v[j] for j in range(len(res.times)) if sel[j]]
             for k, v in res.snaps.items()}
    lay = layers.build_layers(res.traces, lam=1.0, eval_times=times,
                              nz=240, zmax=16.0)
    defect = composite.outer_defect(g, times, snaps, lam=1.0)
    return g, times, snaps, res.traces, lay, defect


def test_composite_wall_derivative_vanishes(desk):
    g, times, snaps, _, lay, _ = desk
    comp = composite.assemble(g, times, snaps, lay, eps=2.0 ** -6)
    wall = np.abs(comp["dy_Ca"][:, :, 0]).max()
    assert wall <= 1e-12 * np.abs(comp["dy_Ca"]).max()


def test_outer_defect_within_mms_yardstick(desk):
    g, times, snaps, _, _, defect = desk
    man = mms.Manufactured(eps=0.0, lam=1.0, ly=4.0)
    res = flow.run(g, flow.SolverConfig(dt=1e-3, t_end=0.3, eps=0.0, lam=1.0,
                                        fluid_on=True, output_every=10),
                   man.initial(g), sources=man.sources)
    sel = res.times >= 0.1 - 1e-12
    mtimes = res.times[sel]
    msnaps = {k: [v[j] for j in range(len(res.times)) if sel[j]]
              for k, v in res.snaps.items()}
    mdef = composite.outer_defect(g, mtimes, msnaps, lam=1.0)
    xx, yy = g.x[:, None], g.y[None, :]
    for k in ("m", "c", "u1", "u2"):
        src = np.stack([man.sources[k](xx, yy, t) for t in mtimes])
        yard = max(grids.norm_l2(g, v) for v in mdef[k] + src)
        ours = max(grids.norm_l2(g, v) for v in defect[k])
        assert ours <= 10.0 * yard, (k, ours, yard)


def test_forcing_identity_defining_minus_structured(desk):
    # the two evaluations differ by the outer defect plus corrector
    # truncation; with the defect subtracted only the latter remains
    g, times, snaps, traces, lay, defect = desk
    fr = composite.residual_forcings(g, times, snaps, lay, traces, 2.0 ** -6)
    assert np.abs((fr["f"] - fr["fs"]) - defect["m"]).max() < 1e-5
    assert np.abs((fr["g"] - fr["gs"]) - defect["c"]).max() < 1e-5
    assert np.abs((fr["h1"] - fr["hs1"]) - defect["u1"]).max() < 1e-12


def test_h_two_form_agreement_within_measured_budget(desk):
    g, times, snaps, traces, lay, defect = desk
    for eps in (2.0 ** -4, 2.0 ** -6):
        fr = composite.residual_forcings(g, times, snaps, lay, traces, eps)
        gap = composite.h_two_form_gap(g, lay, times, snaps, eps,
                                       defect=defect)
        d1 = np.abs(fr["h1"] - fr["hs1"]).max()
        d2 = np.abs(fr["h2"] - fr["hs2"]).max()
        assert max(d1, d2) <= 1.05 * gap["bound"] + 1e-12
        # the stencil component is measured, not estimated
        assert np.abs((fr["h2"] - fr["hs2"]) - defect["u2"]).max() \
            <= 1.05 * gap["stencil_sup"] + 1e-12


def test_residual_forcings_norm_rows_match_fields(desk):
    g, times, snaps, traces, lay, _ = desk
    eps = 2.0 ** -5
    full = composite.residual_forcings(g, times, snaps, lay, traces, eps)
    lean = composite.residual_forcings(g, times, snaps, lay, traces, eps,
                                       keep_fields=False)
    assert "f" not in lean
    assert lean["rows"] == full["rows"]
    row = next(r for r in full["rows"]
               if r["quantity"] == "gs" and r["t"] == times[1])
    assert row["l2"] == grids.norm_l2(g, full["gs"][1])


def test_residual_forcings_time_guards(desk):
    g, times, snaps, traces, lay, _ = desk
    with pytest.raises(TimeDifferencing):
        composite.residual_forcings(g, times[:2],
                                    {k: v[:2] for k, v in snaps.items()},
                                    lay, traces, 0.1)
    skew = np.array([times[0], times[1], times[3]])
    with pytest.raises(TimeDifferencing):
        composite.residual_forcings(g, skew,
                                    {k: v[:3] for k, v in snaps.items()},
                                    lay, traces, 0.1)
    with pytest.raises(ValueError):
        composite.residual_forcings(g, times, snaps, lay, traces, 0.0)
