"""Epsilon sweeps, rate fits, fluid on/off comparison, and MMS verification.

A sweep runs the eps=0 problem once (it feeds every comparison: the limit
fields, the wall traces, and through them the corrector stack), then one
full run per eps with all error norms accumulated on the fly at the output
cadence, nothing stored.  Slopes of log(error) against log(eps) are fitted
per claim; forcing-residual norms come from the structured evaluation on
the outer solution and corrector stack alone, so they need no extra runs.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import composite, flow, grids, layers, mms, scenarios


class DegenerateFit(Exception):
    """Rate fit asked for on unusable data (short or nonpositive)."""


class InconclusiveSignal(Exception):
    """Layer amplitude is too close to the measurement floor to decide."""


def fit_rate(eps, err):
    """Least-squares slope of log err against log eps.

    Returns (slope, intercept, r2); intercept in natural log.  The slope is
    invariant under positive rescaling of err and under reordering.
    """
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(err, dtype=float)
    if eps.size < 3:
        raise DegenerateFit(f"need >= 3 pairs, got {eps.size}")
    if np.any(err <= 0.0) or np.any(eps <= 0.0):
        raise DegenerateFit("rate fit needs positive values")
    lx, ly = np.log(eps), np.log(err)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), float(r2)


@dataclass(frozen=True)
class SweepPlan:
    """Grid, window, and eps schedule for a convergence sweep.

    dt is fixed across eps: the stiff terms are implicit, so only the
    explicit transport limits the step, and that limit is eps-independent.
    """
    scenario: str = "paper"
    eps_list: tuple = tuple(2.0 ** -k for k in range(6, 15))
    t0: float = 0.1
    t_end: float = 0.5
    nx: int = 256
    ny: int = 512
    stretch_ratio: float = 40.0
    dt: float = 2e-4
    lam: float = 48.0
    fluid_on: bool = True
    cadence: float = 0.02         # output/evaluation spacing
    trace_every: int = 10
    nz: int = 640
    zmax: float = 24.0
    profile_x: float = np.pi      # cross-section abscissa for the CSV
    profile_t: float = 0.3

    def __post_init__(self):
        eps = np.asarray(self.eps_list, dtype=float)
        if eps.size < 4 or eps.max() / eps.min() < 100.0:
            raise ValueError(
                "sweep needs >= 4 eps values spanning >= 2 decades")
        if not (0.0 <= self.t0 < self.t_end):
            raise ValueError("need 0 <= t0 < t_end")
        if abs(round(self.cadence / self.dt) * self.dt - self.cadence) \
                > 1e-9 * self.cadence:
            raise ValueError("cadence must be a multiple of dt")

    def output_every(self):
        return int(round(self.cadence / self.dt))


# claim_id -> (theoretical exponent, pass bar).  Bars are 0.9 x theory
# except the 1/8 claims, which stay at the literal 1/8.
THEOREM_CLAIMS = {
    "m_sup": (0.5, 0.45),
    "c_sup": (0.5, 0.45),
    "u_sup": (1.0, 0.90),
    "dxc_sup": (0.125, 0.125),
    "dyc_comp_sup": (0.125, 0.125),
    "gradu_sup": (0.75, 0.675),
    "f_l2": (1.25, 1.1),
    "g_l2": (1.0, 0.90),
    "h_l2": (1.25, 1.1),
}


def run_outer(plan):
    """The eps=0 run: stored window snapshots plus wall traces."""
    grid = grids.StripGrid(plan.nx, plan.ny,
                           stretch_ratio=plan.stretch_ratio)
    init = scenarios.make_initial(grid, plan.scenario)
    cfg = flow.SolverConfig(dt=plan.dt, t_end=plan.t_end, eps=0.0,
                            lam=plan.lam, fluid_on=plan.fluid_on,
                            output_every=plan.output_every(),
                            trace_every=plan.trace_every)
    res = flow.run(grid, cfg, init, record_traces=True,
                   store_from=plan.t0)
    return grid, init, res


def _outer_reference(grid, res):
    """Precomputed comparison fields at each stored time."""
    ref = []
    for j in range(len(res.times)):
        c = res.snaps["c"][j]
        u1, u2 = res.snaps["u1"][j], res.snaps["u2"][j]
        ref.append({
            "m": res.snaps["m"][j], "c": c, "u1": u1, "u2": u2,
            "dxc": grids.ddx(grid, c), "dyc": grids.ddy(grid, c, 1),
            "gu": np.stack([grids.ddx(grid, u1), grids.ddy(grid, u1, 1),
                            grids.ddx(grid, u2), grids.ddy(grid, u2, 1)]),
        })
    return ref


def _eps_errors(grid, plan, init, eps, ref, times, dzc_maps, ix):
    """One full run; on-the-fly sup errors against the outer reference."""
    sup = {k: 0.0 for k in ("m", "c", "u", "dxc", "dyc_raw", "dyc_comp",
                            "gradu")}
    profile = {}
    jt = {round(t / plan.dt): j for j, t in enumerate(times)}

    def cb(st, step_idx):
        j = jt.get(step_idx)
        if j is None:
            return
        r = ref[j]
        sup["m"] = max(sup["m"], float(np.abs(st.m - r["m"]).max()))
        sup["c"] = max(sup["c"], float(np.abs(st.c - r["c"]).max()))
        u2 = st.u2
        sup["u"] = max(sup["u"],
                       float(np.abs(st.u1 - r["u1"]).max()),
                       float(np.abs(u2 - r["u2"]).max()))
        sup["dxc"] = max(sup["dxc"], float(
            np.abs(grids.ddx(grid, st.c) - r["dxc"]).max()))
        dyc = grids.ddy(grid, st.c, 1)
        sup["dyc_raw"] = max(sup["dyc_raw"],
                             float(np.abs(dyc - r["dyc"]).max()))
        sup["dyc_comp"] = max(sup["dyc_comp"], float(
            np.abs(dyc - r["dyc"] - dzc_maps[j]).max()))
        gu = np.stack([grids.ddx(grid, st.u1), grids.ddy(grid, st.u1, 1),
                       grids.ddx(grid, u2), grids.ddy(grid, u2, 1)])
        sup["gradu"] = max(sup["gradu"], float(np.abs(gu - r["gu"]).max()))
        if abs(st.t - plan.profile_t) < 0.5 * plan.dt:
            profile["c"] = st.c[ix].copy()

    cfg = flow.SolverConfig(dt=plan.dt, t_end=plan.t_end, eps=eps,
                            lam=plan.lam, fluid_on=plan.fluid_on,
                            output_every=plan.output_every(),
                            trace_every=plan.trace_every)
    flow.run(grid, cfg, init, record_traces=False, store_fields=False,
             on_output=cb)
    return sup, profile.get("c")


def _forcing_norms(grid, times, snaps, lay, traces, eps):
    """L_inf-in-time L2 norms of both forcing evaluations."""
    fr = composite.residual_forcings(grid, times, snaps, lay, traces, eps,
                                     keep_fields=False)
    by = {}
    for r in fr["rows"]:
        by.setdefault(r["quantity"], []).append(r["l2"])
    vec = lambda a, b: np.sqrt(np.asarray(by[a]) ** 2
                               + np.asarray(by[b]) ** 2)
    return {"f_l2": max(by["fs"]), "g_l2": max(by["gs"]),
            "h_l2": float(vec("hs1", "hs2").max()),
            "f_def_l2": max(by["f"]), "g_def_l2": max(by["g"]),
            "h_def_l2": float(vec("h1", "h2").max())}


def sweep(plan, progress=None):
    """Run the full plan; returns a report dict.

    Keys: "rates" (per-claim DataFrame), "errors" (per eps x claim),
    "agreement" (h two-form check at the largest eps), "profiles"
    (cross-sections for overlay plots), "outer" (grid, run, layers,
    reference) for reuse by the fluid comparison.
    """
    say = progress if progress is not None else (lambda s: None)
    say(f"outer run ({plan.nx}x{plan.ny}, dt={plan.dt}, "
        f"scenario={plan.scenario}, fluid_on={plan.fluid_on})")
    grid, init, res = run_outer(plan)
    times = res.times
    lay = layers.build_layers(res.traces, plan.lam, times, nz=plan.nz,
                              zmax=plan.zmax)
    ref = _outer_reference(grid, res)
    ix = int(np.argmin(np.abs(grid.x - plan.profile_x)))

    err_rows, prof_rows, failures = [], [], []
    jstar = int(np.argmin(np.abs(times - plan.profile_t)))
    prof_rows.append({"eps": 0.0, **{f"y{i}": v for i, v in
                                     enumerate(res.snaps["c"][jstar][ix])}})
    for eps in plan.eps_list:
        dzc_maps = [grids.layer_to_strip(lay, lay.slab(j)["dz_cB1"], grid,
                                         eps) for j in range(len(times))]
        say(f"eps = 2^{np.log2(eps):.0f}")
        try:
            sup, prof = _eps_errors(grid, plan, init, eps, ref, times,
                                    dzc_maps, ix)
        except Exception as exc:      # noqa: BLE001 - aggregated below
            failures.append((eps, repr(exc)))
            continue
        fn = _forcing_norms(grid, times, res.snaps, lay, res.traces, eps)
        err_rows.append({"eps": eps, "m_sup": sup["m"], "c_sup": sup["c"],
                         "u_sup": sup["u"], "dxc_sup": sup["dxc"],
                         "dyc_raw_sup": sup["dyc_raw"],
                         "dyc_comp_sup": sup["dyc_comp"],
                         "gradu_sup": sup["gradu"], **fn})
        if prof is not None:
            prof_rows.append({"eps": eps, **{f"y{i}": v for i, v in
                                             enumerate(prof)}})
    if failures:
        if len(err_rows) < 4:
            raise RuntimeError(f"too few surviving eps runs: {failures}")
        warnings.warn(f"dropped eps runs: {failures}", RuntimeWarning)

    errors = pd.DataFrame(err_rows).sort_values("eps", ascending=False,
                                                ignore_index=True)
    rate_rows = []
    for claim, (theory, bar) in THEOREM_CLAIMS.items():
        if not np.all(errors[claim].to_numpy() > 0.0):
            continue        # identically-zero channel (e.g. u with no fluid)
        slope, intercept, r2 = fit_rate(errors["eps"], errors[claim])
        rate_rows.append({"claim_id": claim, "slope": slope,
                          "intercept": intercept, "r2": r2,
                          "theory": theory, "bar": bar,
                          "passed": bool(slope >= bar)})
    rates = pd.DataFrame(rate_rows)

    say("h two-form agreement at the largest eps")
    eps0 = float(errors["eps"].iloc[0])
    fr = composite.residual_forcings(grid, times, res.snaps, lay,
                                     res.traces, eps0)
    gap = composite.h_two_form_gap(grid, lay, times, res.snaps, eps0)
    agreement = {
        "eps": eps0,
        "gap_sup": max(float(np.abs(fr["h1"] - fr["hs1"]).max()),
                       float(np.abs(fr["h2"] - fr["hs2"]).max())),
        **gap,
    }

    profiles = pd.DataFrame(prof_rows)
    return {"plan": plan, "grid": grid, "outer": res, "layers": lay,
            "errors": errors, "rates": rates, "agreement": agreement,
            "profiles": profiles, "y": grid.y.copy(),
            "failures": failures}


def layer_existence_test(plan, sweep_on=None, sweep_off=None,
                         ratio_tol=2.0, progress=None):
    """Fluid on/off comparison of the wall gradient of c.

    Eraw(eps) = sup over the window of |dy c^eps - dy c^0|.  With fluid on
    it must stay flat (a layer that refinement cannot remove) while the
    corrector-composite error still decays; with fluid off it must decay
    outright, and the first corrector amplitude is bounded by the
    compatibility residual tau of the no-fluid run.
    """
    if sweep_on is None:
        sweep_on = sweep(replace(plan, fluid_on=True), progress=progress)
    if sweep_off is None:
        sweep_off = sweep(replace(plan, fluid_on=False), progress=progress)
    eon, eoff = sweep_on["errors"], sweep_off["errors"]

    comp = eon["dyc_comp_sup"].to_numpy()
    eraw_on = eon["dyc_raw_sup"].to_numpy()
    # conclusiveness: the persistent level must sit well above the floor
    # the composite correction reaches, else "flat" could be mere noise
    floor_ratio = float(eraw_on.min() / comp.min())
    if floor_ratio < 10.0:
        raise InconclusiveSignal(
            f"fluid-on wall signal only {floor_ratio:.1f}x above the "
            "composite-error floor; the scenario must be re-tuned")
    ratio_on = float(eraw_on.max() / eraw_on.min())
    slope_comp_on = fit_rate(eon["eps"], comp)[0]
    slope_off = fit_rate(eoff["eps"], eoff["dyc_raw_sup"])[0]
    lay_on = sweep_on["layers"]
    plateau = max(float(np.abs(lay_on.slab(j)["dz_cB1"]).max())
                  for j in range(len(lay_on.times)))

    # tau: how far the no-fluid run drifts from the flat-wall state it
    # should keep exactly (its dy_c wall trace stays zero in continuum)
    tr_off = sweep_off["outer"].traces
    sel = tr_off.times >= plan.t0 - 1e-12
    tau = float(np.abs(tr_off.data["dy_c"][sel]).max())
    cb1 = max(float(np.abs(sweep_off["layers"].slab(j)["cB1"]).max())
              for j in range(len(sweep_off["layers"].times)))

    table = pd.DataFrame({
        "eps": eon["eps"], "eraw_on": eraw_on, "comp_on": comp,
        "eraw_off": eoff["dyc_raw_sup"].to_numpy(),
    })
    return {"table": table, "ratio_on": ratio_on,
            "slope_comp_on": slope_comp_on, "slope_off": slope_off,
            "tau": tau, "cB1_sup": cb1, "floor_ratio": floor_ratio,
            "plateau": plateau,
            "plateau_ratio": float(eraw_on.min() / plateau),
            "sweep_on": sweep_on, "sweep_off": sweep_off}


# ---------------------------------------------------------------------------
# manufactured-solution verification


def _mms_case(mode, eps, lam):
    if mode == "full":
        return mms.Manufactured(eps=eps, lam=lam)
    if mode == "diffusion":
        return mms.Manufactured(eps=eps, lam=lam, no_flow=True, no_m=True)
    if mode == "advection":
        return mms.Manufactured(eps=0.0, lam=lam, no_m=True)
    raise ValueError(f"unknown mms mode {mode!r}")


def _mms_keys(mode):
    return ("m", "c", "u1", "u2") if mode == "full" else ("c",)


def mms_verify(spatial=((64, 64), (128, 128), (256, 256), (512, 512)),
               dt_spatial=1e-4, t_end_spatial=0.01,
               temporal_grid=(64, 96), dts=(5e-3, 2.5e-3, 1.25e-3),
               dt_ref=1.25e-4, t_end_temporal=0.05,
               eps=0.5, lam=1.0, mode="full", stretch_ratio=4.0,
               progress=None):
    """Spatial and temporal refinement study; returns a report dict."""
    say = progress if progress is not None else (lambda s: None)
    man = _mms_case(mode, eps, lam)
    keys = _mms_keys(mode)
    run_eps = 0.0 if mode == "advection" else eps
    fluid = mode != "diffusion"

    rows = []
    for nx, ny in spatial:
        g = grids.StripGrid(nx, ny, stretch_ratio=stretch_ratio)
        say(f"mms spatial {nx}x{ny}")
        res = flow.run(g, flow.SolverConfig(
            dt=dt_spatial, t_end=t_end_spatial, eps=run_eps, lam=lam,
            fluid_on=fluid, output_every=0), man.initial(g),
            sources=man.sources, store_fields=False)
        err = man.errors(g, res.state)
        rows.append({"kind": "spatial", "h": 1.0 / nx, "nx": nx, "ny": ny,
                     **{k: err[k] for k in keys}})

    g = grids.StripGrid(*temporal_grid, stretch_ratio=stretch_ratio)
    init = man.initial(g)

    def final_state(dt):
        ini = {k: np.array(v) for k, v in init.items()}
        return flow.run(g, flow.SolverConfig(
            dt=dt, t_end=t_end_temporal, eps=run_eps, lam=lam,
            fluid_on=fluid, output_every=0), ini,
            sources=man.sources, store_fields=False).state

    say("mms temporal reference")
    ref = final_state(dt_ref)
    getters = {"m": lambda s: s.m, "c": lambda s: s.c,
               "u1": lambda s: s.u1, "u2": lambda s: s.u2}
    for dt in dts:
        say(f"mms temporal dt={dt}")
        st = final_state(dt)
        rows.append({"kind": "temporal", "h": dt, "nx": temporal_grid[0],
                     "ny": temporal_grid[1],
                     **{k: float(np.abs(getters[k](st)
                                        - getters[k](ref)).max())
                        for k in keys}})

    table = pd.DataFrame(rows)
    slope_rows = []
    for kind in ("spatial", "temporal"):
        part = table[table["kind"] == kind]
        for k in keys:
            slope, _, r2 = fit_rate(part["h"], part[k])
            slope_rows.append({"kind": kind, "eq": k, "slope": slope,
                               "r2": r2})
    return {"table": table, "slopes": pd.DataFrame(slope_rows),
            "mode": mode}


# ---------------------------------------------------------------------------
# report writers


def write_rates_csv(report, path):
    """Long-format rates.csv: one row per (claim, eps)."""
    rows = []
    rates = report["rates"].set_index("claim_id")
    for claim in rates.index:
        for _, er in report["errors"].iterrows():
            rows.append({"claim_id": claim, "eps": er["eps"],
                         "error": er[claim],
                         "slope": rates.loc[claim, "slope"],
                         "r2": rates.loc[claim, "r2"],
                         "theory": rates.loc[claim, "theory"],
                         "pass": rates.loc[claim, "passed"]})
    pd.DataFrame(rows).to_csv(path, index=False)


def write_profiles_csv(report, path):
    """Cross-sections c(x*, y, t*) per eps, one y sample per row."""
    prof = report["profiles"]
    y = report["y"]
    rows = []
    for _, r in prof.iterrows():
        for i, yv in enumerate(y):
            rows.append({"eps": r["eps"], "y": yv, "c": r[f"y{i}"]})
    pd.DataFrame(rows).to_csv(path, index=False)


def write_summary(report, path, compare=None):
    """Human-readable run summary."""
    lines = [f"scenario {report['plan'].scenario}  grid "
             f"{report['plan'].nx}x{report['plan'].ny}  window "
             f"[{report['plan'].t0}, {report['plan'].t_end}]"]
    for _, r in report["rates"].iterrows():
        lines.append(f"{r['claim_id']:14s} slope {r['slope']:+.3f} "
                     f"(theory {r['theory']:.3f}, bar {r['bar']:.3f}) "
                     f"R2 {r['r2']:.4f}  "
                     f"{'pass' if r['passed'] else 'FAIL'}")
    a = report["agreement"]
    lines.append(f"h two-form gap {a['gap_sup']:.3e} vs budget "
                 f"{a['bound']:.3e} (defect {a['defect_sup']:.3e}, "
                 f"stencil {a['stencil_sup']:.3e}) at eps={a['eps']:.4g}")
    edge = max(float(np.abs(report["layers"].slab(j)["cB1"][:, -1]).max())
               for j in range(len(report["layers"].times)))
    lines.append(f"corrector far-edge magnitude {edge:.3e} (domain "
                 "truncation below reported precision)")
    if report["failures"]:
        lines.append(f"dropped eps runs: {report['failures']}")
    if compare is not None:
        lines.append(
            f"fluid ON : wall-gradient signal flat within x{compare['ratio_on']:.2f}"
            f" across the sweep (floor ratio {compare['floor_ratio']:.1f})")
        lines.append(
            f"fluid ON : corrector-composite error slope "
            f"{compare['slope_comp_on']:+.3f}")
        lines.append(
            f"fluid ON : persistent level / predicted corrector amplitude "
            f"= {compare['plateau_ratio']:.3f}")
        lines.append(
            f"fluid OFF: wall-gradient signal decays, slope "
            f"{compare['slope_off']:+.3f}; tau = {compare['tau']:.3e}, "
            f"sup|cB1| = {compare['cB1_sup']:.3e}")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text
