"""Composite approximations, remainders, and residual forcings.

The wall correctors live on the stretched half-line z = y/sqrt(eps); this
module evaluates them on the strip, adds them to the outer solution with
their sqrt(eps) weights, and measures what the combined field leaves over:
the scaled remainders against a finite-eps run and the forcing residuals
of the transport equations.

The forcings come in two independent evaluations.  The defining form
applies the discrete PDE operators to the assembled composite; it is the
literal definition but carries the outer solution's own discretization
defect plus the error of strip stencils acting across the layer, both of
which are eps-independent floors.  The structured form evaluates the
Taylor-cancelled term groupings directly on the stretched fields, where
every term carries its explicit power of eps; it is the one to use for
rate measurements.  Their difference is itself a diagnostic: it must stay
within the measured discretization defect.
"""

import numpy as np

from . import grids
from .grids import ddx, ddy, layer_to_strip
from .layers import LAYER_FIELDS, TimeDifferencing


class GridMismatch(Exception):
    """Fields from different grids were combined."""


# Fields whose strip evaluation the structured forms consume.
_YY_CACHE = {}


def _yy(grid):
    key = id(grid)
    if key not in _YY_CACHE:
        _YY_CACHE[key] = grid.y[None, :]
    return _YY_CACHE[key]


def map_slab(layer, i, grid, eps, fields=LAYER_FIELDS):
    """Evaluate corrector slab i at z = y/sqrt(eps) on the strip nodes."""
    slab = layer.slab(i)
    return {k: layer_to_strip(layer, slab[k], grid, eps) for k in fields}


def _add(base, *terms):
    """base + sum(coef*arr), skipping identically-zero contributions.

    The skip keeps the zero-corrector composite bitwise equal to the outer
    field (adding 0.0 would still rewrite -0.0 payloads).
    """
    out = base.copy()
    for coef, arr in terms:
        if arr is not None and np.any(arr):
            out += coef * arr
    return out


def assemble_at(grid, outer, mapped, eps):
    """One composite snapshot from an outer snapshot and mapped correctors.

    mapped=None means all correctors zero; dy_Ca is the full y-derivative of
    the composite c (outer stencil derivative plus the chain-rule layer
    contributions), which vanishes at the wall by construction of the
    corrector data.
    """
    s = np.sqrt(eps)
    dyc = ddy(grid, outer["c"], 1)
    if mapped is None:
        return {"Ma": outer["m"].copy(), "Ca": outer["c"].copy(),
                "Pa": outer["p"].copy(), "dy_Ca": dyc}
    return {
        "Ma": _add(outer["m"], (s, mapped["mB1"]), (eps, mapped["mB2"]),
                   (eps * s, mapped["xi"])),
        "Ca": _add(outer["c"], (s, mapped["cB1"]), (eps, mapped["cB2"])),
        "Pa": _add(outer["p"], (eps, mapped["pB2"])),
        "dy_Ca": _add(dyc, (1.0, mapped["dz_cB1"]), (s, mapped["dz_cB2"])),
    }


def assemble(grid, times, snaps, layer, eps):
    """Composite time series {Ma, Ca, Pa, dy_Ca}, each (nt, nx, ny).

    snaps is the dict-of-lists output of flow.run; layer may be None for
    the corrector-free composite (then the series reduces to the outer
    fields).  eps > 0.
    """
    if eps <= 0.0:
        raise ValueError("composite assembly requires eps > 0")
    nt = len(times)
    out = {k: np.empty((nt, grid.nx, grid.ny)) for k in
           ("Ma", "Ca", "Pa", "dy_Ca")}
    for j, t in enumerate(times):
        snap = {k: snaps[k][j] for k in ("m", "c", "p")}
        mapped = None
        if layer is not None:
            mapped = map_slab(layer, layer.index(t), grid, eps)
        one = assemble_at(grid, snap, mapped, eps)
        for k in out:
            out[k][j] = one[k]
    return out


def remainders(grid, full, outer, comp, eps):
    """Scaled differences between a finite-eps run and the approximation.

    full/outer are single-time snapshot dicts on the same grid, comp the
    matching composite snapshot.  Returns M, C (against the composite) and
    U1, U2 (velocity against the outer flow), all divided by sqrt(eps).
    """
    shape = full["m"].shape
    for d, keys in ((outer, ("u1", "u2")), (comp, ("Ma", "Ca"))):
        for k in keys:
            if d[k].shape != shape:
                raise GridMismatch(
                    f"{k} has shape {d[k].shape}, expected {shape}")
    r = 1.0 / np.sqrt(eps)
    return {"M": r * (full["m"] - comp["Ma"]),
            "C": r * (full["c"] - comp["Ca"]),
            "U1": r * (full["u1"] - outer["u1"]),
            "U2": r * (full["u2"] - outer["u2"])}


def wall_normal_derivative(grid, f):
    """One-sided wall-row y-derivative of a strip field, shape (nx,)."""
    return grids.extract_trace(grid, f, "dy")


# ---------------------------------------------------------------------------
# norms


def norms(grid, f, kind):
    """Norm of a snapshot (nx, ny) or a series (nt, nx, ny).

    kind: "sup" | "l2" (quadrature-weighted on the graded grid) |
    "linf_l2" | "linf_sup" (time sup over the stored levels of a series).
    """
    f = np.asarray(f)
    if kind == "sup":
        return float(np.abs(f).max())
    if kind == "l2":
        return grids.norm_l2(grid, f)
    if f.ndim != 3:
        raise ValueError(f"time-sup norm needs a series, got shape {f.shape}")
    if kind == "linf_l2":
        return max(grids.norm_l2(grid, fj) for fj in f)
    if kind == "linf_sup":
        return float(np.abs(f).max())
    raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# residual forcings


def _check_times(times):
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise TimeDifferencing(
            f"time differencing needs >= 3 stored levels, got {len(times)}")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
        raise TimeDifferencing("stored levels are not uniformly spaced")
    return float(dts[0])


def _stack(snaps, key, nt):
    return np.stack([snaps[key][j] for j in range(nt)])


def outer_defect(grid, times, snaps, lam):
    """Residuals of the eps=0 system on stored outer snapshots.

    Time derivatives by second-order differences on the output cadence
    (one-sided at the ends); everything else with the strip operators.
    The result is the discretization floor that the defining-form forcings
    inherit; it should sit at the solver's truncation level.
    """
    dt = _check_times(times)
    nt = len(times)
    m = _stack(snaps, "m", nt)
    c = _stack(snaps, "c", nt)
    u1 = _stack(snaps, "u1", nt)
    u2 = _stack(snaps, "u2", nt)
    p = _stack(snaps, "p", nt)
    m_t = np.gradient(m, dt, axis=0, edge_order=2)
    c_t = np.gradient(c, dt, axis=0, edge_order=2)
    u1_t = np.gradient(u1, dt, axis=0, edge_order=2)
    u2_t = np.gradient(u2, dt, axis=0, edge_order=2)
    out = {k: np.empty_like(m) for k in ("m", "c", "u1", "u2")}
    for j in range(nt):
        adv = lambda f: u1[j] * ddx(grid, f) + u2[j] * ddy(grid, f, 1)
        chem = (ddx(grid, m[j] * ddx(grid, c[j]))
                + ddy(grid, m[j] * ddy(grid, c[j], 1), 1))
        out["m"][j] = grids.laplacian(grid, m[j]) - m_t[j] - adv(m[j]) - chem
        out["c"][j] = -c_t[j] - adv(c[j]) - m[j] * c[j]
        out["u1"][j] = (grids.laplacian(grid, u1[j]) - u1_t[j] - adv(u1[j])
                        - ddx(grid, p[j]))
        out["u2"][j] = (grids.laplacian(grid, u2[j]) - u2_t[j] - adv(u2[j])
                        - ddy(grid, p[j], 1) - lam * m[j])
    return out


def _trace_rows(traces, t):
    return {tag: traces.interp(tag, t) for tag in traces.data}


def _structured_f(grid, out, mp, rows, eps):
    """The nine Taylor-cancelled groups of the m-equation residual."""
    s = np.sqrt(eps)
    yy = _yy(grid)
    col = lambda r: r[:, None]
    m0, c0 = out["m"], out["c"]
    u1, u2 = out["u1"], out["u2"]
    dy_m0 = ddy(grid, m0, 1)
    dy_c0 = ddy(grid, c0, 1)
    dyy_c0 = ddy(grid, c0, 2)
    dx_c0 = ddx(grid, c0)
    dx = lambda f: ddx(grid, f)

    tm, tdym, tdyym = col(rows["m"]), col(rows["dy_m"]), col(rows["dyy_m"])
    tdyc, tdyyc = col(rows["dy_c"]), col(rows["dyy_c"])
    tdxc = col(rows["dx_c"])
    tdyu2 = col(rows["dy_u2"])

    # Taylor remainders of the outer fields about the wall (the traces are
    # the wall rows, so each bracket is O(y^k) across the layer).
    m_tay2 = tm - m0 + yy * tdym + 0.5 * yy ** 2 * tdyym
    m_tay1 = tm - m0 + yy * tdym
    dym_tay1 = tdym - dy_m0 + yy * tdyym
    dyc_tay1 = tdyc - dy_c0 + yy * tdyyc

    k1 = m_tay2 * mp["dzz_cB1"] / s + dym_tay1 * mp["dz_cB1"]
    k2 = m_tay1 * mp["dzz_cB2"] + mp["dz_mB1"] * dyc_tay1
    k3 = ((yy * tdyu2 - u2) * mp["dz_mB1"]
          + s * dx(mp["mB1"] * (tdxc - dx_c0) + (tm - m0) * dx(mp["cB1"])))
    k4 = s * ((tdym - dy_m0) * mp["dz_cB2"] + mp["dz_mB2"] * (tdyc - dy_c0)
              + mp["mB1"] * (tdyyc - dyy_c0))
    k5 = (-s * u1 * dx(mp["mB1"]) - s * u2 * mp["dz_mB2"]
          - eps * (mp["mB2"] * dyy_c0 + mp["dz_xi"] * dy_c0))
    k6 = (-eps * dx(m0 * dx(mp["cB2"]) + mp["mB2"] * dx_c0
                    + mp["mB1"] * dx(mp["cB1"]))
          - eps * (mp["dz_xi"] * mp["dz_cB1"] + mp["xi"] * mp["dzz_cB1"]
                   + mp["dz_mB2"] * mp["dz_cB2"] + mp["mB2"] * mp["dzz_cB2"]))
    k7 = (eps * dx(dx(mp["mB2"]))
          - eps * (u1 * dx(mp["mB2"]) + u2 * mp["dz_xi"])
          - eps * mp["mB2_t"] + eps * s * dx(dx(mp["xi"]))
          - eps * s * (mp["dz_xi"] * mp["dz_cB2"]
                       + mp["xi"] * mp["dzz_cB2"]))
    k8 = (-eps * s * dx(mp["mB1"] * dx(mp["cB2"]) + mp["mB2"] * dx(mp["cB1"])
                        + mp["xi"] * dx_c0)
          - eps * s * mp["xi"] * dyy_c0 - eps * s * mp["xi_t"])
    k9 = (-eps * s * u1 * dx(mp["xi"])
          - eps ** 2 * dx(mp["mB2"] * dx(mp["cB2"]) + mp["xi"] * dx(mp["cB1"]))
          - eps ** 2 * s * dx(mp["xi"] * dx(mp["cB2"])))
    return k1 + k2 + k3 + k4 + k5 + k6 + k7 + k8 + k9


def _structured_g(grid, out, mp, rows, eps):
    """The Taylor-cancelled c-equation residual; eps*lap(c0) is kept as a
    term of its own (it dominates: the outer c never diffuses)."""
    s = np.sqrt(eps)
    yy = _yy(grid)
    col = lambda r: r[:, None]
    m0, c0 = out["m"], out["c"]
    u1, u2 = out["u1"], out["u2"]
    dx = lambda f: ddx(grid, f)

    tm, tdym = col(rows["m"]), col(rows["dy_m"])
    tc, tdyc = col(rows["c"]), col(rows["dy_c"])
    tdyu1 = col(rows["dy_u1"])
    tdyu2, tdyyu2 = col(rows["dy_u2"]), col(rows["dyy_u2"])

    # no-slip wall: the velocity traces themselves vanish
    u2_tay2 = u2 - yy * tdyu2 - 0.5 * yy ** 2 * tdyyu2
    u2_tay1 = u2 - yy * tdyu2
    u1_tay1 = u1 - yy * tdyu1

    p12 = -(u2_tay2 * mp["dz_cB1"]
            + s * (m0 - tm - yy * tdym) * mp["cB1"]
            + s * mp["mB1"] * (c0 - tc - yy * tdyc)
            + s * u1_tay1 * dx(mp["cB1"])
            + s * u2_tay1 * mp["dz_cB2"]
            + eps * u1 * dx(mp["cB2"])
            + eps * (m0 - tm) * mp["cB2"]
            + eps * mp["mB2"] * (c0 - tc))
    p3 = (eps * grids.laplacian(grid, c0)
          + eps * s * (dx(dx(mp["cB1"])) - mp["mB1"] * mp["cB2"]
                       - mp["mB2"] * mp["cB1"] - mp["xi"] * c0))
    p4 = (eps ** 2 * (dx(dx(mp["cB2"])) - mp["mB2"] * mp["cB2"]
                      - mp["xi"] * mp["cB1"])
          - eps ** 2 * s * mp["xi"] * mp["cB2"])
    return p12 + p3 + p4


def _structured_h(grid, mp, eps, lam):
    """Simplified momentum forcing: the corrector pressure gradient in x
    and the unbalanced buoyancy of the higher correctors in y."""
    s = np.sqrt(eps)
    h1 = -eps * ddx(grid, mp["pB2"])
    h2 = -lam * (eps * mp["mB2"] + eps * s * mp["xi"])
    return h1, h2


def residual_forcings(grid, times, snaps, layer, traces, eps,
                      keep_fields=True):
    """Both evaluations of the forcing residuals over stored times.

    snaps: outer-run snapshots (dict of lists, flow.run layout); layer: the
    corrector stack; traces: the wall-trace set feeding the structured
    Taylor brackets.  Returns a dict with the series f/g/h1/h2 (defining
    form) and fs/gs/hs1/hs2 (structured form), plus "times".  With
    keep_fields=False only per-time L2/sup norm rows are returned under
    "rows" (for sweep-scale use where the fields would not fit).
    """
    if eps <= 0.0:
        raise ValueError("residual forcings require eps > 0")
    dt = _check_times(times)
    nt = len(times)
    lam = layer.lam

    comp = assemble(grid, times, snaps, layer, eps)
    ma_t = np.gradient(comp["Ma"], dt, axis=0, edge_order=2)
    ca_t = np.gradient(comp["Ca"], dt, axis=0, edge_order=2)
    u1_t = np.gradient(_stack(snaps, "u1", nt), dt, axis=0, edge_order=2)
    u2_t = np.gradient(_stack(snaps, "u2", nt), dt, axis=0, edge_order=2)

    names = ("f", "g", "h1", "h2", "fs", "gs", "hs1", "hs2")
    series = {k: np.empty((nt, grid.nx, grid.ny)) for k in names} \
        if keep_fields else None
    rows = []
    for j, t in enumerate(times):
        out = {k: snaps[k][j] for k in ("m", "c", "u1", "u2", "p")}
        mp = map_slab(layer, layer.index(t), grid, eps)
        trc = _trace_rows(traces, t)
        u1, u2 = out["u1"], out["u2"]
        adv = lambda f: u1 * ddx(grid, f) + u2 * ddy(grid, f, 1)

        ma, ca, pa = comp["Ma"][j], comp["Ca"][j], comp["Pa"][j]
        chem = (ddx(grid, ma * ddx(grid, ca))
                + ddy(grid, ma * ddy(grid, ca, 1), 1))
        f_def = grids.laplacian(grid, ma) - ma_t[j] - adv(ma) - chem
        g_def = (eps * grids.laplacian(grid, ca) - ca_t[j] - adv(ca)
                 - ma * ca)
        h1_def = (grids.laplacian(grid, u1) - u1_t[j] - adv(u1)
                  - ddx(grid, pa))
        h2_def = (grids.laplacian(grid, u2) - u2_t[j] - adv(u2)
                  - ddy(grid, pa, 1) - lam * ma)

        f_str = _structured_f(grid, out, mp, trc, eps)
        g_str = _structured_g(grid, out, mp, trc, eps)
        h1_str, h2_str = _structured_h(grid, mp, eps, lam)

        vals = (f_def, g_def, h1_def, h2_def, f_str, g_str, h1_str, h2_str)
        if keep_fields:
            for k, v in zip(names, vals):
                series[k][j] = v
        for k, v in zip(names, vals):
            rows.append({"t": t, "quantity": k,
                         "l2": grids.norm_l2(grid, v),
                         "sup": float(np.abs(v).max())})
    result = {"times": np.asarray(times, dtype=float), "rows": rows}
    if keep_fields:
        result.update(series)
    return result


def h_two_form_gap(grid, layer, times, snaps, eps, defect=None):
    """Measured discretization budget for |h_defining - h_simplified|.

    The two evaluations differ by exactly two discrete artifacts: the
    outer momentum defect (the outer run does not annihilate its own
    equations), and the strip stencil acting on the mapped corrector
    pressure where the simplified form uses the exact chain-rule slope
    (dz pB2 = -lam mB1, so the exact y-derivative of eps*pB2(y/sqrt(eps))
    is -lam sqrt(eps) mB1).  Both are measured, not estimated; a
    transcription error in either form would push the observed gap past
    their sum.  Returns sup-norm components over the stored times.
    """
    if defect is None:
        defect = outer_defect(grid, times, snaps, layer.lam)
    d_sup = max(float(np.abs(defect["u1"]).max()),
                float(np.abs(defect["u2"]).max()))
    stencil = 0.0
    for t in times:
        mp = map_slab(layer, layer.index(t), grid, eps,
                      fields=("pB2", "mB1"))
        gap = (eps * ddy(grid, mp["pB2"], 1)
               + layer.lam * np.sqrt(eps) * mp["mB1"])
        stencil = max(stencil, float(np.abs(gap).max()))
    return {"defect_sup": d_sup, "stencil_sup": stencil,
            "bound": d_sup + stencil}
