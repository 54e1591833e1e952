"""Command-line entry points.

Subcommands: run, layer, composite, sweep, compare-fluid, mms,
check-compat.  Every data-producing command seals its output directory
with a manifest (config hash + file checksums); the data files themselves
carry no timestamps, so a repeated run is byte-identical.  Exit codes:
0 success, 1 configuration or runtime failure, 2 usage error.
"""

import argparse
import os
import sys
import time

import numpy as np
import pandas as pd

from . import (composite, config, experiments, flow, grids, layers,
               scenarios, snapio)

_ERRORS = (config.UnknownKey, config.TypeMismatch, config.MissingRequired,
           flow.InvariantViolation, experiments.DegenerateFit,
           experiments.InconclusiveSignal, ValueError, OSError)


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _seal(out, cfg, files, t0, force):
    config.write_manifest(out, cfg, files, time.time() - t0, force=force)


def _say(msg):
    print(msg, flush=True)


def cmd_run(args):
    cfg = config.load_config(args.config)
    t0 = time.time()
    grid = cfg.grid()
    init = scenarios.make_initial(grid, cfg.scenario)
    scenarios.validate_initial(grid, init)
    res = flow.run(grid, cfg.solver_config(), init,
                   store_from=cfg.window_start)
    out = _outdir(args)
    res.diag.to_csv(os.path.join(out, "diag.csv"), index=False)
    files = ["diag.csv"]
    for name in ("m", "c", "u1", "u2", "p"):
        fn = f"state_{name}.cnsf"
        field = getattr(res.state, name)
        snapio.write_snapshot(os.path.join(out, fn), field, grid.lx,
                              grid.ly, res.state.t, name)
        files.append(fn)
    _seal(out, cfg, files, t0, args.force)
    _say(f"run finished at t={res.state.t:g}; diagnostics and final state "
         f"in {out}")
    return 0


def cmd_layer(args):
    cfg = config.load_config(args.config)
    t0 = time.time()
    plan = cfg.plan()
    grid, _, res = experiments.run_outer(plan)
    lay = layers.build_layers(res.traces, cfg.lam, res.times, nz=cfg.nz,
                              zmax=cfg.zmax)
    rows = []
    for j, t in enumerate(lay.times):
        slab = lay.slab(j)
        rows.append({"t": t, **{k: float(np.abs(slab[k]).max())
                                for k in layers.LAYER_FIELDS}})
    out = _outdir(args)
    pd.DataFrame(rows).to_csv(os.path.join(out, "layer_norms.csv"),
                              index=False)
    files = ["layer_norms.csv"]
    jlast = len(lay.times) - 1
    for name in ("cB1", "mB1", "cB2", "mB2", "pB2", "xi"):
        fn = f"layer_{name}.cnsf"
        snapio.write_snapshot(os.path.join(out, fn), lay.slab(jlast)[name],
                              grid.lx, lay.lz, lay.times[jlast], name)
        files.append(fn)
    _seal(out, cfg, files, t0, args.force)
    _say(f"corrector stack over {len(lay.times)} times in {out}")
    return 0


def cmd_composite(args):
    cfg = config.load_config(args.config)
    if cfg.eps <= 0.0:
        raise ValueError("composite needs eps > 0 in the config")
    t0 = time.time()
    plan = cfg.plan()
    grid, _, res = experiments.run_outer(plan)
    lay = layers.build_layers(res.traces, cfg.lam, res.times, nz=cfg.nz,
                              zmax=cfg.zmax)
    fr = composite.residual_forcings(grid, res.times, res.snaps, lay,
                                     res.traces, cfg.eps,
                                     keep_fields=False)
    out = _outdir(args)
    pd.DataFrame(fr["rows"]).to_csv(os.path.join(out, "residuals.csv"),
                                    index=False)
    _seal(out, cfg, ["residuals.csv"], t0, args.force)
    _say(f"forcing residual norms at eps={cfg.eps:g} in {out}")
    return 0


def cmd_sweep(args):
    cfg = config.load_config(args.plan)
    t0 = time.time()
    rep = experiments.sweep(cfg.plan(), progress=_say)
    out = _outdir(args)
    experiments.write_rates_csv(rep, os.path.join(out, "rates.csv"))
    experiments.write_profiles_csv(rep, os.path.join(out, "profiles.csv"))
    rep["errors"].to_csv(os.path.join(out, "errors.csv"), index=False)
    experiments.write_summary(rep, os.path.join(out, "summary.txt"))
    files = ["rates.csv", "profiles.csv", "errors.csv", "summary.txt"]
    _seal(out, cfg, files, t0, args.force)
    bad = rep["rates"][~rep["rates"]["passed"]]["claim_id"].tolist()
    _say("all rate claims pass" if not bad
         else f"claims below bar: {bad}")
    return 0 if not bad else 1


def cmd_compare_fluid(args):
    cfg = config.load_config(args.plan)
    t0 = time.time()
    cmp_ = experiments.layer_existence_test(cfg.plan(), progress=_say)
    out = _outdir(args)
    cmp_["table"].to_csv(os.path.join(out, "fluid_compare.csv"),
                         index=False)
    text = experiments.write_summary(cmp_["sweep_on"],
                                     os.path.join(out, "summary.txt"),
                                     compare=cmp_)
    _seal(out, cfg, ["fluid_compare.csv", "summary.txt"], t0, args.force)
    _say(text)
    ok = (cmp_["ratio_on"] <= 2.0 and cmp_["slope_comp_on"] >= 0.125
          and cmp_["slope_off"] >= 0.125
          and cmp_["cB1_sup"] <= 10.0 * cmp_["tau"])
    return 0 if ok else 1


def cmd_mms(args):
    t0 = time.time()
    if args.quick:
        kw = dict(spatial=((32, 32), (64, 64), (128, 128)),
                  dt_spatial=1e-4, t_end_spatial=0.01,
                  temporal_grid=(32, 48), dts=(4e-3, 2e-3, 1e-3),
                  dt_ref=1e-4, t_end_temporal=0.04)
    else:
        kw = {}
    rep = experiments.mms_verify(mode=args.mode, progress=_say, **kw)
    out = _outdir(args)
    rep["table"].to_csv(os.path.join(out, "mms.csv"), index=False)
    rep["slopes"].to_csv(os.path.join(out, "mms_slopes.csv"), index=False)
    cfg = config.RunConfig(scenario=f"mms-{args.mode}")
    _seal(out, cfg, ["mms.csv", "mms_slopes.csv"], t0, args.force)
    bad = rep["slopes"][rep["slopes"]["slope"] < 1.9]
    _say(rep["slopes"].to_string(index=False))
    return 0 if bad.empty else 1


def cmd_check_compat(args):
    cfg = config.load_config(args.config)
    grid = cfg.grid()
    init = scenarios.make_initial(grid, cfg.scenario)
    scenarios.validate_initial(grid, init)
    table = flow.check_compatibility(grid, init, cfg.lam)
    _say(table.to_string(index=False))
    return 0 if bool(table["satisfied"].all()) else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="cnslab",
        description="chemotaxis-fluid strip runs, boundary-layer "
                    "correctors, and eps-convergence studies")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, doc, plan_arg=False, needs_out=True):
        q = sub.add_parser(name, help=doc)
        if plan_arg:
            q.add_argument("--plan", required=True,
                           help="sweep configuration file")
        else:
            q.add_argument("--config", required=True,
                           help="run configuration file")
        if needs_out:
            q.add_argument("--out", required=True,
                           help="output directory")
            q.add_argument("--force", action="store_true",
                           help="allow resealing an existing manifest")
        q.set_defaults(func=fn)
        return q

    add("run", cmd_run, "integrate one configuration to t_end")
    add("layer", cmd_layer, "build the corrector stack from an eps=0 run")
    add("composite", cmd_composite,
        "forcing residual norms for one eps > 0")
    add("sweep", cmd_sweep, "full eps sweep with rate fits",
        plan_arg=True)
    add("compare-fluid", cmd_compare_fluid,
        "fluid on/off wall-gradient comparison", plan_arg=True)
    q = sub.add_parser("mms", help="manufactured-solution verification")
    q.add_argument("--mode", default="full",
                   choices=("full", "diffusion", "advection"))
    q.add_argument("--quick", action="store_true",
                   help="desk-scale grids instead of the full ladder")
    q.add_argument("--out", required=True)
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_mms)
    add("check-compat", cmd_check_compat,
        "wall-regularity report for the configured initial data",
        needs_out=False)
    return p


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:       # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileExistsError as exc:
        print(f"error: {exc} (use --force to reseal)", file=sys.stderr)
        return 1
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
