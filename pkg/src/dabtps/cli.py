"""Command-line entry point: one subcommand per pipeline stage.

Every run writes ``manifest.yaml`` next to its artifacts with the subcommand,
config path and hash, seed and input artifacts.  Nothing time-dependent is
recorded, so identical invocations produce identical bytes.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .core import (ConfigError, ModulationPoint, OperatingPoint, config_hash, default_config_path,
                   load_config, lumped_params, scale_to_lumped)

log = logging.getLogger("dabtps")
WORKERS_ENV = "DABTPS_WORKERS"


class CliError(Exception):
    pass


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise CliError(f"{WORKERS_ENV} must be an integer") from exc


def _need(path, what):
    if path is None:
        raise CliError(f"missing {what}")
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _yaml(path, what):
    with open(_need(path, what)) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise CliError(f"{what} must be a mapping: {path}")
    return d


def _outdir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, p, out: Path, inputs=None, extra=None):
    m = {"subcommand": args.cmd, "config": str(args.config or default_config_path()),
         "config_hash": config_hash(p), "seed": args.seed,
         "inputs": {k: str(v) for k, v in (inputs or {}).items()}}
    if extra:
        m.update(extra)
    with open(out / "manifest.yaml", "w") as fh:
        yaml.safe_dump(m, fh, sort_keys=False)
    return m


def _provenance(args, p):
    return {"config_hash": config_hash(p), "seed": args.seed}


def _settings(args):
    from .optimizer import OptSettings
    return OptSettings(n_starts=args.starts, seed=args.seed, k_max=args.k_max)


def _fmt(x):
    return f"{x:.6g}"


# ------------------------------------------------------------------ commands

def cmd_solve(args, p):
    from .losses import loss_breakdown, power_balance
    from .nifdm import solve_steady_state
    op = OperatingPoint(args.vin or p.Vin_nominal, args.vout, 0.0)
    m = ModulationPoint(args.dp, args.ds, args.phi)
    sol = solve_steady_state(p, op, m, args.k_max)
    bd = loss_breakdown(p, sol)
    pb = power_balance(sol, bd)
    res = {"Vin": op.Vin, "Vout": op.Vout, "delta_p": m.delta_p, "delta_s": m.delta_s,
           "phi": m.phi, "Pp_ac": sol.Pp_ac, "Ps_ac": sol.Ps_ac, **pb,
           "Ip_rms": sol.Ip_rms, "Is_rms": sol.Is_rms, **bd.as_row(),
           **{f"dV_{k}": v for k, v in sol.dV.items()}, "status": sol.status}
    for k, v in res.items():
        print(f"{k:>12s} {_fmt(v) if isinstance(v, float) else v}")
    if args.out:
        out = _outdir(args)
        with open(out / "solve.yaml", "w") as fh:
            yaml.safe_dump({**{k: (float(v) if isinstance(v, (float, np.floating)) else v)
                               for k, v in res.items()}, "provenance": _provenance(args, p)},
                           fh, sort_keys=False)
        _manifest(args, p, out)


def cmd_sweep(args, p):
    from .optimizer import GridSpec, refine_sweep, sweep_optimal_dataset, write_sweep_csv
    grid = GridSpec.from_dict(_yaml(args.grid, "grid file"))
    st = _settings(args)
    rows = sweep_optimal_dataset(p, grid, n_starts=args.starts, seed=args.seed,
                                 workers=_workers(), settings=st)
    n_ref = 0
    if args.refine:
        rows, n_ref = refine_sweep(p, grid, rows, rounds=args.refine, settings=st)
    out = _outdir(args)
    write_sweep_csv(out / "sweep.csv", rows)
    ok = sum(r["status"] == "ok" for r in rows)
    print(f"{len(rows)} cells, {ok} feasible, {n_ref} improved by refinement -> {out / 'sweep.csv'}")
    _manifest(args, p, out, {"grid": args.grid}, {"rows": len(rows), "refine_rounds": args.refine})


def cmd_fit(args, p):
    from .optimizer import read_sweep_csv
    from .polyfit import fit_poly4, fit_quality
    rows = read_sweep_csv(_need(args.sweep, "sweep CSV"))
    out = _outdir(args)
    surf = {}
    for tgt in ("delta_p", "delta_s"):
        s = fit_poly4(rows, tgt, p.n, args.degree)
        d = s.to_dict()
        d["stats"] = s.stats
        d["provenance"] = _provenance(args, p)
        with open(out / f"{tgt}.yaml", "w") as fh:
            yaml.safe_dump(d, fh, sort_keys=False)
        surf[tgt] = s
        print(f"{tgt}: {len(s.coeffs)} terms, error variance {s.stats['error_variance_pct']:.3g}%")
    if args.penalty:
        q = fit_quality(surf["delta_p"], rows, p, surf["delta_s"], settings=_settings(args))
        print(f"efficiency penalty {100 * q['efficiency_penalty']:.4g}% "
              f"({q['n_unreachable']} unreachable rows)")
    _manifest(args, p, out, {"sweep": args.sweep}, {"degree": args.degree})


def cmd_gen_data(args, p):
    from .pinn import generate_synthetic_dataset
    ds = generate_synthetic_dataset(p, args.n, seed=args.seed, optimal_fraction=args.optimal_fraction)
    out = _outdir(args)
    ds.to_csv(out / "dataset.csv")
    print(f"{len(ds)} samples -> {out / 'dataset.csv'}")
    _manifest(args, p, out, extra={"n": args.n, "optimal_fraction": args.optimal_fraction})


def cmd_train(args, p):
    from .pinn import Dataset, TrainConfig, build_physics_table, evaluate, prepare_dataset, train
    ds = Dataset.from_csv(_need(args.data, "dataset CSV"))
    prep = prepare_dataset(ds, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lam=args.lam, seed=args.seed)
    table = rmap = None
    if args.lam > 0:
        table, rmap = build_physics_table(p, prep)
    model, hist = train(prep, cfg, table, rmap)
    out = _outdir(args)
    d = model.to_dict()
    d["provenance"] = {**_provenance(args, p), "lambda": args.lam, "epochs": args.epochs}
    with open(out / "model.yaml", "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)
    mae = evaluate(model, prep, "test")
    print(f"best epoch {hist.best_epoch}; test MAE Lt {mae['MAE_Lt']:.3g}% Rt {mae['MAE_Rt']:.3g}%")
    _manifest(args, p, out, {"data": args.data}, {"lambda": args.lam, "epochs": args.epochs,
                                                 **{k: float(v) for k, v in mae.items()}})


def cmd_estimate(args, p):
    from .pinn import INPUTS, Dataset, MlpModel
    model = MlpModel.load(_need(args.model, "model file"))
    ds = Dataset.from_csv(_need(args.data, "dataset CSV"))
    Y = model.predict_physical(ds.X)
    out = _outdir(args)
    with open(out / "estimates.csv", "w") as fh:
        fh.write(",".join(INPUTS + ("Lt_est", "Rt_est")) + "\n")
        for x, y in zip(ds.X, Y):
            fh.write(",".join(repr(float(v)) for v in (*x, *y)) + "\n")
    print(f"median Lt {np.median(Y[:, 0]):.4g} H, Rt {np.median(Y[:, 1]):.4g} Ohm "
          f"over {len(ds)} rows -> {out / 'estimates.csv'}")
    _manifest(args, p, out, {"model": args.model, "data": args.data})


def cmd_simulate(args, p):
    from .loop_sim import Scenario, run_scenario
    sc = Scenario.from_dict(_yaml(args.scenario, "scenario file"))
    if args.estimator:
        sc.estimator = args.estimator
    if sc.estimator == "model":
        sc.model_path = args.model or sc.model_path
        _need(sc.model_path, "model file")
    if sc.duties == "poly":
        if args.surfaces:
            sc.surfaces = tuple(args.surfaces)
        if not sc.surfaces:
            raise CliError("poly duties need --surfaces DP DS or surfaces in the scenario")
        for s in sc.surfaces:
            _need(s, "surface file")
    res = run_scenario(sc, p)
    out = _outdir(args)
    res.to_csv(out / "timeseries.csv")
    with open(out / "events.yaml", "w") as fh:
        yaml.safe_dump(res.events, fh, sort_keys=False)
    with open(out / "frames.txt", "w") as fh:
        for t, direction, hx in res.frames:
            fh.write(f"{t!r} {direction} {hx}\n")
    print(f"{len(res.rows)} samples, {len(res.events)} events, {len(res.frames)} frames -> {out}")
    _manifest(args, p, out, {"scenario": args.scenario}, {"estimator": sc.estimator})


def cmd_map(args, p):
    from .optimizer import adaptive_gain_map, optimize_grid, zvs_map
    g = _yaml(args.grid, "map grid file")
    Vouts = [float(v) for v in g["Vout"]]
    Ps = [float(v) for v in g["Ps_out"]]
    st = _settings(args)
    out = _outdir(args)
    path = out / f"{args.kind}_map.csv"
    cols = ["Vout", "Ps_out"]
    if args.kind == "zvs":
        res = optimize_grid(p, Vouts, Ps, settings=st)
        n, dV = zvs_map(p, Vouts, Ps, res, settings=st)
        cols += ["n_zvs", "dV_p1", "dV_p2", "dV_s1", "dV_s2"]
        data = [[n[i, j], *dV[i, j]] for i in range(len(Vouts)) for j in range(len(Ps))]
    elif args.kind == "gain":
        lp = lumped_params(p)
        deta, ea, es = adaptive_gain_map(p, lp["Lt"] * args.lt_scale, lp["Rt"] * args.rt_scale,
                                         Vouts, Ps, settings=st)
        cols += ["delta_eta", "eta_adapted", "eta_static"]
        data = [[deta[i, j], ea[i, j], es[i, j]] for i in range(len(Vouts)) for j in range(len(Ps))]
    else:
        res = optimize_grid(p, Vouts, Ps, settings=st)
        cols += ["delta_p", "delta_s", "phi", "P_total", "efficiency", "status"]
        data = [[r.m.delta_p, r.m.delta_s, r.m.phi, r.P_total, r.efficiency, r.status]
                for r in res]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        k = 0
        for Vo in Vouts:
            for P in Ps:
                vals = [Vo, P, *data[k]]
                fh.write(",".join(v if isinstance(v, str) else repr(float(v)) for v in vals) + "\n")
                k += 1
    print(f"{args.kind} map {len(Vouts)}x{len(Ps)} -> {path}")
    _manifest(args, p, out, {"grid": args.grid}, {"kind": args.kind})


def cmd_oracle(args, p):
    from .nifdm import solve_steady_state
    from .oracle import time_domain_oracle
    op = OperatingPoint(args.vin or p.Vin_nominal, args.vout, 0.0)
    m = ModulationPoint(args.dp, args.ds, args.phi)
    sol = solve_steady_state(p, op, m, args.k_max)
    ref = time_domain_oracle(p, op, m)
    for k in ("Pp_ac", "Ps_ac"):
        a, b = getattr(sol, k), ref[k]
        print(f"{k}: harmonic {a:.6g} W, time-domain {b:.6g} W, "
              f"rel. error {abs(a - b) / max(abs(b), 1e-12):.3e}")
    for leg in sol.dV:
        print(f"dV_{leg}: harmonic {sol.dV[leg]:.4g} V, time-domain {ref['dV'][leg]:.4g} V")


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "fit": cmd_fit, "gen-data": cmd_gen_data,
            "train": cmd_train, "estimate": cmd_estimate, "simulate": cmd_simulate,
            "map": cmd_map, "oracle": cmd_oracle}


def build_parser():
    ap = argparse.ArgumentParser(prog="dabtps", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="circuit config YAML (default: packaged nominal)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--k-max", type=int, default=None, help="highest harmonic order")
    common.add_argument("--starts", type=int, default=8, help="optimizer starts besides SPS")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def point(sp):
        sp.add_argument("--vin", type=float)
        sp.add_argument("--vout", type=float, required=True, help="physical secondary volts")
        sp.add_argument("--dp", type=float, required=True)
        sp.add_argument("--ds", type=float, required=True)
        sp.add_argument("--phi", type=float, required=True)

    point(sub.add_parser("solve", parents=[common], help="single harmonic steady state"))
    point(sub.add_parser("oracle", parents=[common], help="compare with time-domain simulation"))
    s = sub.add_parser("sweep", parents=[common], help="optimal-duty dataset over a grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--refine", type=int, default=0, help="neighbour continuation rounds")
    s = sub.add_parser("fit", parents=[common], help="fit polynomial duty surfaces")
    s.add_argument("--sweep", required=True)
    s.add_argument("--degree", type=int, default=4)
    s.add_argument("--penalty", action="store_true", help="also compute the efficiency penalty")
    s = sub.add_parser("gen-data", parents=[common], help="synthetic estimator dataset")
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--optimal-fraction", type=float, default=0.0)
    s = sub.add_parser("train", parents=[common], help="train the parameter estimator")
    s.add_argument("--data", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.8)
    s.add_argument("--epochs", type=int, default=230)
    s = sub.add_parser("estimate", parents=[common], help="run a trained estimator")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s = sub.add_parser("simulate", parents=[common], help="closed-loop scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--estimator", choices=("model", "oracle"))
    s.add_argument("--model")
    s.add_argument("--surfaces", nargs=2, metavar=("DP", "DS"))
    s = sub.add_parser("map", parents=[common], help="ZVS, adaptive-gain or efficiency grid")
    s.add_argument("kind", choices=("zvs", "gain", "efficiency"))
    s.add_argument("--grid", required=True, help="YAML with Vout and Ps_out lists")
    s.add_argument("--lt-scale", type=float, default=0.7)
    s.add_argument("--rt-scale", type=float, default=1.0)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        p = load_config(args.config) if args.config else load_config(default_config_path())
        COMMANDS[args.cmd](args, p)
    except (CliError, ConfigError, FileNotFoundError, ValueError, ArithmeticError,
            RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dabtps {args.cmd}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
