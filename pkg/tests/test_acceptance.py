"""Acceptance criteria 1-9, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting.  Heavy criteria read the shipped sweep and surface artifacts
produced by ``scripts/run_sweep.py`` and ``scripts/fit_surfaces.py``.
"""
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, piecewise_inductor_power, record_acceptance
from dabtps.core import (CossCurve, ModulationPoint, OperatingPoint, coss_integrals, lumped_params)
from dabtps.ilm import mode_index, power_pu
from dabtps.losses import SwitchingInstant, coss_event_energy, coss_switching_loss

ROOT = Path(__file__).resolve().parents[1]
SWEEP = ROOT / "artifacts" / "sweep_g5.csv"
SURFACES = ROOT / "artifacts" / "surfaces"
H = math.pi / 2


def _detail(n):
    return ACCEPTANCE[n][1]


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ------------------------------------------------------------------ 1

def test_criterion_1_harmonic_model_vs_time_domain_oracle(p_nom):
    from dabtps.nifdm import solve_steady_state
    from dabtps.oracle import OracleError, time_domain_oracle

    rng = np.random.default_rng(1)
    errs, skipped = [], 0
    t0 = time.time()
    while len(errs) < 50:
        p = p_nom.with_(Lp=rng.uniform(2e-6, 8e-6), Ls=rng.uniform(1.5e-6, 4e-6))
        op = OperatingPoint(rng.uniform(150, 170), rng.uniform(90, 130))
        m = ModulationPoint(rng.uniform(0, 0.8), rng.uniform(0, 0.8), rng.uniform(0.05, 1.2))
        sol = solve_steady_state(p, op, m, k_max=21, correction_passes=2)
        # admissible: at least 5% of rated power through the link
        if abs(sol.Ps_ac) < 0.05 * p.rated_power:
            continue
        try:
            ref = time_domain_oracle(p, op, m)
        except OracleError:
            skipped += 1
            continue
        errs.append(max(_rel(sol.Pp_ac, ref["Pp_ac"]), _rel(sol.Ps_ac, ref["Ps_ac"])))
    dt = time.time() - t0
    errs = np.array(errs)
    checks = {"max error < 1%": errs.max() < 0.01, "runtime < 60 s": dt < 60}
    ok = record_acceptance(1, checks, f"50 points: max {100 * errs.max():.3f}%, median "
                           f"{100 * np.median(errs):.4f}%, {int((errs >= 0.01).sum())} >= 1%, "
                           f"{skipped} oracle non-periodic, {dt:.1f} s")
    assert ok, _detail(1)


# ------------------------------------------------------------------ 2

def test_criterion_2_ilm_closed_forms(p_nom):
    rng = np.random.default_rng(7)
    per_mode = {k: [] for k in range(1, 6)}
    while min(len(v) for v in per_mode.values()) < 200:
        dp, ds, phi = rng.uniform(0, H, 3)
        k = int(mode_index(dp, ds, phi))
        if len(per_mode[k]) < 200:
            per_mode[k].append((dp, ds, phi, rng.uniform(0.3, 2.0)))
    worst = 0.0
    for pts in per_mode.values():
        for dp, ds, phi, mg in pts:
            ref = piecewise_inductor_power(1.0, mg, dp, ds, phi, 1.0)
            got = power_pu(dp, ds, phi, mg)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
    # continuity: the jump across every interior boundary
    jump = 0.0
    eps = 1e-13
    for _ in range(1000):
        dp, ds = rng.uniform(0, H, 2)
        mg = rng.uniform(0.3, 2.0)
        s = dp + ds
        for b in (s, math.pi - s, abs(dp - ds)):
            if eps < b < H - eps:
                lo, hi = power_pu(dp, ds, b - eps, mg), power_pu(dp, ds, b + eps, mg)
                jump = max(jump, abs(hi - lo) / max(1.0, abs(hi)))
    checks = {"match 1e-9": worst <= 1e-9, "continuity 1e-9": jump <= 1e-9}
    ok = record_acceptance(2, checks, f"1000 points (200 per mode): max rel {worst:.2e}; "
                           f"max boundary jump {jump:.2e}")
    assert ok, _detail(2)


# ------------------------------------------------------------------ 3

def test_criterion_3_coss_loss(p_nom):
    worst_c = 0.0
    for C in (50e-12, 1e-9, 3.3e-9):
        curve = CossCurve.constant(C, 400.0)
        for V in (20.0, 100.0, 160.0, 390.0):
            for dV in np.linspace(0, V, 17):
                E = float(coss_event_energy(curve, V, dV))
                worst_c = max(worst_c, abs(E - C * dV ** 2) / max(C * dV ** 2, 1e-300)
                              if dV > 0 else abs(E))
    fsw = p_nom.fsw
    Vin, Vout = 160.0, 100.0
    hard = [SwitchingInstant(leg, dev, 0.0, 0.0, v, v, 0.0, 0.0)
            for leg, dev, v in (("p1", "S1T", Vin), ("p2", "S2T", Vin),
                                ("s1", "S3T", Vout), ("s2", "S4T", Vout))]
    worst_h = 0.0
    for inst in hard:
        curve = p_nom.coss_primary if inst.leg[0] == "p" else p_nom.coss_secondary
        V = Vin if inst.leg[0] == "p" else Vout
        Q = float(coss_integrals(curve, V)[1])
        event = float(coss_event_energy(curve, V, V))
        leg, _ = coss_switching_loss([inst], p_nom.coss_primary, p_nom.coss_secondary,
                                     (Vin, Vout), fsw)
        # one turn-on per device per period; two devices per leg
        worst_h = max(worst_h, _rel(event * fsw, Q * V * fsw), _rel(leg, 2 * Q * V * fsw))
    checks = {"constant C: C dV^2 to 1e-12": worst_c <= 1e-12,
              "hard limit Qoss V fsw per device exact": worst_h <= 1e-12}
    ok = record_acceptance(3, checks, f"constant-C max rel {worst_c:.1e}; hard-switching "
                           f"limit max rel {worst_h:.1e} (Qoss V fsw per turn-on device, "
                           f"2 Qoss V fsw per leg)")
    assert ok, _detail(3)


# ------------------------------------------------------------------ 4

def test_criterion_4_optimizer(p_nom, tmp_path):
    from dabtps.optimizer import (GridSpec, InfeasibleTarget, LossModel, OptSettings,
                                  optimize_tps, read_sweep_csv, sps_baseline,
                                  sweep_optimal_dataset, write_sweep_csv)
    tol = 0.005 * 2000.0
    st = OptSettings(n_starts=8, seed=0)
    n_pts = viol = worse = 0
    for Vo, P in itertools.product((90.0, 110.0, 130.0), (300.0, 800.0, 1400.0)):
        op = OperatingPoint(160.0, Vo, P)
        r = optimize_tps(p_nom, op, settings=st)
        try:
            _, c_sps = sps_baseline(p_nom, op, settings=st)
        except InfeasibleTarget:
            c_sps = math.inf
        n_pts += 1
        viol += abs(r.Ps_out - P) > tol
        worse += r.cost > c_sps
    # shipped sweep: re-evaluate every feasible row at its duties
    rows = [r for r in read_sweep_csv(SWEEP) if r["status"] == "ok"]
    g = lambda k: np.array([r[k] for r in rows])
    model = LossModel(p_nom)
    _, res = model.full(160.0, g("Vout"), g("delta_p"), g("delta_s"), g("phi"),
                        {k: g(k) for k in ("Lp", "Ls", "Rlp", "Rls")})
    sweep_viol = int(np.sum(np.abs(res["Ps_out"] - g("Ps_out")) > tol))
    grid = GridSpec(Vout=(95.0, 125.0), Ps_out=(500.0, 1200.0), Lp=(3e-6, 5e-6), Ls=(2.65e-6,),
                    Rlp=(0.0, 0.01), Rls=(0.0015,))
    paths = []
    for i in range(2):
        out = tmp_path / f"sweep{i}.csv"
        write_sweep_csv(out, sweep_optimal_dataset(p_nom, grid, seed=3, n_starts=4))
        paths.append(out.read_bytes())
    checks = {"constraint": viol == 0 and sweep_viol == 0, "<= SPS": worse == 0,
              "byte-identical": paths[0] == paths[1]}
    ok = record_acceptance(4, checks, f"{n_pts} points: {viol} constraint violations, {worse} "
                           f"worse than SPS; shipped sweep {len(rows)} rows, {sweep_viol} "
                           f"violations; repeated sweep byte-identical: {paths[0] == paths[1]}")
    assert ok, _detail(4)


# ------------------------------------------------------------------ 5

def test_criterion_5_polynomial_fit(p_nom):
    from dabtps.optimizer import read_sweep_csv
    from dabtps.polyfit import efficiency_penalty, exponents, fit_poly, fit_poly4

    rng = np.random.default_rng(11)
    exps = exponents(4, 4)
    coef = rng.normal(size=len(exps))
    lo, hi = np.array([200.0, 120.0, 5e-6, 0.02]), np.array([1600.0, 190.0, 18e-6, 0.06])
    X = lo + (hi - lo) * np.array(list(itertools.product(*[np.linspace(0, 1, 6)] * 4)))
    Z = (X - lo) / (hi - lo)
    y = sum(c * np.prod(Z ** np.array(e), axis=1) for c, e in zip(coef, exps))
    s = fit_poly(X, y, 4, "delta_p", lo, hi)
    got = dict(zip(map(tuple, s.exps), s.coeffs))
    rec = max(abs(got[tuple(e)] - c) for e, c in zip(exps, coef))
    pred = float(np.max(np.abs(s.raw(X) - y)))

    rows = read_sweep_csv(SWEEP)
    ok_rows = [r for r in rows if r["status"] == "ok"]
    stats, pen = {}, {}
    for deg in (2, 4):
        sp = fit_poly4(rows, "delta_p", p_nom.n, deg)
        ss = fit_poly4(rows, "delta_s", p_nom.n, deg)
        stats[deg] = (sp.stats["error_variance_pct"], ss.stats["error_variance_pct"])
        pen[deg] = efficiency_penalty(p_nom, rows, sp, ss)[0]
    checks = {"exact recovery 1e-8": rec <= 1e-8 and pred <= 1e-8,
              ">= 500 rows": len(ok_rows) >= 500,
              "error variance <= 5%": max(stats[4]) <= 5.0,
              "penalty deg4 < deg2": pen[4] < pen[2]}
    ok = record_acceptance(5, checks, f"recovery max coef err {rec:.1e}; sweep {len(ok_rows)} "
                           f"rows: deg-4 error variance dp {stats[4][0]:.1f}% ds "
                           f"{stats[4][1]:.1f}%; penalty deg4 {100 * pen[4]:.3f}% vs deg2 "
                           f"{100 * pen[2]:.3f}%")
    assert ok, _detail(5)


# ------------------------------------------------------------------ 6

def test_criterion_6_physics_informed_estimator(p_nom):
    from dabtps.pinn import (MlpModel, TrainConfig, build_physics_table, evaluate,
                             generate_synthetic_dataset, loss_and_grads, prepare_dataset, train)

    # gradient check on every layer, data and physics terms
    rng = np.random.default_rng(0)
    model = MlpModel.init((8, 64, 64, 2), seed=1, dropout=0.0, l2=0.01)
    X, Y = rng.uniform(size=(10, 8)), rng.uniform(size=(10, 2))
    meas = rng.uniform(0.5, 1.0, size=(10, 2))
    toy = lambda Lt, Rt: np.column_stack([1.0 / (1.0 + Lt) + Rt, 1.0 / (1.0 + Lt)])
    phys = (toy, meas, 1.0, np.ones(2), np.zeros(2))
    _, gW, gb = loss_and_grads(model, X, Y, 0.8, phys)
    worst = 0.0
    h = 1e-6
    for params, grads in ((model.W, gW), (model.b, gb)):
        for p_, g_ in zip(params, grads):
            for idx in [tuple(rng.integers(0, s) for s in p_.shape) for _ in range(5)]:
                old = p_[idx]
                p_[idx] = old + h
                up = loss_and_grads(model, X, Y, 0.8, phys)[0]
                p_[idx] = old - h
                dn = loss_and_grads(model, X, Y, 0.8, phys)[0]
                p_[idx] = old
                fd = (up - dn) / (2 * h)
                worst = max(worst, abs(g_[idx] - fd) / max(abs(fd), abs(g_[idx]), 1e-8))

    t0 = time.time()
    ds = generate_synthetic_dataset(p_nom, 5000, seed=0)
    prep = prepare_dataset(ds, seed=0)
    table, rmap = build_physics_table(p_nom, prep)
    m_pinn, _ = train(prep, TrainConfig(lam=0.8, seed=0), table, rmap)
    m_data, _ = train(prep, TrainConfig(lam=0.0, seed=0))
    a, b = evaluate(m_pinn, prep), evaluate(m_data, prep)
    dt = time.time() - t0
    checks = {"gradient check": worst <= 1e-5, "MAE Lt <= 5%": a["MAE_Lt"] <= 5.0,
              "MAE Rt <= 6%": a["MAE_Rt"] <= 6.0,
              "PINN beats data-only on Lt": a["MAE_Lt"] < b["MAE_Lt"],
              "PINN beats data-only on Rt": a["MAE_Rt"] < b["MAE_Rt"]}
    ok = record_acceptance(6, checks, f"grad max rel {worst:.1e}; test MAE lambda=0.8 Lt "
                           f"{a['MAE_Lt']:.2f}% Rt {a['MAE_Rt']:.2f}%; lambda=0 Lt "
                           f"{b['MAE_Lt']:.2f}% Rt {b['MAE_Rt']:.2f}%; {dt:.0f} s")
    assert ok, _detail(6)


# ------------------------------------------------------------------ 7

def test_criterion_7_spi_codec():
    from dabtps.loop_sim import decode_value, encode_value, from_code, to_code

    codes = np.arange(65536)
    bad = sum(1 for c in codes if to_code(from_code(int(c))) != c
              or encode_value(from_code(int(c))) != bytes([c >> 8, c & 0xFF]))
    vec = encode_value(160.45) == bytes([0x3E, 0xAD]) and decode_value(b"\x3e\xad") == 160.45
    checks = {"exhaustive round trip": bad == 0, "0x3E 0xAD <-> 160.45": vec}
    ok = record_acceptance(7, checks, f"65536 codes, {bad} mismatches; vector bit-exact: {vec}")
    assert ok, _detail(7)


# ------------------------------------------------------------------ 8

def test_criterion_8_closed_loop_scenario(p_nom):
    from dabtps.loop_sim import Scenario, run_scenario

    sc = Scenario.load(ROOT / "configs" / "scenario1.yaml")
    sc.surfaces = tuple(str(ROOT / s) for s in sc.surfaces)
    sc.estimator = "oracle"
    res = run_scenario(sc, p_nom)
    t_step = min(e["t"] for e in sc.events)
    t_apply = min(e["t"] for e in res.events if e["kind"] == "apply" and e["t"] > t_step)
    held = [r for r in res.rows if r["tag"] == "hold"]
    stale = [r for r in held if t_step < r["t"] <= t_apply][-1]
    adapted = [r for r in held if r["t"] > t_apply][-1]
    steady = [r for r in res.rows if r["tag"] != "step"]
    reg = max(abs(r["Vout"] - r["Vref"]) / r["Vref"] for r in steady)
    power_ok = all(abs(r["Ps_out"] - sc.P_load) <= 0.005 * sc.P_load for r in (stale, adapted))
    drop = 1 - adapted["I_rms"] / stale["I_rms"]
    checks = {"loss decreases": adapted["P_total"] < stale["P_total"],
              "same regulated power": power_ok,
              "inductor RMS drop >= 5%": drop >= 0.05,
              "regulation < 0.5%": reg < 0.005}
    ok = record_acceptance(8, checks, f"loss {stale['P_total']:.2f} -> {adapted['P_total']:.2f} W; "
                           f"Ip RMS {stale['I_rms']:.3f} -> {adapted['I_rms']:.3f} A "
                           f"({100 * drop:.2f}% drop); max settled regulation error "
                           f"{100 * reg:.4f}%")
    assert ok, _detail(8)


# ------------------------------------------------------------------ 9

def test_criterion_9_adaptive_gain_map(p_nom):
    import yaml

    from dabtps.optimizer import OptSettings, adaptive_gain_map

    with open(ROOT / "configs" / "map_grid.yaml") as fh:
        g = yaml.safe_load(fh)
    Vouts, Ps = [float(v) for v in g["Vout"]], [float(v) for v in g["Ps_out"]]
    st = OptSettings()
    lp = lumped_params(p_nom)
    deta, _, _ = adaptive_gain_map(p_nom, 0.7 * lp["Lt"], lp["Rt"], Vouts, Ps, settings=st)
    # optimizer tolerance in efficiency: its cost tolerance over the cell's power
    tol = st.ftol / min(Ps)
    d0, _, _ = adaptive_gain_map(p_nom, lp["Lt"], lp["Rt"], Vouts[::2], Ps[::3], settings=st)
    finite = np.isfinite(deta)
    i, j = np.unravel_index(np.nanargmax(deta), deta.shape)
    light_mid = Ps[j] <= 0.5 * p_nom.rated_power
    checks = {"all cells >= -tol": bool(np.all(deta[finite] >= -tol)) and finite.all(),
              "zero at nominal": bool(np.nanmax(np.abs(d0)) <= tol),
              "max in light-to-mid load": light_mid}
    ok = record_acceptance(9, checks, f"min {100 * np.nanmin(deta):.4f} pts, max "
                           f"{100 * deta[i, j]:.3f} pts at Vout {Vouts[i]:g} V / Ps {Ps[j]:g} W "
                           f"(<= 50% rated: {light_mid}); nominal max |d eta| "
                           f"{np.nanmax(np.abs(d0)):.1e}")
    assert ok, _detail(9)
