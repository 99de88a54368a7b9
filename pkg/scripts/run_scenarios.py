"""Closed-loop inductance-step scenarios; prints stale versus adapted intervals."""
import argparse
from pathlib import Path

import numpy as np

from dabtps.core import nominal_params
from dabtps.loop_sim import Scenario, run_scenario


def interval_summary(res, t_step):
    """Held (settled) rows just before the step, after it, and after the next apply."""
    rows = [r for r in res.rows if r["tag"] == "hold"]
    applies = [e["t"] for e in res.events if e.get("kind") == "apply" and e["t"] > t_step]
    t_apply = applies[0] if applies else np.inf
    pick = lambda lo, hi: [r for r in rows if lo < r["t"] <= hi]
    return {"before": pick(-np.inf, t_step), "stale": pick(t_step, t_apply),
            "adapted": pick(t_apply, np.inf)}, t_apply


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenarios", nargs="*", default=["configs/scenario1.yaml", "configs/scenario2.yaml"])
    ap.add_argument("--duties", choices=("poly", "optimal"))
    ap.add_argument("--out", default="artifacts/scenarios")
    args = ap.parse_args()
    p = nominal_params()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.scenarios:
        sc = Scenario.load(path)
        if args.duties:
            sc.duties = args.duties
        res = run_scenario(sc, p)
        res.to_csv(out / f"{sc.name}_{sc.duties}.csv")
        t_step = min(e["t"] for e in sc.events)
        parts, t_apply = interval_summary(res, t_step)
        print(f"{sc.name} ({sc.duties} duties), estimate applied at t = {t_apply:.3f} s")
        for name, rs in parts.items():
            if rs:
                r = rs[-1]
                print(f"  {name:8s} P_loss {r['P_total']:.3f} W  I_rms {r['I_rms']:.3f} A  "
                      f"eff {100 * r['eff']:.3f}%  dV_p1 {r['dV_p1']:.2f} V  dV_p2 {r['dV_p2']:.2f} V  "
                      f"zvs legs {r['n_zvs']}")
        st = [r for r in res.rows if r["tag"] != "step"]
        err = max(abs(r["Vout"] - r["Vref"]) / r["Vref"] for r in st)
        print(f"  max settled regulation error {100 * err:.4f}%")


if __name__ == "__main__":
    main()
