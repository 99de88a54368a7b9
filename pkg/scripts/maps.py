"""Adaptive-gain and ZVS maps on the map grid for a stepped series inductance."""
import argparse
from pathlib import Path

import numpy as np
import yaml

from dabtps.core import lumped_params, nominal_params
from dabtps.optimizer import adaptive_gain_map


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", default="configs/map_grid.yaml")
    ap.add_argument("--lt-scale", type=float, default=0.7)
    ap.add_argument("--out", default="artifacts/maps")
    args = ap.parse_args()
    with open(args.grid) as fh:
        g = yaml.safe_load(fh)
    Vouts, Ps = [float(v) for v in g["Vout"]], [float(v) for v in g["Ps_out"]]
    p = nominal_params()
    lp = lumped_params(p)
    deta, ea, es = adaptive_gain_map(p, lp["Lt"] * args.lt_scale, lp["Rt"], Vouts, Ps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"gain_map_lt{args.lt_scale}.csv", "w") as fh:
        fh.write("Vout,Ps_out,delta_eta,eta_adapted,eta_static\n")
        for i, Vo in enumerate(Vouts):
            for j, P in enumerate(Ps):
                fh.write(f"{Vo!r},{P!r},{deta[i, j]!r},{ea[i, j]!r},{es[i, j]!r}\n")
    print("delta eta (percentage points), rows Vout, columns Ps_out")
    print("        " + " ".join(f"{P:7.0f}" for P in Ps))
    for i, Vo in enumerate(Vouts):
        print(f"{Vo:7.1f} " + " ".join(f"{100 * d:7.3f}" for d in deta[i]))
    i, j = np.unravel_index(np.nanargmax(deta), deta.shape)
    print(f"max {100 * deta[i, j]:.3f} points at Vout {Vouts[i]} V, Ps {Ps[j]} W")


if __name__ == "__main__":
    main()
