"""Fit degree-2 and degree-4 duty surfaces to a sweep and report their quality.

Writes the degree-4 surfaces (used by the loop scenarios) and a YAML report.
"""
import argparse
from dataclasses import dataclass
from pathlib import Path

import yaml

from dabtps.core import nominal_params
from dabtps.optimizer import read_sweep_csv
from dabtps.polyfit import efficiency_penalty, fit_poly4


@dataclass
class FitConfig:
    sweep: str = "artifacts/sweep_g5.csv"
    out: str = "artifacts/surfaces"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for k, v in FitConfig().__dict__.items():
        ap.add_argument(f"--{k}", default=v)
    cfg = FitConfig(**vars(ap.parse_args()))
    p = nominal_params()
    rows = read_sweep_csv(cfg.sweep)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"sweep": cfg.sweep, "rows": len(rows)}
    for deg in (2, 4):
        sp = fit_poly4(rows, "delta_p", p.n, deg)
        ss = fit_poly4(rows, "delta_s", p.n, deg)
        pen, _, bad = efficiency_penalty(p, rows, sp, ss)
        report[f"degree_{deg}"] = {
            "terms": len(sp.coeffs),
            "delta_p": sp.stats, "delta_s": ss.stats,
            "efficiency_penalty_pct": 100 * pen, "unreachable_rows": bad,
        }
        print(f"degree {deg}: error variance dp {sp.stats['error_variance_pct']:.2f}% "
              f"ds {ss.stats['error_variance_pct']:.2f}%, penalty {100 * pen:.4f}% "
              f"({bad} unreachable)")
        if deg == 4:
            sp.save(out / "delta_p.yaml")
            ss.save(out / "delta_s.yaml")
    with open(out / "fit_report.yaml", "w") as fh:
        yaml.safe_dump(report, fh, sort_keys=False)


if __name__ == "__main__":
    main()
