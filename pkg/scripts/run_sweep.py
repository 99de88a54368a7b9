"""Optimal-duty sweep over the desk grid, with neighbour continuation.

    python scripts/run_sweep.py [--out artifacts/sweep_g5.csv]
"""
import argparse
import logging
import time
from dataclasses import dataclass

import yaml

from dabtps.core import nominal_params
from dabtps.optimizer import GridSpec, OptSettings, refine_sweep, sweep_optimal_dataset, write_sweep_csv


@dataclass
class SweepConfig:
    grid: str = "configs/sweep_grid.yaml"
    out: str = "artifacts/sweep_g5.csv"
    n_starts: int = 8
    seed: int = 0
    refine_rounds: int = 3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for k, v in SweepConfig().__dict__.items():
        ap.add_argument(f"--{k.replace('_', '-')}", type=type(v), default=v)
    cfg = SweepConfig(**vars(ap.parse_args()))
    logging.basicConfig(level=logging.WARNING)
    p = nominal_params()
    with open(cfg.grid) as fh:
        grid = GridSpec.from_dict(yaml.safe_load(fh))
    st = OptSettings(n_starts=cfg.n_starts, seed=cfg.seed)
    t0 = time.time()
    rows = sweep_optimal_dataset(p, grid, seed=cfg.seed, n_starts=cfg.n_starts, settings=st)
    print(f"sweep: {len(rows)} cells in {time.time() - t0:.0f} s", flush=True)
    if cfg.refine_rounds:
        t0 = time.time()
        rows, n = refine_sweep(p, grid, rows, rounds=cfg.refine_rounds, settings=st)
        print(f"refine: {n} replacements in {time.time() - t0:.0f} s", flush=True)
    write_sweep_csv(cfg.out, rows)
    print(f"-> {cfg.out}")


if __name__ == "__main__":
    main()
