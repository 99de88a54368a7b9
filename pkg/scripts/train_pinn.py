"""Physics-informed versus pure data-driven estimator at the same data budget."""
import argparse
import time
from dataclasses import dataclass
from pathlib import Path

import yaml

from dabtps.core import nominal_params
from dabtps.pinn import (TrainConfig, build_physics_table, evaluate, generate_synthetic_dataset,
                         prepare_dataset, train)


@dataclass
class PinnExperiment:
    n: int = 5000
    seed: int = 0
    epochs: int = 230
    lam: float = 0.8
    out: str = "artifacts/pinn"


def run(cfg: PinnExperiment):
    p = nominal_params()
    t0 = time.time()
    ds = generate_synthetic_dataset(p, cfg.n, seed=cfg.seed)
    prep = prepare_dataset(ds, seed=cfg.seed)
    table, rmap = build_physics_table(p, prep)
    report = {"n": cfg.n, "seed": cfg.seed, "epochs": cfg.epochs,
              "setup_s": round(time.time() - t0, 1)}
    models = {}
    for lam in (cfg.lam, 0.0):
        t0 = time.time()
        model, hist = train(prep, TrainConfig(lam=lam, epochs=cfg.epochs, seed=cfg.seed),
                            table if lam > 0 else None, rmap)
        report[f"lambda_{lam}"] = {**evaluate(model, prep, "test"), "best_epoch": hist.best_epoch,
                                   "train_s": round(time.time() - t0, 1)}
        models[lam] = model
    return report, models, ds


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    for k, v in PinnExperiment().__dict__.items():
        ap.add_argument(f"--{k}", type=type(v), default=v)
    cfg = PinnExperiment(**vars(ap.parse_args()))
    report, models, ds = run(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out / "dataset.csv")
    for lam, m in models.items():
        m.save(out / f"model_lambda_{lam}.yaml")
    with open(out / "report.yaml", "w") as fh:
        yaml.safe_dump(report, fh, sort_keys=False)
    print(yaml.safe_dump(report, sort_keys=False))


if __name__ == "__main__":
    main()
