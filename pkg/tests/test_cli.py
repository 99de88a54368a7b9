import numpy as np
import pytest
import yaml

from dabtps.cli import main
from dabtps.optimizer import SWEEP_COLUMNS, write_sweep_csv


@pytest.fixture()
def sweep_csv(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for _ in range(100):
        Ps, Vo = rng.uniform(300, 1500), rng.uniform(90, 130)
        Lp, Rlp = rng.uniform(2e-6, 6e-6), rng.uniform(0, 0.02)
        Lt = Lp + 0.24e-6 + 1.96 * (2.65e-6 + 0.123e-6)
        Rt = 0.02 + Rlp
        rows.append({"Lp": Lp, "Ls": 2.65e-6, "Rlp": Rlp, "Rls": 0.0015, "Vout": Vo, "Ps_out": Ps,
                     "delta_p": 0.3 - 1e-4 * Ps + 1e3 * Lt, "delta_s": 0.1 + 1e-3 * Vo,
                     "phi": 0.5, "P_total": 10.0, "Lt": Lt, "Rt": Rt, "efficiency": 0.98,
                     "status": "ok"})
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    return path


def test_solve_prints_breakdown(capsys):
    assert main(["solve", "--vout", "100", "--dp", "0.285", "--ds", "0.1707", "--phi", "0.58"]) == 0
    out = capsys.readouterr().out
    for key in ("Ps_out", "P_total", "dV_p1", "dV_s2", "efficiency"):
        assert key in out


def test_fit_writes_70_terms_reproducibly(tmp_path, sweep_csv):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["fit", "--sweep", str(sweep_csv), "--out", str(out), "--seed", "7"]) == 0
        d = yaml.safe_load((out / "delta_p.yaml").read_text())
        assert len(d["terms"]) == 70
        assert d["provenance"]["seed"] == 7 and len(d["provenance"]["config_hash"]) > 8
        blobs.append([(out / f).read_bytes() for f in ("delta_p.yaml", "delta_s.yaml",
                                                       "manifest.yaml")])
    assert blobs[0] == blobs[1]


def test_fit_does_not_touch_input(tmp_path, sweep_csv):
    before = sweep_csv.read_bytes()
    main(["fit", "--sweep", str(sweep_csv), "--out", str(tmp_path / "o")])
    assert sweep_csv.read_bytes() == before


def test_missing_input_is_single_line_error(tmp_path, capsys):
    rc = main(["fit", "--sweep", str(tmp_path / "nope.csv"), "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert rc != 0 and err.count("\n") == 1 and "not found" in err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code != 0


def test_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("converter: {fsw: -1}\n")
    rc = main(["solve", "--config", str(bad), "--vout", "100", "--dp", "0", "--ds", "0",
               "--phi", "0.3"])
    assert rc != 0 and capsys.readouterr().err.strip()


def test_sweep_subcommand(tmp_path):
    grid = tmp_path / "g.yaml"
    grid.write_text(yaml.safe_dump({"Vout": [100.0], "Ps_out": [600.0, 900.0], "Lp": [5.35e-6],
                                    "Ls": [2.65e-6], "Rlp": [0.0], "Rls": [0.0015]}))
    out = tmp_path / "s"
    assert main(["sweep", "--grid", str(grid), "--out", str(out), "--starts", "2"]) == 0
    header = (out / "sweep.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == SWEEP_COLUMNS
    assert yaml.safe_load((out / "manifest.yaml").read_text())["rows"] == 2
