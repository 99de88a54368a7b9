import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from dabtps.core import (ConfigError, CossCurve, ModulationPoint, OperatingPoint, config_hash,
                         coss_integrals, load_config, lumped_params, params_from_dict,
                         save_config, scale_to_lumped)


def test_nominal_lumped_values(p_nom):
    lp = lumped_params(p_nom)
    # 5.35 + 0.24 + 1.4^2 (2.65 + 0.123) uH
    assert lp["Lt"] == pytest.approx(11.02508e-6, rel=1e-12)
    assert lp["Rt"] == pytest.approx(40.74e-3, rel=1e-9)


def test_config_round_trip(tmp_path, p_nom):
    path = tmp_path / "c.yaml"
    save_config(p_nom, path)
    q = load_config(path)
    assert q == p_nom
    assert config_hash(q) == config_hash(p_nom)


def test_hash_changes_with_params(p_nom):
    assert config_hash(p_nom) != config_hash(p_nom.with_(Lp=p_nom.Lp * 1.01))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(0.2, 2.0))
def test_scale_to_lumped_hits_target(p_nom, a, b):
    lp = lumped_params(p_nom)
    q = scale_to_lumped(p_nom, a * lp["Lt"], b * lp["Rt"])
    got = lumped_params(q)
    assert got["Lt"] == pytest.approx(a * lp["Lt"], rel=1e-12)
    assert got["Rt"] == pytest.approx(b * lp["Rt"], rel=1e-12)
    assert q.Lp / q.Ls == pytest.approx(p_nom.Lp / p_nom.Ls, rel=1e-12)


def test_coss_integrals_match_quadrature(p_nom):
    c = p_nom.coss_primary
    for v in (0.0, 13.7, 80.0, 160.0):
        e, q = coss_integrals(c, v)
        q_ref = quad(c, 0, v, points=[x for x in c.v if x < v], limit=200)[0] if v else 0.0
        e_ref = quad(lambda u: u * c(u), 0, v, points=[x for x in c.v if x < v],
                     limit=200)[0] if v else 0.0
        assert q == pytest.approx(q_ref, rel=1e-9, abs=1e-20)
        assert e == pytest.approx(e_ref, rel=1e-9, abs=1e-20)


def test_coss_validation():
    with pytest.raises(ConfigError):
        CossCurve((1.0, 2.0), (1e-9, 1e-9))
    with pytest.raises(ConfigError):
        CossCurve((0.0, 2.0, 1.0), (1e-9, 1e-9, 1e-9))
    with pytest.raises(ConfigError):
        CossCurve((0.0, 2.0), (1e-9, -1e-9))
    with pytest.raises(ValueError):
        coss_integrals(CossCurve.constant(1e-9, 100), 150.0)


def test_modulation_bounds():
    with pytest.raises(ValueError):
        ModulationPoint(0.1, 0.1, 2.0)
    with pytest.raises(ValueError):
        OperatingPoint(-1.0, 100.0)


def test_bad_config_is_reported(tmp_path, p_nom):
    from dabtps.core import params_to_dict
    d = params_to_dict(p_nom)
    d_bad = yaml.safe_load(yaml.safe_dump(d))
    d_bad["inductances"]["Lp"] = -1.0
    with pytest.raises(ConfigError):
        params_from_dict(d_bad)
