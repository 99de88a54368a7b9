import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import piecewise_inductor_power
from dabtps.core import ModulationPoint, OperatingPoint
from dabtps.ilm import (base_power, classify_mode, gain, ilm_estimate_inductance, ilm_power,
                        mode_index, phi_for_power, power_pu)

H = math.pi / 2
ang = st.floats(0.0, H)


def _pu_oracle(dp, ds, phi, m):
    # Vin = 1, wL = 1: the per-unit base is then exactly 1
    return piecewise_inductor_power(1.0, m, dp, ds, phi, 1.0)


@settings(max_examples=300, deadline=None)
@given(ang, ang, ang, st.floats(0.3, 2.0))
def test_power_matches_piecewise_integration(dp, ds, phi, m):
    ref = _pu_oracle(dp, ds, phi, m)
    got = power_pu(dp, ds, phi, m)
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_every_mode_is_reached():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, H, (4000, 3))
    modes = set(mode_index(pts[:, 0], pts[:, 1], pts[:, 2]).tolist())
    assert modes == {1, 2, 3, 4, 5}


@settings(max_examples=200, deadline=None)
@given(ang, ang, st.floats(0.5, 1.5))
def test_continuous_in_phi_across_mode_boundaries(dp, ds, m):
    phis = np.linspace(0, H, 4001)
    p = power_pu(dp, ds, phis, m)
    # Lipschitz bound: dP/dphi <= m for the per-unit law
    assert np.max(np.abs(np.diff(p))) <= m * (phis[1] - phis[0]) * (1 + 1e-9)


def test_sps_closed_form():
    phi = 0.4
    assert power_pu(0, 0, phi, 0.9) == pytest.approx(0.9 * phi * (1 - phi / math.pi), rel=1e-15)


def test_sps_watts_at_nominal_point(p_nom):
    from dabtps.core import lumped_params
    L = lumped_params(p_nom)["Lt"]
    op = OperatingPoint(160.0, 100.0)
    P, _ = ilm_power(op, ModulationPoint(0, 0, 0.5), L, p_nom.fsw, p_nom.n)
    w = 2 * math.pi * p_nom.fsw
    assert P == pytest.approx(160 * 140 * 0.5 * (1 - 0.5 / math.pi) / (w * L), rel=1e-12)


def test_classify_rejects_out_of_range():
    with pytest.raises(ValueError):
        classify_mode(type("M", (), {"delta_p": -0.1, "delta_s": 0.0, "phi": 0.1})())


def test_zero_phase_gives_zero_power():
    assert power_pu(0.3, 0.1, 0.0, 1.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(ang, ang, st.floats(0.05, H))
def test_inductance_inverse_round_trip(dp, ds, phi):
    op = OperatingPoint(160.0, 100.0)
    m = ModulationPoint(dp, ds, phi)
    L = 11e-6
    P, pu = ilm_power(op, m, L, 100e3, 1.4)
    if pu <= 1e-9:
        return
    assert ilm_estimate_inductance(op, m, P, 100e3, 1.4) == pytest.approx(L, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(ang, ang, st.floats(0.0, 1.0))
def test_phi_for_power_hits_reachable_target(dp, ds, frac):
    m = 0.875
    top = power_pu(dp, ds, H, m)
    target = frac * top
    phi = phi_for_power(dp, ds, target, m)
    assert power_pu(dp, ds, phi, m) == pytest.approx(target, abs=1e-12)


def test_gain_conventions():
    assert gain(160, 100, 1.4) == pytest.approx(0.875)
    assert gain(160, 100, 1.4, "literal") == pytest.approx(1.6)
    with pytest.raises(ValueError):
        gain(160, 100, 1.4, "other")
    assert base_power(160, 100e3, 1e-5) == pytest.approx(160 ** 2 / (2 * math.pi * 1.0))
