import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import nodal_solve
from dabtps.core import CossCurve, ModulationPoint, OperatingPoint, coss_integrals
from dabtps.losses import (ModelInconsistencyError, coss_event_energy, coss_switching_loss,
                           conduction_loss, core_loss, evaluate_batch, loss_breakdown,
                           power_balance, steinmetz_loss, switching_instants, vi_overlap_loss,
                           zvs_class)
from dabtps.nifdm import solve_steady_state, synth

OP = OperatingPoint(160.0, 100.0)
M6 = ModulationPoint(0.285, 0.1707, 0.58)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-12, 1e-8), st.floats(1.0, 400.0), st.floats(0.0, 1.0))
def test_constant_capacitance_event_energy(C, V, frac):
    dV = frac * V
    E = float(coss_event_energy(CossCurve.constant(C, 400.0), V, dV))
    assert E == pytest.approx(C * dV ** 2, rel=1e-12, abs=1e-30)


@pytest.mark.parametrize("V", [20.0, 100.0, 160.0])
def test_hard_switching_energy_is_charge_times_voltage(p_nom, V):
    c = p_nom.coss_primary
    _, Q = coss_integrals(c, V)
    assert float(coss_event_energy(c, V, V)) == pytest.approx(float(Q) * V, rel=1e-14)


def test_event_energy_monotone_and_zero_at_zvs(p_nom):
    c = p_nom.coss_primary
    dv = np.linspace(0, 160, 321)
    E = coss_event_energy(c, np.full_like(dv, 160.0), dv)
    assert E[0] == 0.0
    assert np.all(np.diff(E) > 0)


def test_steinmetz_hand_value():
    # 0.00353 f^1.42 B^2.88 Tc V mW with Tc(25) = 1.97 - 0.5565 + 0.078125
    tc = 1.97 - 0.02226 * 25 + 0.000125 * 625
    ref = 0.00353 * 1e5 ** 1.42 * 0.1 ** 2.88 * tc * 10.0 * 1e-3
    assert float(steinmetz_loss(1e5, 0.1, 10.0, 25.0)) == pytest.approx(ref, rel=1e-14)


def test_zvs_classes():
    assert zvs_class(0.5, 100) == "full"
    assert zvs_class(50, 100) == "partial"
    assert zvs_class(99.5, 100) == "hard"


@pytest.fixture(scope="module")
def sol6(p_nom):
    return solve_steady_state(p_nom, OP, M6)


def test_conduction_equals_nodal_ohmic_sum(p_nom, sol6):
    """Ohmic dissipation from an independent nodal solve at the corrected spectra."""
    Vp, Vs = sol6.Vp.values, sol6.Vs.values
    Ip, Is, v = nodal_solve(p_nom, p_nom.k_max, Vp, Vs)
    ks = sol6.Ip.ks
    n2 = p_nom.n ** 2
    Ilp = Ip - v[:, 0] * 0  # placeholder to keep shapes explicit
    ylp = 1 / (p_nom.resistance("Rlp", ks) + 1j * ks * 2 * math.pi * p_nom.fsw * p_nom.Llp)
    Zls = n2 * (p_nom.resistance("Rls", ks) + 1j * ks * 2 * math.pi * p_nom.fsw * p_nom.Lls)
    Ilp = (v[:, 0] - v[:, 1]) * ylp
    Ils = (v[:, 2] - v[:, 1]) / Zls
    P = 0.5 * np.sum(np.abs(Ip) ** 2 * p_nom.resistance("Rp", ks)
                     + np.abs(Is) ** 2 * n2 * p_nom.resistance("Rs", ks)
                     + np.abs(Ilp) ** 2 * p_nom.resistance("Rlp", ks)
                     + np.abs(Ils) ** 2 * n2 * p_nom.resistance("Rls", ks))
    assert conduction_loss(sol6) == pytest.approx(P, rel=1e-9)


def test_power_balance_closes(p_nom, sol6):
    bd = loss_breakdown(p_nom, sol6)
    pb = power_balance(sol6, bd)
    assert pb["Pp_in"] - pb["Ps_out"] == pytest.approx(bd.P_total, rel=1e-9)
    assert 0.95 < pb["efficiency"] < 1.0
    assert bd.P_total == pytest.approx(bd.P_cond + bd.P_sw_vi + bd.P_sw_coss + bd.P_core)


def test_power_balance_rejects_inconsistent(p_nom, sol6):
    import dataclasses
    bd = loss_breakdown(p_nom, sol6)
    with pytest.raises(ModelInconsistencyError):
        power_balance(sol6, dataclasses.replace(bd, P_total=bd.P_total + 5.0))


def test_scalar_api_matches_batch(p_nom, sol6):
    ins = switching_instants(M6, p_nom.Td, sol6)
    assert len(ins) == 8
    r = evaluate_batch(p_nom, sol6.batch)
    vi = vi_overlap_loss(ins, p_nom.t_on, p_nom.t_off, p_nom.fsw)
    assert vi == pytest.approx(float(r["P_sw_vi"][0]), rel=1e-9)
    coss, cls = coss_switching_loss(ins, p_nom.coss_primary, p_nom.coss_secondary,
                                    (OP.Vin, OP.Vout), p_nom.fsw)
    assert coss == pytest.approx(float(r["P_sw_coss"][0]), rel=1e-9)
    assert set(cls) == {"p1", "p2", "s1", "s2"}
    # the bottom device sees the same current magnitude half a period later
    tops = {s.leg: s for s in ins if s.device.endswith("T")}
    bots = {s.leg: s for s in ins if s.device.endswith("B")}
    for leg in tops:
        assert tops[leg].i_on == pytest.approx(bots[leg].i_on, rel=1e-9, abs=1e-9)


def test_transformer_flux_from_volt_seconds(p_nom, sol6):
    """Bm from the integrated magnetizing voltage equals the Lm*i_pk form."""
    r = evaluate_batch(p_nom, sol6.batch)
    Vp, Vs = sol6.Vp.values, sol6.Vs.values
    _, _, v = nodal_solve(p_nom, p_nom.k_max, Vp, Vs)
    ks = sol6.Ip.ks
    w = 2 * math.pi * p_nom.fsw
    # flux linkage harmonic: V_M / (j k w)
    lam = v[:, 1] / (1j * ks * w)
    th = 2 * math.pi * np.arange(8192) / 8192
    wave = synth(lam, ks, th)
    core = [c for c in p_nom.cores if c.winding == "transformer"][0]
    ci = list(p_nom.cores).index(core)
    B_ref = np.max(np.abs(wave)) / (core.n_turns * core.Ae)
    assert float(r["Bm"][0, ci]) == pytest.approx(B_ref, rel=1e-4)


def test_core_loss_flags_saturation(p_nom):
    bm = {c.name: 0.5 for c in p_nom.cores}
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        P, sat = core_loss(p_nom.cores, bm, p_nom.fsw, p_nom.B_sat)
    assert sat and P > 0 and w
