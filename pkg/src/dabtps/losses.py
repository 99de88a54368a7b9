"""Loss accounting on top of a solved steady state.

Conduction (terminal power difference), v-i overlap, incomplete-ZVS Coss
loss, Steinmetz core loss and terminal power bookkeeping.  The batched
``evaluate_batch`` works on a :class:`BatchSolution` and is what the
optimizer calls; the scalar functions wrap it for single points.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .core import LEGS, CircuitParams, CossCurve, ModulationPoint, coss_integrals
from .nifdm import BatchSolution, Network, SteadyStateSolution, synth

PI = math.pi
ZVS_FULL = 0.01  # dV below 1% of link voltage
ZVS_HARD = 0.99


class ModelInconsistencyError(ArithmeticError):
    """Bookkeeping produced a non-physical efficiency."""


@dataclass(frozen=True)
class SwitchingInstant:
    leg: str
    device: str  # e.g. S1T
    tau_on: float
    tau_off: float
    v_on: float
    v_off: float
    i_on: float
    i_off: float


@dataclass(frozen=True)
class LossBreakdown:
    P_cond: float
    P_sw_vi: float
    P_sw_coss: float
    P_core: float
    P_total: float
    P_sw_p: float
    P_sw_s: float
    zvs: dict
    Bm: dict
    saturated: bool

    def as_row(self):
        d = asdict(self)
        zvs = d.pop("zvs")
        bm = d.pop("Bm")
        d.update({f"zvs_{k}": v for k, v in zvs.items()})
        d.update({f"Bm_{k}": v for k, v in bm.items()})
        return d


# ------------------------------------------------------------------ pieces

def branch_currents(net: Network, Vp, Vs, Ip, Is):
    """Internal branch phasors (primary-referred) of the T network.

    Returns dict with Ilp, Ils (leakage branches) and Im (magnetizing).
    """
    Va = Vp - net.Zp * Ip
    Vb = Vs - net.Zs * Is
    ylp, yls, ym = 1 / net.Zlp, 1 / net.Zls, 1 / net.Zlm
    VM = (Va * ylp + Vb * yls) / (ylp + yls + ym)
    return {"Ilp": (Va - VM) * ylp, "Ils": (Vb - VM) * yls, "Im": VM * ym, "VM": VM}


def ohmic_loss(net: Network, Ip, Is, Ilp, Ils):
    """Sum of 1/2 |I|^2 R over the resistive branches."""
    h = lambda I, Z: 0.5 * np.sum(np.abs(I) ** 2 * np.real(Z), axis=-1)
    return h(Ip, net.Zp) + h(Is, net.Zs) + h(Ilp, net.Zlp) + h(Ils, net.Zls)


def steinmetz_tc(T):
    return 1.97 - 0.02226 * T + 0.000125 * T ** 2


def steinmetz_loss(fsw, Bm, V_core, T):
    """Core loss in watts (fit in mW with V_core in cm^3)."""
    return 0.00353 * fsw ** 1.42 * np.asarray(Bm) ** 2.88 * steinmetz_tc(T) * V_core * 1e-3


def coss_event_energy(curve: CossCurve, V, dV):
    """Dissipated energy of one turn-on with residual dV at link voltage V."""
    V = np.asarray(V, float)
    dV = np.clip(np.asarray(dV, float), 0.0, V)
    e_d, _ = coss_integrals(curve, dV)
    return e_d + _recharge_energy(curve, V, dV)


def _recharge_energy(curve: CossCurve, V, dV):
    """int_{V-dV}^V C(u) (V - u) du, per table segment (Simpson is exact).

    Equals (Q(V) - Q(V-dV)) V - (E(V) - E(V-dV)) without the cancellation;
    the offset s = u - (V - dV) keeps the weight dV - s exact for small dV.
    """
    V, dV = np.broadcast_arrays(np.asarray(V, float), np.asarray(dV, float))
    if np.any(V > curve.vmax * (1 + 1e-12)):
        raise ValueError(f"voltage outside Coss table range [0, {curve.vmax}]")
    a = V - dV
    tv = curve.v
    out = np.zeros(V.shape)
    for i in range(len(tv) - 1):
        lo = np.clip(tv[i] - a, 0.0, dV)
        hi = np.clip(tv[i + 1] - a, 0.0, dV)
        mid = 0.5 * (lo + hi)
        f = lambda s: curve(a + s) * (dV - s)
        out += (hi - lo) / 6.0 * (f(lo) + 4 * f(mid) + f(hi))
    return out


def _peak(values, ks, samples):
    theta = 2 * PI * np.arange(samples) / samples
    return np.max(np.abs(synth(values, ks, theta)), axis=-1)


def _event_angles(dp, ds, phi, wTd):
    """Top-device (tau_on, tau_off) per leg, shape (B, 4) each."""
    off = np.stack([PI + dp, -dp, PI + phi + ds, phi - ds], axis=1)
    edge = np.stack([dp, PI - dp, phi + ds, phi + PI - ds], axis=1)
    return np.mod(edge + wTd, 2 * PI), np.mod(off, 2 * PI)


# ------------------------------------------------------------------ batched

def evaluate_batch(p: CircuitParams, b: BatchSolution, peak_samples=None):
    """All loss components and terminal powers for a batch, as arrays.

    Keys: P_cond, P_sw_vi, P_sw_coss, P_core, P_total, P_sw_p, P_sw_s,
    Ps_out, Pp_in, eff, Bm (B, ncores), dV (B, 4), I_on/I_off (B, 4),
    Ip_rms, Is_rms, Ilp_rms.
    """
    net, ks, n, w = b.net, b.ks, b.net.n, b.net.omega
    B = b.Vin.shape[0]
    br = branch_currents(net, b.Vp, b.Vs, b.Ip, b.Is)
    P_cond = b.Pp_ac + b.Ps_ac

    # currents at the commutation instants (physical amps)
    tau_on, tau_off = _event_angles(b.dp, b.ds, b.phi, w * p.Td)
    i_on = np.empty((B, 4))
    i_off = np.empty((B, 4))
    for j, (I, scale) in enumerate(((b.Ip, 1.0), (b.Ip, 1.0), (b.Is, n), (b.Is, n))):
        i_on[:, j] = np.abs(scale * synth(I, ks, tau_on[:, j:j + 1])[:, 0])
        i_off[:, j] = np.abs(scale * synth(I, ks, tau_off[:, j:j + 1])[:, 0])
    V_link = np.stack([b.Vin, b.Vin, b.Vout, b.Vout], axis=1)
    dV = np.clip(b.dV, 0.0, V_link)
    t_on = np.asarray(p.t_on)
    t_off = np.asarray(p.t_off)
    # factor 2: top and bottom device of each leg
    vi = 2 * p.fsw * (V_link * i_off * t_off + dV * i_on * t_on)

    coss = np.zeros((B, 4))
    for j, curve in enumerate((p.coss_primary, p.coss_primary, p.coss_secondary, p.coss_secondary)):
        if curve is not None:
            coss[:, j] = 2 * p.fsw * coss_event_energy(curve, V_link[:, j], dV[:, j])

    # peak flux from flux linkage L*i_pk / (N Ae) (= half-cycle volt-seconds / 2NAe)
    samples = peak_samples or max(256, 16 * int(ks[-1]))
    Lp = np.imag(net.Zp[:, 0]) / w
    Ls_ref = np.imag(net.Zs[:, 0]) / w  # n^2 Ls
    Lm = net.Lm[:, 0]
    ipk = {}
    Bm = np.zeros((B, len(p.cores)))
    P_core = np.zeros(B)
    for c, core in enumerate(p.cores):
        if core.winding == "Lp":
            key, lam = "ip", lambda pk: Lp * pk
            vals = b.Ip
        elif core.winding == "Ls":
            # physical: Ls * (n * is_ref) = Ls_ref * is_ref / n
            key, lam = "is", lambda pk: Ls_ref * pk / n
            vals = b.Is
        else:
            key, lam = "im", lambda pk: Lm * pk
            vals = br["Im"]
        if key not in ipk:
            ipk[key] = _peak(vals, ks, samples)
        Bm[:, c] = lam(ipk[key]) / (core.n_turns * core.Ae)
        P_core += steinmetz_loss(p.fsw, Bm[:, c], core.V_core, core.T_core)

    P_sw_p = vi[:, :2].sum(1) + coss[:, :2].sum(1)
    P_sw_s = vi[:, 2:].sum(1) + coss[:, 2:].sum(1)
    P_vi = vi.sum(1)
    P_coss = coss.sum(1)
    P_total = P_cond + P_vi + P_coss + P_core
    fwd = b.Pp_ac >= 0
    Ps_out = np.where(fwd, np.abs(b.Ps_ac) - P_core - P_sw_s, np.abs(b.Pp_ac) - P_core - P_sw_p)
    Pp_in = np.where(fwd, b.Pp_ac + P_sw_p, b.Ps_ac + P_sw_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        eff = Ps_out / Pp_in
    rms = lambda X: np.sqrt(0.5 * np.sum(np.abs(X) ** 2, axis=-1))
    return {
        "P_cond": P_cond, "P_sw_vi": P_vi, "P_sw_coss": P_coss, "P_core": P_core,
        "P_total": P_total, "P_sw_p": P_sw_p, "P_sw_s": P_sw_s,
        "Ps_out": Ps_out, "Pp_in": Pp_in, "eff": eff, "forward": fwd,
        "Bm": Bm, "dV": dV, "V_link": V_link, "I_on": i_on, "I_off": i_off,
        "tau_on": tau_on, "tau_off": tau_off, "vi_leg": vi, "coss_leg": coss,
        "Ip_rms": rms(b.Ip), "Is_rms": n * rms(b.Is), "Ilp_rms": rms(br["Ilp"]),
    }


def zvs_class(dV, V_link):
    r = dV / V_link if V_link > 0 else 0.0
    if r < ZVS_FULL:
        return "full"
    if r >= ZVS_HARD:
        return "hard"
    return "partial"


# ------------------------------------------------------------------ scalar API

def conduction_loss(sol: SteadyStateSolution) -> float:
    """Terminal power difference; equals the ohmic branch sum."""
    return float(sol.Pp_ac + sol.Ps_ac)


def switching_instants(m: ModulationPoint, Td, sol: SteadyStateSolution, p: CircuitParams = None):
    """Eight device instants (top and bottom of each leg)."""
    b = sol.batch
    w = b.net.omega
    ks = sol.Ip.ks
    n = b.net.n
    tau_on, tau_off = _event_angles(np.array([m.delta_p]), np.array([m.delta_s]),
                                    np.array([m.phi]), w * Td)
    V = (sol.op.Vin, sol.op.Vin, sol.op.Vout, sol.op.Vout)
    names = ("S1", "S2", "S3", "S4")
    out = []
    for j, leg in enumerate(LEGS):
        I, sc = (sol.Ip.values, 1.0) if j < 2 else (sol.Is.values, n)
        dv = float(np.clip(sol.dV[leg], 0.0, V[j]))
        for dev, shift in (("T", 0.0), ("B", PI)):
            ton = float(np.mod(tau_on[0, j] + shift, 2 * PI))
            toff = float(np.mod(tau_off[0, j] + shift, 2 * PI))
            ion = abs(sc * float(synth(I, ks, np.array([ton]))[0]))
            ioff = abs(sc * float(synth(I, ks, np.array([toff]))[0]))
            out.append(SwitchingInstant(leg, names[j] + dev, ton, toff, dv, float(V[j]), ion, ioff))
    return out


def vi_overlap_loss(instants, t_on, t_off, fsw) -> float:
    """v-i overlap loss; ``t_on``/``t_off`` are per-leg 4-tuples (p1, p2, s1, s2).

    Sums the top devices with a factor 2 for the bottom ones.
    """
    total = 0.0
    for s in instants:
        if not s.device.endswith("T"):
            continue
        j = LEGS.index(s.leg)
        total += 2 * fsw * (s.v_off * s.i_off * t_off[j] + s.v_on * s.i_on * t_on[j])
    return total


def coss_switching_loss(instants, coss_primary, coss_secondary, V_links, fsw):
    """Incomplete-ZVS Coss loss.  Returns ``(watts, {leg: zvs class})``.

    ``V_links`` is ``(Vin, Vout)``.
    """
    total = 0.0
    cls = {}
    for s in instants:
        if not s.device.endswith("T"):
            continue
        prim = s.leg.startswith("p")
        curve = coss_primary if prim else coss_secondary
        V = V_links[0] if prim else V_links[1]
        cls[s.leg] = zvs_class(s.v_on, V)
        if curve is not None:
            total += 2 * fsw * float(coss_event_energy(curve, V, s.v_on))
    return total, cls


def core_loss(cores, Bm, fsw, B_sat=math.inf):
    """Steinmetz loss summed over cores.  Returns ``(watts, saturated)``.

    ``Bm`` maps core name to peak flux density in tesla.
    """
    total = 0.0
    sat = False
    for core in cores:
        b = float(Bm[core.name])
        if b > B_sat:
            sat = True
            warnings.warn(f"core {core.name}: Bm={b:.3f} T exceeds {B_sat} T", stacklevel=2)
        total += float(steinmetz_loss(fsw, b, core.V_core, core.T_core))
    return total, sat


def loss_breakdown(p: CircuitParams, sol: SteadyStateSolution) -> LossBreakdown:
    r = evaluate_batch(p, sol.batch)
    bm = {c.name: float(r["Bm"][0, i]) for i, c in enumerate(p.cores)}
    sat = any(v > p.B_sat for v in bm.values())
    if sat:
        warnings.warn("peak flux density exceeds saturation limit", stacklevel=2)
    zvs = {leg: zvs_class(r["dV"][0, j], r["V_link"][0, j]) for j, leg in enumerate(LEGS)}
    g = lambda k: float(r[k][0])
    return LossBreakdown(g("P_cond"), g("P_sw_vi"), g("P_sw_coss"), g("P_core"), g("P_total"),
                         g("P_sw_p"), g("P_sw_s"), zvs, bm, sat)


def power_balance(sol: SteadyStateSolution, bd: LossBreakdown, rtol=1e-6):
    """Terminal dc powers and efficiency for forward (primary-to-secondary) flow.

    Reverse flow swaps the roles of the two bridges.
    """
    if sol.Pp_ac >= 0:
        Ps_out = abs(sol.Ps_ac) - bd.P_core - bd.P_sw_s
        Pp_in = sol.Pp_ac + bd.P_sw_p
    else:
        Ps_out = abs(sol.Pp_ac) - bd.P_core - bd.P_sw_p
        Pp_in = sol.Ps_ac + bd.P_sw_s
    if abs((Pp_in - Ps_out) - bd.P_total) > rtol * max(abs(bd.P_total), abs(Pp_in), 1e-12):
        raise ModelInconsistencyError("power balance does not close")
    eff = Ps_out / Pp_in if Pp_in != 0 else math.nan
    if not (0 < eff <= 1):
        raise ModelInconsistencyError(f"efficiency {eff} outside (0, 1]")
    return {"Ps_out": Ps_out, "Pp_in": Pp_in, "efficiency": eff}


def write_breakdown_csv(path, rows):
    """``rows``: iterable of (operating-point dict, LossBreakdown)."""
    rows = [{**op, **bd.as_row()} for op, bd in rows]
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
