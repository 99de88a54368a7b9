"""Frequency-domain DAB model with parasitic network and deadtime correction.

Phasors are sine-referenced: a spectrum {V_k} stands for
v(theta) = sum_k Im(V_k exp(j k theta)), theta = omega_s t.  All secondary
quantities are referred to the primary; Is flows out of the secondary bridge
into the network, so Ps_ac < 0 for forward power flow.

The numerical work happens in :func:`solve_batch`, which is vectorized over
a batch of operating points (and optionally of circuit variants) so the
optimizer and the PINN loss can evaluate many points per call.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CircuitParams, ModulationPoint, OperatingPoint, charge_equivalent_capacitance

log = logging.getLogger(__name__)

PI = math.pi
FREE, WAIT, CLAMP_O, CLAMP_T, ON, ABSENT = range(6)


class SingularNetworkError(ArithmeticError):
    pass


def odd_harmonics(k_max):
    if k_max < 1 or k_max % 2 == 0:
        raise ValueError("k_max must be odd and >= 1")
    return np.arange(1, k_max + 1, 2)


@dataclass(frozen=True)
class HarmonicSpectrum:
    ks: np.ndarray
    values: np.ndarray  # complex, shape (K,)

    def __getitem__(self, k):
        idx = np.nonzero(self.ks == k)[0]
        if idx.size == 0:
            raise KeyError(k)
        return complex(self.values[idx[0]])

    @property
    def magnitude(self):
        return np.abs(self.values)

    @property
    def angle(self):
        return np.angle(self.values)


# ------------------------------------------------------------------ spectra

def bridge_spectrum(V, delta, shift, ks):
    """Quasi-square wave of amplitude V, zero for |theta - shift| < delta."""
    V = np.asarray(V, float)[..., None]
    delta = np.asarray(delta, float)[..., None]
    shift = np.asarray(shift, float)[..., None]
    return 4 * V / (ks * PI) * np.cos(ks * delta) * np.exp(-1j * ks * shift)


def ideal_bridge_harmonics(op: OperatingPoint, m: ModulationPoint, k_max, n=1.0):
    """Ideal bridge spectra; Vs is referred to the primary (times n)."""
    ks = odd_harmonics(k_max)
    Vp = bridge_spectrum(op.Vin, m.delta_p, 0.0, ks)
    Vs = bridge_spectrum(n * op.Vout, m.delta_s, m.phi, ks)
    return HarmonicSpectrum(ks, Vp), HarmonicSpectrum(ks, Vs)


def bridge_level(theta, delta, shift):
    """Sign (+1, 0, -1) of the ideal quasi-square wave at angle theta."""
    x = np.mod(np.asarray(theta) - shift, 2 * PI)
    pos = (x > delta) & (x < PI - delta)
    neg = (x > PI + delta) & (x < 2 * PI - delta)
    return pos.astype(float) - neg.astype(float)


# ------------------------------------------------------------------ network

@dataclass
class Network:
    """Per-harmonic impedances of the parasitic network (batched).

    Arrays broadcast as (B, K) or (1, K); scalars per element are (B, 1).
    """

    ks: np.ndarray
    omega: float
    n: float
    Zp: np.ndarray
    Zs: np.ndarray
    Zlp: np.ndarray
    Zls: np.ndarray
    Zlm: np.ndarray
    Z1: np.ndarray  # Z1''
    Z2: np.ndarray
    Z3: np.ndarray
    Lp_tot: np.ndarray  # (B,1) referred totals used for transitions
    Ls_tot: np.ndarray
    Lm: np.ndarray


@dataclass(frozen=True)
class TNetwork:
    ks: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    Z3: np.ndarray


def _par_c(Z, C, w):
    # Z in parallel with capacitor C (C = 0 leaves Z unchanged)
    return Z / (1 + 1j * w * C * Z)


def build_network(p: CircuitParams, k_max, Lp=None, Ls=None, Llp=None, Lls=None, r_scale=None,
                  R=None):
    """Batched network; optional per-element overrides of the series elements.

    ``Ls``/``Lls`` overrides are physical (unreferred).  ``r_scale`` multiplies
    every series resistance table.  ``R`` maps any of Rp/Rs/Rlp/Rls to
    per-element values that replace the table (flat over harmonics).
    """
    ks = odd_harmonics(k_max)
    w = 2 * PI * p.fsw
    n2 = p.n ** 2

    def col(x, default):
        return np.asarray(default if x is None else x, float).reshape(-1, 1)

    Lp, Ls, Llp, Lls = col(Lp, p.Lp), col(Ls, p.Ls), col(Llp, p.Llp), col(Lls, p.Lls)
    rs = col(r_scale, 1.0)
    kw = ks * w
    R = R or {}
    res = {k: (col(R[k], 0.0) * np.ones_like(ks, float) if k in R else p.resistance(k, ks))
           for k in ("Rp", "Rs", "Rlp", "Rls")}
    Zp = rs * res["Rp"] + 1j * kw * Lp
    Zs = n2 * (rs * res["Rs"] + 1j * kw * Ls)
    Zlp = rs * res["Rlp"] + 1j * kw * Llp
    Zls = n2 * (rs * res["Rls"] + 1j * kw * Lls)
    Zlm = 1j * kw * p.Lm * np.ones_like(Lp)
    if p.Cip == 0 and p.Cis == 0 and p.Cps == 0:
        # plain T: no reduction needed (also valid for zero leakage)
        Z1pp, Z2pp, Z3pp = Zp + Zlp, Zs + Zls, Zlm + 0 * Zp
        if not all(np.all(np.isfinite(z)) and np.all(z != 0) for z in (Z1pp, Z2pp, Z3pp)):
            raise SingularNetworkError("zero series impedance in the T network")
        return Network(ks, w, p.n, Zp, Zs, Zlp, Zls, Zlm, Z1pp, Z2pp, Z3pp,
                       Lp + Llp, n2 * (Ls + Lls), np.full_like(Lp, p.Lm))
    with np.errstate(divide="ignore", invalid="ignore"):
        # star -> delta
        Z1 = Zlp + Zlm + Zlp * Zlm / Zls
        Z2 = Zls + Zlm + Zls * Zlm / Zlp
        Z3 = Zlp + Zls + Zlp * Zls / Zlm
        # shunt capacitances
        Z1 = _par_c(Z1, p.Cip, kw)
        Z2 = _par_c(Z2, p.Cis, kw)
        Z3 = _par_c(Z3, p.Cps, kw)
        # delta -> star, series elements added
        S = Z1 + Z2 + Z3
        Z1pp = Zp + Z1 * Z3 / S
        Z2pp = Zs + Z2 * Z3 / S
        Z3pp = Z1 * Z2 / S
    for z in (Z1pp, Z2pp, Z3pp):
        if not np.all(np.isfinite(z)) or np.any(z == 0):
            raise SingularNetworkError("network reduction hit a zero denominator")
    return Network(ks, w, p.n, Zp, Zs, Zlp, Zls, Zlm, Z1pp, Z2pp, Z3pp,
                   Lp + Llp, n2 * (Ls + Lls), np.full_like(Lp, p.Lm))


def network_impedances(p: CircuitParams, k_max) -> TNetwork:
    net = build_network(p, k_max)
    return TNetwork(net.ks, net.Z1[0], net.Z2[0], net.Z3[0])


def currents(Vp, Vs, Z1, Z2, Z3):
    """Bridge currents of the reduced T network (both sources drive inward)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = Z1 + Z2 + Z1 * Z2 / Z3
        Ip = Vp / (Z1 + Z2 * Z3 / (Z2 + Z3)) - Vs / cross
        Is = Vs / (Z2 + Z1 * Z3 / (Z1 + Z3)) - Vp / cross
    if not (np.all(np.isfinite(Ip)) and np.all(np.isfinite(Is))):
        raise SingularNetworkError("singular denominator in branch currents")
    return Ip, Is


def harmonic_currents(Vp: HarmonicSpectrum, Vs: HarmonicSpectrum, net: TNetwork):
    if not (np.array_equal(Vp.ks, net.ks) and np.array_equal(Vs.ks, net.ks)):
        raise ValueError("spectra and network must share harmonic support")
    Ip, Is = currents(Vp.values, Vs.values, net.Z1, net.Z2, net.Z3)
    return HarmonicSpectrum(net.ks, Ip), HarmonicSpectrum(net.ks, Is)


def synth(values, ks, theta):
    """Evaluate sum_k Im(X_k e^{j k theta}); values (..., K), theta (..., M)."""
    theta = np.asarray(theta, float)
    ph = np.exp(1j * theta[..., :, None] * ks)
    return np.imag(np.sum(values[..., None, :] * ph, axis=-1))


def rms(values):
    return np.sqrt(0.5 * np.sum(np.abs(values) ** 2, axis=-1))


def reconstruct_waveform(spec: HarmonicSpectrum, samples_per_period):
    """Sampled waveform over one period plus its RMS."""
    if samples_per_period < 4 * int(spec.ks.max()):
        raise ValueError("need at least 4*k_max samples per period")
    theta = 2 * PI * np.arange(samples_per_period) / samples_per_period
    return theta, synth(spec.values, spec.ks, theta), float(rms(spec.values))


def ac_powers(Vp, Vs, Ip, Is, phi=None):
    """Active powers delivered by each bridge (phi is carried by the phasors)."""
    f = lambda V, I: float(0.5 * np.sum(np.real(V.values * np.conj(I.values))))
    return f(Vp, Ip), f(Vs, Is)


# ------------------------------------------------------------------ deadtime

def deadtime_transition(params: CircuitParams, V_in_leg, V_TH, ip0, t=None, C=None,
                        form="derived", wrong_direction="hold"):
    """Resonant primary transition from -V to +V with both legs floating.

    ``x`` is the drain-source voltage of the devices turning off (0 -> V) and
    v_p = 2x - V.  ``form='derived'`` uses the solution of the circuit ODEs
    (equilibrium (V + k V_TH)/2, sine term ip0/(2 w0 C)); ``form='printed'``
    uses equilibrium V - k V_TH and sine term ip0/(w0 C).  For ip0 >= 0 the
    devices' body diodes hold the node (``hold``, v_p stays at -V until the
    gates turn on) or, literally, the edge is taken as instantaneous
    (``immediate``).  Returns (t, x, v_p).
    """
    Lp_tot = params.Lp + params.Llp
    Ls_tot = params.n ** 2 * (params.Ls + params.Lls)
    Lm = params.Lm
    Leq = Lp_tot + Lm * Ls_tot / (Lm + Ls_tot)
    k = Lm / (Lm + Ls_tot)
    if C is None:
        C = float(charge_equivalent_capacitance(params.coss_primary, V_in_leg))
    w0 = 1 / math.sqrt(Leq * C)
    if t is None:
        if params.Td <= 0:
            raise ValueError("deadtime transition needs Td > 0")
        t = np.linspace(0.0, params.Td, 201)
    t = np.asarray(t, float)
    if form == "derived":
        Veq, A = 0.5 * (V_in_leg + k * V_TH), ip0 / (2 * w0 * C)
    elif form == "printed":
        Veq, A = V_in_leg - k * V_TH, ip0 / (w0 * C)
    else:
        raise ValueError(form)
    x = Veq * (1 - np.cos(w0 * t)) - A * np.sin(w0 * t)
    if ip0 < 0:
        vp = np.clip(2 * x - V_in_leg, -V_in_leg, V_in_leg)
        # once the rail is reached the body diode holds it
        hit = np.nonzero(vp >= V_in_leg)[0]
        if hit.size:
            vp[hit[0]:] = V_in_leg
    elif wrong_direction == "immediate":
        vp = np.full_like(t, V_in_leg)
    else:
        vp = np.full_like(t, -V_in_leg)
    return t, x, vp


def _E(beta, T):
    """int_0^T exp(j beta s) ds, stable for small beta*T."""
    x = beta * T
    return T * (np.sinc(x / PI) + 1j * np.sin(x / 2) * np.sinc(x / (2 * PI)))


def _first_crossing(R, psi, c, w0):
    """Smallest tau > 0 with R cos(w0 tau - psi) = c (inf if never)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = c / R
        reach = np.abs(ratio) <= 1
        a = np.arccos(np.clip(ratio, -1, 1))
        two_pi = 2 * PI
        t1 = np.mod(psi - a, two_pi)
        t2 = np.mod(psi + a, two_pi)
        tol = 1e-9
        t1 = np.where(t1 < tol, t1 + two_pi, t1)
        t2 = np.where(t2 < tol, t2 + two_pi, t2)
        tau = np.minimum(t1, t2) / w0
    return np.where(reach & (R > 0), tau, np.inf)


def commutation_cluster(V, v_a, i0, vth, Leq, Cleg, Td, tB, omega, theta_c, ks):
    """Leg voltage slewing for one commutation group of a bridge.

    Leg A starts floating at t = 0, leg B at ``tB`` (inf: single leg); each is
    gated on ``Td`` after it starts.  The bridge voltage starts at ``v_a`` and
    each leg moves it up by ``V`` when its transition completes.  Dynamics:
    Cb dv/dt = -i, Leq di/dt = v - vth, with Cb = Cleg / (number of floating
    legs).  Legs clamp at either rail (body diode); a leg held at its start
    rail is released if the current reverses while nothing else moves.

    Returns residual voltages (dV_A, dV_B) at turn-on and the spectrum of
    (actual - ideal) for this group and its half-wave mirror.
    """
    B = V.shape[0]
    single = ~np.isfinite(tB)
    t = np.zeros(B)
    v = v_a.astype(float).copy()
    i = i0.astype(float).copy()
    p = np.zeros((B, 2))
    st = np.empty((B, 2), int)
    fwd = (i < 0) | ((i == 0) & (vth > v))
    st[:, 0] = np.where(fwd, FREE, CLAMP_O)
    st[:, 1] = np.where(single, ABSENT, WAIT)
    dV = np.zeros((B, 2))
    corr = np.zeros((B, ks.size), complex)
    t_onA = np.full(B, Td)
    t_onB = np.where(single, np.inf, tB + Td)
    t_end = np.where(single, t_onA, t_onB)
    eps = 1e-12 * max(Td, 1e-12)
    Omega = ks * omega
    pref = 2 * 1j * omega / PI

    for _ in range(24):
        active = t < t_end - eps
        if not active.any():
            break
        nf = np.sum(st == FREE, axis=1)
        moving = nf > 0
        nf_safe = np.maximum(nf, 1)
        Cb = Cleg / nf_safe
        w0 = 1 / np.sqrt(Leq * Cb)
        u0 = v - vth
        b = -i / (w0 * Cb)
        R = np.hypot(u0, b)
        psi = np.arctan2(b, u0)

        # next scheduled event
        sched = np.full(B, np.inf)
        for ts, cond in ((tB, st[:, 1] == WAIT), (t_onA, st[:, 0] != ON),
                         (t_onB, (st[:, 1] != ON) & (st[:, 1] != ABSENT))):
            sched = np.where(cond, np.minimum(sched, ts - t), sched)
        sched = np.maximum(sched, 0.0)

        # rail hits of free legs
        hit_t = np.full((B, 2), np.inf)
        hit_o = np.full((B, 2), np.inf)
        for j in range(2):
            fj = moving & (st[:, j] == FREE)
            if fj.any():
                cT = u0 + nf_safe * (V - p[:, j])
                cO = u0 - nf_safe * p[:, j]
                hit_t[:, j] = np.where(fj, _first_crossing(R, psi, cT, w0), np.inf)
                hit_o[:, j] = np.where(fj, _first_crossing(R, psi, cO, w0), np.inf)
        # release of held legs while nothing moves
        clo = np.any(st == CLAMP_O, axis=1) & ~moving
        with np.errstate(divide="ignore", invalid="ignore"):
            t_rel = np.where(clo & (i > 0) & (v < vth), i * Leq / (vth - v), np.inf)
        t_rel = np.where(clo & (i <= 0) & ((i < 0) | (v < vth)), 0.0, t_rel)

        tau = np.minimum.reduce([sched, hit_t.min(1), hit_o.min(1), t_rel])
        tau = np.where(active, np.minimum(tau, t_end - t), 0.0)

        # spectrum of the deviation over [t, t + tau]
        past_B = (~single) & (t >= tB - eps)
        v_ideal = v_a + V * (1 + past_B)
        c0 = np.where(moving, vth, v) - v_ideal
        uc = np.where(moving, u0, 0.0)
        bc = np.where(moving, b, 0.0)
        T = tau[:, None]
        wc = w0[:, None]
        Ep = _E(wc - Omega, T)
        Em = _E(-wc - Omega, T)
        integral = (c0[:, None] * _E(-Omega, T) + uc[:, None] * 0.5 * (Ep + Em)
                    + bc[:, None] * (Ep - Em) / 2j)
        corr += pref * np.exp(-1j * ks * (theta_c + omega * t)[:, None]) * integral

        # advance state
        cw, sw = np.cos(w0 * tau), np.sin(w0 * tau)
        u1 = u0 * cw + b * sw
        v_new = np.where(moving, vth + u1, v)
        i_new = np.where(moving, Cb * w0 * (u0 * sw - b * cw), i + (v - vth) * tau / Leq)
        dv = v_new - v
        for j in range(2):
            p[:, j] = np.where(st[:, j] == FREE, p[:, j] + dv / nf_safe, p[:, j])
        v, i, t = v_new, i_new, t + tau

        # apply events
        for j in range(2):
            hitT = active & (hit_t[:, j] <= tau)
            hitO = active & (hit_o[:, j] <= tau) & ~hitT
            p[:, j] = np.where(hitT, V, np.where(hitO, 0.0, p[:, j]))
            st[:, j] = np.where(hitT, CLAMP_T, np.where(hitO, CLAMP_O, st[:, j]))
        rel = active & (t_rel <= tau)
        for j in range(2):
            st[:, j] = np.where(rel & (st[:, j] == CLAMP_O), FREE, st[:, j])
        startB = active & (st[:, 1] == WAIT) & (t >= tB - eps)
        fwd = (i < 0) | ((i == 0) & (vth > v))
        st[:, 1] = np.where(startB, np.where(fwd, FREE, CLAMP_O), st[:, 1])
        for j, ton in ((0, t_onA), (1, t_onB)):
            turn = active & (st[:, j] != ON) & (st[:, j] != ABSENT) & (st[:, j] != WAIT) \
                & (t >= ton - eps)
            dV[:, j] = np.where(turn, V - p[:, j], dV[:, j])
            p[:, j] = np.where(turn, V, p[:, j])
            st[:, j] = np.where(turn, ON, st[:, j])
        v = v_a + p[:, 0] + p[:, 1]
        # guard against clamp round-off
        p = np.clip(p, 0.0, V[:, None])
    else:
        raise RuntimeError("commutation event loop did not terminate")
    return dV[:, 0], dV[:, 1], corr


# ------------------------------------------------------------------ batch solve

@dataclass
class BatchSolution:
    ks: np.ndarray
    net: Network
    Vp: np.ndarray
    Vs: np.ndarray
    Ip: np.ndarray
    Is: np.ndarray
    Pp_ac: np.ndarray
    Ps_ac: np.ndarray
    dV: np.ndarray  # (B, 4) physical residual volts, legs p1 p2 s1 s2
    passes: int
    converged: np.ndarray
    Vin: np.ndarray
    Vout: np.ndarray
    dp: np.ndarray
    ds: np.ndarray
    phi: np.ndarray


def _bridge_corrections(V, delta, shift, I, vth_fn, Leq, Cleg, Td, w, ks):
    """Deadtime spectrum correction and residual voltages for one bridge."""
    tB = 2 * delta / w
    overlap = tB < Td
    thA = shift - delta
    thB = shift + delta
    iA = synth(I, ks, thA[:, None])[:, 0]
    iB = synth(I, ks, thB[:, None])[:, 0]
    zero = np.zeros_like(V)
    # falling leg at thA, rising leg at thB; joint group when windows overlap
    dA, dB_joint, corrA = commutation_cluster(
        V, -V, iA, vth_fn(thA), Leq, Cleg, Td, np.where(overlap, tB, np.inf), w, thA, ks)
    dB_sep, _, corrB = commutation_cluster(
        V, zero, iB, vth_fn(thB), Leq, Cleg, Td, np.full_like(V, np.inf), w, thB, ks)
    corr = corrA + np.where(overlap[:, None], 0.0, corrB)
    dB = np.where(overlap, dB_joint, dB_sep)
    return corr, dA, dB


def solve_batch(p: CircuitParams, Vin, Vout, dp, ds, phi, k_max=None, passes=2, net=None,
                tol=1e-3, Cq=None, k_event=None):
    """Vectorized steady-state solve.

    ``Vin``, ``Vout`` (physical), ``dp``, ``ds``, ``phi`` broadcast to (B,).
    ``net`` may carry per-element circuit variants from :func:`build_network`
    (built for the internal harmonic order).  Currents at the commutation
    instants are synthesized up to ``k_event`` (default 3*k_max) because a
    short series converges slowly at the current's slope discontinuities;
    reported spectra, powers and RMS values are truncated at ``k_max``.
    """
    k_max = k_max or p.k_max
    if k_event is None:
        k_event = 3 * k_max if p.Td > 0 and passes > 0 else k_max
    k_int = max(k_max, k_event | 1)
    Vin, Vout, dp, ds, phi = (np.atleast_1d(np.asarray(a, float)) for a in (Vin, Vout, dp, ds, phi))
    Vin, Vout, dp, ds, phi = np.broadcast_arrays(Vin, Vout, dp, ds, phi)
    if net is None:
        net = build_network(p, k_int)
    ks = net.ks
    K = (k_max + 1) // 2
    w = net.omega
    n = net.n
    Vs_lvl = n * Vout
    Vp0 = bridge_spectrum(Vin, dp, 0.0, ks)
    Vs0 = bridge_spectrum(Vs_lvl, ds, phi, ks)
    Ip, Is = currents(Vp0, Vs0, net.Z1, net.Z2, net.Z3)
    Pp = 0.5 * np.sum(np.real(Vp0[:, :K] * np.conj(Ip[:, :K])), axis=-1)
    Ps = 0.5 * np.sum(np.real(Vs0[:, :K] * np.conj(Is[:, :K])), axis=-1)
    B = Vin.shape[0]
    dV = np.zeros((B, 4))
    converged = np.ones(B, bool)
    Vp, Vs = Vp0, Vs0
    done = 0
    if p.Td > 0 and passes > 0:
        if Cq is None:
            Cq_p = charge_equivalent_capacitance(p.coss_primary, np.minimum(Vin, p.coss_primary.vmax))
            Cq_s = charge_equivalent_capacitance(p.coss_secondary, np.minimum(Vout, p.coss_secondary.vmax))
        else:
            Cq_p, Cq_s = Cq
        Lp_t = net.Lp_tot[:, 0]
        Ls_t = net.Ls_tot[:, 0]
        Lm = net.Lm[:, 0]
        Leq_p = Lp_t + Lm * Ls_t / (Lm + Ls_t)
        Leq_s = Ls_t + Lm * Lp_t / (Lm + Lp_t)
        kp = Lm / (Lm + Ls_t)
        ksec = Lm / (Lm + Lp_t)
        Cleg_p = 2 * Cq_p * np.ones(B)
        Cleg_s = 2 * Cq_s / n ** 2 * np.ones(B)
        converged[:] = False
        for done in range(1, passes + 1):
            corr_p, dA_p, dB_p = _bridge_corrections(
                Vin, dp, np.zeros(B), Ip,
                lambda th: kp * Vs_lvl * bridge_level(th, ds, phi),
                Leq_p * np.ones(B), Cleg_p, p.Td, w, ks)
            corr_s, dA_s, dB_s = _bridge_corrections(
                Vs_lvl, ds, phi, Is,
                lambda th: ksec * Vin * bridge_level(th, dp, 0.0),
                Leq_s * np.ones(B), Cleg_s, p.Td, w, ks)
            Vp = Vp0 + corr_p
            Vs = Vs0 + corr_s
            Ip, Is = currents(Vp, Vs, net.Z1, net.Z2, net.Z3)
            Pp = 0.5 * np.sum(np.real(Vp[:, :K] * np.conj(Ip[:, :K])), axis=-1)
            Ps_new = 0.5 * np.sum(np.real(Vs[:, :K] * np.conj(Is[:, :K])), axis=-1)
            # legs: p1 rises at +dp (leg B), p2 falls at -dp (leg A)
            dV = np.stack([dB_p, dA_p, dB_s / n, dA_s / n], axis=1)
            rel = np.abs(Ps_new - Ps) / np.maximum(np.abs(Ps_new), 1e-9)
            converged = rel < tol
            Ps = Ps_new
            if done >= 2 and converged.all():
                break
    if ks.size > K:
        net = _truncate(net, K)
    return BatchSolution(ks[:K], net, Vp[:, :K], Vs[:, :K], Ip[:, :K], Is[:, :K], Pp, Ps, dV,
                         done, converged, Vin, Vout, dp, ds, phi)


def _truncate(net, K):
    cut = {f: getattr(net, f)[..., :K] for f in ("Zp", "Zs", "Zlp", "Zls", "Zlm", "Z1", "Z2", "Z3")}
    return Network(net.ks[:K], net.omega, net.n, Lp_tot=net.Lp_tot, Ls_tot=net.Ls_tot,
                   Lm=net.Lm, **cut)


# ------------------------------------------------------------------ scalar API

@dataclass
class SteadyStateSolution:
    Vp: HarmonicSpectrum
    Vs: HarmonicSpectrum
    Ip: HarmonicSpectrum
    Is: HarmonicSpectrum
    Ip_rms: float
    Is_rms: float
    Pp_ac: float
    Ps_ac: float
    dV: dict
    waveforms: dict
    status: str
    passes: int
    op: OperatingPoint
    m: ModulationPoint
    Vp_ideal_ref: HarmonicSpectrum | None = None
    Vs_ideal_ref: HarmonicSpectrum | None = None
    batch: BatchSolution | None = field(default=None, repr=False)

    @property
    def Vp_dead(self):
        return HarmonicSpectrum(self.Vp.ks, self.Vp.values - self.Vp_ideal_ref.values)

    @property
    def Vs_dead(self):
        return HarmonicSpectrum(self.Vs.ks, self.Vs.values - self.Vs_ideal_ref.values)

    def to_csv(self, path):
        w = self.waveforms
        data = np.column_stack([w["t"], w["vp"], w["vs"], w["ip"], w["is"]])
        np.savetxt(path, data, delimiter=",", header="t,vp,vs,ip,is", comments="")


def solve_steady_state(p: CircuitParams, op: OperatingPoint, m: ModulationPoint, k_max=None,
                       correction_passes=2, samples_per_period=None, ideal_reference="printed"):
    """Single-point steady state with deadtime-corrected spectra.

    The decomposition into an "ideal" and a "dead" part is bookkeeping: the
    ``printed`` reference uses cos(k delta + 2 k w Td) for the ideal term,
    ``edge`` uses the undelayed quasi-square wave.  The modified spectra are
    the same either way.
    """
    k_max = k_max or p.k_max
    b = solve_batch(p, op.Vin, op.Vout, m.delta_p, m.delta_s, m.phi, k_max, correction_passes)
    ks = b.ks
    wT = 2 * ks * b.net.omega * p.Td if ideal_reference == "printed" else 0.0
    ref_p = 4 * op.Vin / (ks * PI) * np.cos(ks * m.delta_p + wT)
    ref_s = 4 * p.n * op.Vout / (ks * PI) * np.cos(ks * m.delta_s + wT) * np.exp(-1j * ks * m.phi)
    sp = samples_per_period or max(512, 64 * k_max)
    theta = 2 * PI * np.arange(sp) / sp
    Vp, Vs, Ip, Is = (HarmonicSpectrum(ks, x[0]) for x in (b.Vp, b.Vs, b.Ip, b.Is))
    waves = {
        "theta": theta,
        "t": theta / b.net.omega,
        "vp": synth(Vp.values, ks, theta),
        "vs": synth(Vs.values, ks, theta),
        "ip": synth(Ip.values, ks, theta),
        "is": synth(Is.values, ks, theta),
    }
    status = "converged" if (b.converged[0] or p.Td == 0 or correction_passes == 0) else "not_converged"
    if status != "converged":
        log.warning("deadtime correction not converged after %d passes", b.passes)
    return SteadyStateSolution(
        Vp, Vs, Ip, Is, float(rms(Ip.values)), float(rms(Is.values)),
        float(b.Pp_ac[0]), float(b.Ps_ac[0]),
        dict(zip(("p1", "p2", "s1", "s2"), map(float, b.dV[0]))),
        waves, status, b.passes, op, m,
        HarmonicSpectrum(ks, ref_p), HarmonicSpectrum(ks, ref_s), b)
