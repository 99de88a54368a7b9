"""Ideal lossless DAB model: operating-mode table and closed-form power."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_PI = math.pi / 2

MODE_RULES = {
    1: "phi >= dp+ds and dp+ds <= pi/2",
    2: "phi >= pi-(dp+ds)",
    3: "|dp-ds| <= phi < min(dp+ds, pi-dp-ds)",
    4: "phi < ds-dp",
    5: "phi < dp-ds",
}


@dataclass(frozen=True)
class IlmMode:
    number: int
    rule: str


def mode_index(dp, ds, phi):
    """Vectorized mode number (1..5); ties go to the lower-numbered mode."""
    dp, ds, phi = np.broadcast_arrays(*(np.asarray(a, float) for a in (dp, ds, phi)))
    s = dp + ds
    c1 = (phi >= s) & (s <= HALF_PI)
    c2 = phi >= math.pi - s
    c3 = (np.abs(dp - ds) <= phi) & (phi < np.minimum(s, math.pi - s))
    c4 = phi < ds - dp
    return np.select([c1, c2, c3, c4], [1, 2, 3, 4], default=5)


def classify_mode(m) -> IlmMode:
    dp, ds, phi = m.delta_p, m.delta_s, m.phi
    for v in (dp, ds, phi):
        if not (0.0 <= v <= HALF_PI):
            raise ValueError("modulation outside [0, pi/2]^3")
    k = int(mode_index(dp, ds, phi))
    return IlmMode(k, MODE_RULES[k])


def power_pu(dp, ds, phi, m_gain):
    """Per-unit transferred power of the active mode (base Vin^2/(2 pi fsw L))."""
    dp, ds, phi, m_gain = np.broadcast_arrays(
        *(np.asarray(a, float) for a in (dp, ds, phi, m_gain)))
    pi = math.pi
    mode = mode_index(dp, ds, phi)
    p1 = phi * (1 - phi / pi) - (dp ** 2 + ds ** 2) / pi
    p2 = 2 / pi * (HALF_PI - dp) * (HALF_PI - ds)
    p3 = phi * (1 - phi / (2 * pi)) - phi * (dp + ds) / pi - (dp - ds) ** 2 / (2 * pi)
    p4 = phi * (1 - 2 * ds / pi)
    p5 = phi * (1 - 2 * dp / pi)
    out = m_gain * np.choose(mode - 1, [p1, p2, p3, p4, p5])
    return out if out.ndim else float(out)


def gain(Vin, Vout, n, convention="referred"):
    """Voltage gain used in the mode formulas.

    ``referred``: n*Vout/Vin (primary-referred output over input), which gives
    the textbook SPS power law. ``literal``: the inverted ratio Vin/Vout.
    """
    if convention == "referred":
        return n * Vout / Vin
    if convention == "literal":
        return Vin / Vout
    raise ValueError(f"unknown gain convention {convention!r}")


def base_power(Vin, fsw, L):
    return Vin ** 2 / (2 * math.pi * fsw * L)


def ilm_power(op, m, L, fsw, n=1.0, convention="referred"):
    """Return ``(P_watts, P_pu)`` for operating point ``op`` and modulation ``m``."""
    pu = power_pu(m.delta_p, m.delta_s, m.phi, gain(op.Vin, op.Vout, n, convention))
    return pu * base_power(op.Vin, fsw, L), pu


def ilm_estimate_inductance(op, m, P_measured, fsw, n=1.0, convention="referred"):
    """Invert the mode formula for L given a measured transferred power."""
    if not P_measured > 0:
        raise ValueError("measured power must be positive")
    pu = power_pu(m.delta_p, m.delta_s, m.phi, gain(op.Vin, op.Vout, n, convention))
    if pu <= 0:
        raise ValueError("per-unit power is zero here: inductance not identifiable")
    return op.Vin ** 2 * pu / (2 * math.pi * fsw * P_measured)


def phi_for_power(dp, ds, p_pu, m_gain, iters=60):
    """Smallest phi in [0, pi/2] with power_pu = p_pu (bisection, vectorized).

    Power is non-decreasing in phi on [0, pi/2]; unreachable targets return
    pi/2.
    """
    dp, ds, p_pu, m_gain = np.broadcast_arrays(
        *(np.asarray(a, float) for a in (dp, ds, p_pu, m_gain)))
    lo = np.zeros(dp.shape)
    hi = np.full(dp.shape, HALF_PI)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = power_pu(dp, ds, mid, m_gain) < p_pu
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi
