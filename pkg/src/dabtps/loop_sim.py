"""Closed-loop simulation: quasi-static plant, PI on phi with duty feedforward,
periodic parameter estimation over a fixed-point byte link.

Simulated time advances in control steps while the loop is in a transient;
once settled, the state is held and time jumps to the next event, so long
estimation cadences cost only the transients.
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import yaml

from .core import CircuitParams, LEGS, lumped_params, scale_to_lumped
from .losses import ZVS_FULL

log = logging.getLogger(__name__)

HALF_PI = math.pi / 2
SCALE = 100
CODE_MAX = 0xFFFF


# ------------------------------------------------------------------ codec

class CodecRangeError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    """A 16-bit field; the transmitted number is value/unit to two decimals."""

    name: str
    unit: float = 1.0


SENSE_FIELDS = (
    FieldSpec("Vin"), FieldSpec("Vout"),
    FieldSpec("Pin", 100.0), FieldSpec("Pout", 100.0),  # hectowatts: 1 W resolution
    FieldSpec("delta_p", 0.01), FieldSpec("delta_s", 0.01), FieldSpec("phi", 0.01),
)
PARAM_FIELDS = (FieldSpec("Lt", 1e-6), FieldSpec("Rt", 1e-3))  # uH, mOhm


def to_code(x, name="value"):
    """Round half up to two decimals and scale by 100."""
    try:
        d = Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    except Exception as exc:  # nan/inf
        raise CodecRangeError(f"{name}: cannot encode {x!r}") from exc
    code = int(d * SCALE)
    if not 0 <= code <= CODE_MAX:
        raise CodecRangeError(f"{name}: {x!r} outside [0, {CODE_MAX / SCALE}]")
    return code


def from_code(code):
    return code / SCALE


def encode_value(x, name="value"):
    return to_code(x, name).to_bytes(2, "big")


def decode_value(b):
    return from_code(int.from_bytes(bytes(b[:2]), "big"))


def spi_encode(values: dict, fields=SENSE_FIELDS) -> bytes:
    out = bytearray()
    for f in fields:
        if f.name not in values:
            raise CodecRangeError(f"missing field {f.name}")
        out += encode_value(values[f.name] / f.unit, f.name)
    return bytes(out)


def spi_decode(data: bytes, fields=SENSE_FIELDS) -> dict:
    if len(data) != 2 * len(fields):
        raise CodecRangeError(f"frame length {len(data)} != {2 * len(fields)}")
    return {f.name: decode_value(data[2 * i:2 * i + 2]) * f.unit for i, f in enumerate(fields)}


def hexdump(data: bytes) -> str:
    return " ".join(f"{b:02X}" for b in data)


def frame_latency(n_data_bytes, byte_time=0.8e-3, gap=5.93e-3, request_bytes=1):
    """Transfer time: every byte (request included) plus the gaps after data bytes."""
    return (n_data_bytes + request_bytes) * byte_time + n_data_bytes * gap


# ------------------------------------------------------------------ controller

@dataclass(frozen=True)
class PIGains:
    Kp: float = 2e-3  # rad/V
    Ki: float = 5.0  # rad/(V s)
    Ts: float = 100e-6
    ff_tau: float = 5e-3  # s, low-pass on the power fed to the duty surfaces


@dataclass
class LoopState:
    t: float
    params: CircuitParams  # true plant
    Lt_b: float  # believed
    Rt_b: float
    phi: float
    dp: float
    ds: float
    Vout: float
    Vref: float
    e_prev: float = 0.0
    Ps_f: float = 0.0  # filtered output power for the feedforward
    frozen: bool = False
    log: list = field(default_factory=list)


def controller_step(state: LoopState, Vout_sensed, gains: PIGains, duty_fn=None, Ps_sensed=None):
    """Velocity-form PI on phi; the clamp freezes the integral action."""
    e = state.Vref - Vout_sensed
    new = state.phi + gains.Kp * (e - state.e_prev) + gains.Ki * gains.Ts * e
    state.frozen = not (0.0 <= new <= HALF_PI)
    state.phi = min(max(new, 0.0), HALF_PI)
    state.e_prev = e
    if duty_fn is not None and duty_fn.per_step:
        # filtered power breaks the algebraic loop duties -> power -> duties
        a = min(1.0, gains.Ts / gains.ff_tau) if gains.ff_tau > 0 else 1.0
        state.Ps_f += a * (Ps_sensed - state.Ps_f)
        state.dp, state.ds = duty_fn(state.Ps_f, Vout_sensed, state.Lt_b, state.Rt_b)
    return state


class PolyDuties:
    """Duties from fitted surfaces, evaluated every control step."""

    per_step = True

    def __init__(self, surf_dp, surf_ds, n):
        self.sp, self.ss, self.n = surf_dp, surf_ds, n

    def __call__(self, Ps, Vout, Lt, Rt):
        from .polyfit import eval_poly4
        dp, _ = eval_poly4(self.sp, Ps, self.n * Vout, Lt, Rt)
        ds, _ = eval_poly4(self.ss, Ps, self.n * Vout, Lt, Rt)
        return float(dp[0]), float(ds[0])


class OptimalDuties:
    """Duties from the optimizer on the nominal circuit rescaled to the belief.

    Refreshed at events only (power rounded to ``p_round`` watts); results
    are memoized.  ``warm`` duties are passed as an extra start.
    """

    per_step = False

    def __init__(self, p_nom: CircuitParams, settings=None, p_round=10.0):
        from .optimizer import OptSettings
        self.p_nom = p_nom
        self.st = settings or OptSettings()
        self.p_round = p_round
        self.cache = {}

    def __call__(self, Ps, Vout, Lt, Rt, warm=None):
        from .core import OperatingPoint
        from .optimizer import InfeasibleTarget, optimize_tps
        P = max(self.p_round, round(Ps / self.p_round) * self.p_round)
        key = (P, round(Vout, 3), float(Lt), float(Rt), warm)
        if key not in self.cache:
            p = scale_to_lumped(self.p_nom, Lt, Rt)
            try:
                r = optimize_tps(p, OperatingPoint(self.p_nom.Vin_nominal, Vout, P),
                                 settings=self.st, extra_start=warm)
                self.cache[key] = (r.m.delta_p, r.m.delta_s)
            except InfeasibleTarget:
                self.cache[key] = (0.0, 0.0)
        return self.cache[key]


# ------------------------------------------------------------------ plant

class Plant:
    """Quasi-static converter with an output capacitor and resistive load."""

    def __init__(self, p: CircuitParams, Vin, C_out, R_load):
        self.Vin = Vin
        self.C = C_out
        self.R = R_load
        self.set_params(p)

    def set_params(self, p):
        from .optimizer import LossModel
        self.p = p
        self.model = LossModel(p, "total")

    def solve(self, Vout, dp, ds, phi):
        b, r = self.model.full(self.Vin, Vout, dp, ds, phi)
        return b, r

    def step(self, Vout, dp, ds, phi, Ts):
        b, r = self.solve(Vout, dp, ds, phi)
        Iout = float(r["Ps_out"][0]) / Vout
        # implicit in the load term
        Vn = (Vout + Ts * Iout / self.C) / (1 + Ts / (self.R * self.C))
        return Vn, b, r


# ------------------------------------------------------------------ scenario

@dataclass
class Scenario:
    Vin: float = 160.0
    Vout_ref: float = 100.0
    P_load: float = 1400.0
    C_out: float = 35e-6
    duration: float = 65.0
    estimation_period: float = 30.0
    estimator: str = "oracle"  # oracle | model
    model_path: str | None = None
    duties: str = "poly"  # poly | optimal
    surfaces: tuple | None = None  # (dp_path, ds_path)
    gains: PIGains = field(default_factory=PIGains)
    settle_tol: float = 1e-4  # relative voltage error
    settle_steps: int = 30
    max_transient: float = 0.2  # s of control steps per transient
    events: list = field(default_factory=list)  # dicts with t and set/load/Vout_ref
    opt_starts: int = 8
    name: str = "scenario"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        g = d.pop("gains", None)
        if "surfaces" in d and d["surfaces"] is not None:
            d["surfaces"] = tuple(d["surfaces"])
        sc = cls(**d)
        if g:
            sc.gains = PIGains(**{k: float(v) for k, v in g.items()})
        for ev in sc.events:
            if "t" not in ev:
                raise ValueError("every event needs a time t")
        return sc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


@dataclass
class ScenarioResult:
    rows: list
    events: list
    frames: list  # (t, direction, hexdump)

    def column(self, k):
        return np.array([r[k] for r in self.rows])

    def to_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def _oracle_estimator(p_true_fn):
    def est(sensed):
        lp = lumped_params(p_true_fn())
        return lp["Lt"], lp["Rt"]
    return est


def _model_estimator(model):
    def est(s):
        x = np.array([[s["Vin"], s["Vout"], s["Pin"] / s["Vin"], s["Pout"] / s["Vout"],
                       s["Pin"] - s["Pout"], s["delta_p"], s["delta_s"], s["phi"]]])
        y = model.predict_physical(x)[0]
        return float(y[0]), float(y[1])
    return est


def run_scenario(sc: Scenario, p_nom: CircuitParams, estimator=None, duty_fn=None):
    """Simulate a scenario; returns the time series, event log and frame log."""
    from .optimizer import LossModel, _Problems, solve_phi

    p_true = p_nom
    R_load = sc.Vout_ref ** 2 / sc.P_load
    plant = Plant(p_true, sc.Vin, sc.C_out, R_load)
    lp = lumped_params(p_nom)
    if estimator is None:
        if sc.estimator == "oracle":
            estimator = _oracle_estimator(lambda: plant.p)
        else:
            from .pinn import MlpModel
            estimator = _model_estimator(MlpModel.load(sc.model_path))
    if duty_fn is None:
        if sc.duties == "poly":
            from .polyfit import PolySurface
            duty_fn = PolyDuties(PolySurface.load(sc.surfaces[0]), PolySurface.load(sc.surfaces[1]),
                                 p_nom.n)
        else:
            from .optimizer import OptSettings
            duty_fn = OptimalDuties(p_nom, OptSettings(n_starts=sc.opt_starts))

    st = LoopState(0.0, p_true, lp["Lt"], lp["Rt"], 0.0, 0.0, 0.0, sc.Vout_ref, sc.Vout_ref,
                   Ps_f=sc.P_load)
    st.dp, st.ds = duty_fn(sc.P_load, sc.Vout_ref, st.Lt_b, st.Rt_b)
    # start from the loop's steady state on the true plant
    prob = _Problems(LossModel(p_true, "total"), sc.Vin, sc.Vout_ref, sc.P_load)
    phi, _, ok = solve_phi(prob, np.array([0]), np.array([st.dp]), np.array([st.ds]), tol=1e-6)
    st.phi = float(phi[0])

    rows, evlog, frames = [], [], []
    n_frames = 0
    q = []  # (time, seq, kind, payload)
    seq = 0

    def push(t, kind, payload=None):
        nonlocal seq
        heapq.heappush(q, (t, seq, kind, payload))
        seq += 1

    for ev in sc.events:
        push(float(ev["t"]), "scenario", ev)
    k = 1
    while k * sc.estimation_period <= sc.duration:
        push(k * sc.estimation_period, "estimate")
        k += 1
    push(sc.duration, "end")

    def record(b, r, tag):
        link = (sc.Vin, sc.Vin, st.Vout, st.Vout)
        dV = b.dV[0]
        lpt = lumped_params(plant.p)
        row = {"t": st.t, "tag": tag, "Vout": st.Vout, "Vref": st.Vref,
               "Ps_out": float(r["Ps_out"][0]), "Pp_in": float(r["Pp_in"][0]),
               "eff": float(r["eff"][0]), "P_total": float(r["P_total"][0]),
               "I_rms": float(r["Ip_rms"][0]), "dp": st.dp, "ds": st.ds, "phi": st.phi,
               "Lt_b": st.Lt_b, "Rt_b": st.Rt_b, "Lt_true": lpt["Lt"], "Rt_true": lpt["Rt"],
               "n_zvs": int(sum(d < ZVS_FULL * v for d, v in zip(dV, link))),
               "frames": n_frames}
        row.update({f"dV_{leg}": float(x) for leg, x in zip(LEGS, dV)})
        rows.append(row)
        return row

    def run_until(t_stop):
        """Control steps until settled or t_stop; then hold until t_stop."""
        Ts = sc.gains.Ts
        calm = 0
        t_lim = min(t_stop, st.t + sc.max_transient)
        b, r = plant.solve(st.Vout, st.dp, st.ds, st.phi)
        while st.t + Ts <= t_lim + 1e-12:
            Vn, b, r = plant.step(st.Vout, st.dp, st.ds, st.phi, Ts)
            st.Vout = Vn
            st.t += Ts
            Ps = float(r["Ps_out"][0])
            phi0 = st.phi
            controller_step(st, st.Vout, sc.gains, duty_fn, Ps)
            record(b, r, "step")
            err = abs(st.Vout - st.Vref) / st.Vref
            calm = calm + 1 if (err < sc.settle_tol and abs(st.phi - phi0) < 1e-6) else 0
            if calm >= sc.settle_steps:
                break
        b, r = plant.solve(st.Vout, st.dp, st.ds, st.phi)
        record(b, r, "settled")
        if t_stop > st.t:
            st.t = t_stop
            record(b, r, "hold")
        return b, r

    b, r = run_until(0.0)
    while q:
        t_ev, _, kind, payload = heapq.heappop(q)
        b, r = run_until(t_ev)
        st.t = t_ev
        if kind == "end":
            break
        if kind == "scenario":
            ev = payload
            if "set" in ev:
                plant.set_params(plant.p.with_(**{k: float(v) for k, v in ev["set"].items()}))
            if "load" in ev:
                plant.R = st.Vref ** 2 / float(ev["load"])
            if "Vout_ref" in ev:
                st.Vref = float(ev["Vout_ref"])
                plant.R = st.Vref ** 2 / (st.Vout ** 2 / plant.R)
            if not duty_fn.per_step and ("load" in ev or "Vout_ref" in ev):
                st.dp, st.ds = duty_fn(float(r["Ps_out"][0]) if "load" not in ev else float(ev["load"]),
                                       st.Vref, st.Lt_b, st.Rt_b)
            evlog.append({"t": st.t, "kind": "scenario", **{k: v for k, v in ev.items() if k != "t"}})
        elif kind == "estimate":
            sensed = {"Vin": sc.Vin, "Vout": st.Vout, "Pin": float(r["Pp_in"][0]),
                      "Pout": float(r["Ps_out"][0]), "delta_p": st.dp, "delta_s": st.ds,
                      "phi": st.phi}
            up = spi_encode(sensed, SENSE_FIELDS)
            rx = spi_decode(up, SENSE_FIELDS)
            Lt_e, Rt_e = estimator(rx)
            down = spi_encode({"Lt": Lt_e, "Rt": Rt_e}, PARAM_FIELDS)
            got = spi_decode(down, PARAM_FIELDS)
            n_frames += 2
            frames.append((st.t, "to_estimator", hexdump(up)))
            lat = frame_latency(len(up)) + frame_latency(len(down))
            frames.append((st.t + lat, "to_controller", hexdump(down)))
            push(st.t + lat, "apply", (got["Lt"], got["Rt"], float(r["Ps_out"][0])))
            evlog.append({"t": st.t, "kind": "estimate", "Lt": got["Lt"], "Rt": got["Rt"],
                          "latency": lat})
        elif kind == "apply":
            Lt_n, Rt_n, Ps = payload
            st.Lt_b, st.Rt_b = Lt_n, Rt_n
            if not duty_fn.per_step:
                st.dp, st.ds = duty_fn(Ps, st.Vref, st.Lt_b, st.Rt_b)
            evlog.append({"t": st.t, "kind": "apply", "Lt": Lt_n, "Rt": Rt_n,
                          "dp": st.dp, "ds": st.ds})
    return ScenarioResult(rows, evlog, frames)
