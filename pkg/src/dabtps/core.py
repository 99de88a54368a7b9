"""Circuit parameters, device capacitance tables and config I/O."""
from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

LEGS = ("p1", "p2", "s1", "s2")
WINDINGS = ("transformer", "Lp", "Ls")


class ConfigError(ValueError):
    """Raised for malformed or physically invalid configuration."""


@dataclass(frozen=True)
class CossCurve:
    """Piecewise-linear output capacitance C(v_ds) of one switch position."""

    v: tuple
    c: tuple

    def __post_init__(self):
        v = np.asarray(self.v, float)
        c = np.asarray(self.c, float)
        if v.ndim != 1 or v.size < 2 or v.size != c.size:
            raise ConfigError("Coss table needs >= 2 matching (v, c) points")
        if v[0] != 0.0:
            raise ConfigError("Coss table must start at v_ds = 0")
        if np.any(np.diff(v) <= 0):
            raise ConfigError("Coss table v_ds must be strictly increasing")
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise ConfigError("Coss table capacitances must be positive")
        object.__setattr__(self, "v", tuple(float(x) for x in v))
        object.__setattr__(self, "c", tuple(float(x) for x in c))

    @classmethod
    def constant(cls, c, vmax):
        return cls((0.0, float(vmax)), (float(c), float(c)))

    @property
    def vmax(self):
        return self.v[-1]

    def __call__(self, u):
        return np.interp(u, self.v, self.c)


def coss_integrals(curve: CossCurve, v):
    """Stored energy and charge of a Coss curve charged to ``v``.

    Integrates the linear interpolant of the table exactly (the integrand of
    the energy is quadratic on each segment, so Simpson is exact there).
    Returns ``(Eoss, Qoss)`` with the shape of ``v``.
    """
    v = np.asarray(v, float)
    if np.any(v < 0) or np.any(v > curve.vmax * (1 + 1e-12)):
        raise ValueError(f"voltage outside Coss table range [0, {curve.vmax}]")
    tv = np.asarray(curve.v)
    tc = np.asarray(curve.c)
    # cumulative integrals at table nodes
    dv = np.diff(tv)
    q_seg = 0.5 * (tc[:-1] + tc[1:]) * dv
    mid = 0.5 * (tv[:-1] + tv[1:])
    cmid = 0.5 * (tc[:-1] + tc[1:])
    e_seg = dv / 6.0 * (tc[:-1] * tv[:-1] + 4 * cmid * mid + tc[1:] * tv[1:])
    q_cum = np.concatenate(([0.0], np.cumsum(q_seg)))
    e_cum = np.concatenate(([0.0], np.cumsum(e_seg)))

    idx = np.clip(np.searchsorted(tv, v, side="right") - 1, 0, tv.size - 2)
    v0 = tv[idx]
    c0 = tc[idx]
    cv = np.interp(v, tv, tc)
    h = v - v0
    q = q_cum[idx] + 0.5 * (c0 + cv) * h
    vm = 0.5 * (v0 + v)
    cm = 0.5 * (c0 + cv)
    e = e_cum[idx] + h / 6.0 * (c0 * v0 + 4 * cm * vm + cv * v)
    return e, q


def charge_equivalent_capacitance(curve: CossCurve, v):
    """C_Q,eq = Qoss(v)/v (falls back to C(0) at v = 0)."""
    v = np.asarray(v, float)
    _, q = coss_integrals(curve, v)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(v > 0, q / np.where(v > 0, v, 1.0), curve.c[0])


@dataclass(frozen=True)
class MagneticCore:
    name: str
    winding: str  # transformer | Lp | Ls
    n_turns: int
    Ae: float  # m^2
    V_core: float  # cm^3
    T_core: float = 25.0  # degC

    def __post_init__(self):
        if self.winding not in WINDINGS:
            raise ConfigError(f"core {self.name}: winding must be one of {WINDINGS}")
        if self.n_turns <= 0 or self.Ae <= 0 or self.V_core <= 0:
            raise ConfigError(f"core {self.name}: n_turns, Ae, V_core must be positive")


def _rtable(value, name):
    """Normalize a scalar or {k: R} mapping into a sorted tuple of (k, R)."""
    if isinstance(value, (int, float, str)):
        items = {1: float(value)}
    elif isinstance(value, dict):
        items = {int(k): float(r) for k, r in value.items()}
    else:
        items = {int(k): float(r) for k, r in value}
    if 1 not in items:
        raise ConfigError(f"{name}: resistance table needs a k=1 entry")
    for k, r in items.items():
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"{name}: harmonic index {k} must be odd and >= 1")
        if r < 0 or not math.isfinite(r):
            raise ConfigError(f"{name}: resistance at k={k} must be >= 0")
    return tuple(sorted(items.items()))


def _leg_times(value, name):
    if isinstance(value, (int, float, str)):
        t = (float(value),) * 4
    elif isinstance(value, dict):
        missing = [leg for leg in LEGS if leg not in value]
        if missing:
            raise ConfigError(f"{name}: missing legs {missing}")
        t = tuple(float(value[leg]) for leg in LEGS)
    else:
        t = tuple(float(x) for x in value)
    if len(t) != 4 or any(x < 0 for x in t):
        raise ConfigError(f"{name}: need four non-negative per-leg times")
    return t


@dataclass(frozen=True)
class CircuitParams:
    """Parasitic-inclusive DAB description.

    Secondary-side quantities (Ls, Lls, Rs, Rls) are physical, unreferred
    values; the shunt capacitances Cip, Cis, Cps are primary-referred.
    """

    Vin_nominal: float
    fsw: float
    n: float  # np/ns
    Lp: float
    Ls: float
    Lm: float
    Llp: float
    Lls: float
    Rp: tuple
    Rs: tuple
    Rlp: tuple = ((1, 0.0),)
    Rls: tuple = ((1, 0.0),)
    Cip: float = 0.0
    Cis: float = 0.0
    Cps: float = 0.0
    Td: float = 0.0
    coss_primary: CossCurve | None = None
    coss_secondary: CossCurve | None = None
    t_on: tuple = (0.0, 0.0, 0.0, 0.0)
    t_off: tuple = (0.0, 0.0, 0.0, 0.0)
    cores: tuple = ()
    rated_power: float = 2000.0
    B_sat: float = 0.35
    k_max: int = 21
    turns: tuple = ()  # optional (np, ns) as given in config

    def __post_init__(self):
        for name in ("Rp", "Rs", "Rlp", "Rls"):
            object.__setattr__(self, name, _rtable(getattr(self, name), name))
        object.__setattr__(self, "t_on", _leg_times(self.t_on, "t_on"))
        object.__setattr__(self, "t_off", _leg_times(self.t_off, "t_off"))
        object.__setattr__(self, "cores", tuple(self.cores))
        for name in ("Vin_nominal", "fsw", "n", "Lp", "Ls", "Lm", "rated_power"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ConfigError(f"{name} must be positive (got {val})")
        for name in ("Llp", "Lls", "Cip", "Cis", "Cps", "Td"):
            val = getattr(self, name)
            if not (val >= 0 and math.isfinite(val)):
                raise ConfigError(f"{name} must be non-negative (got {val})")
        if self.k_max < 1 or self.k_max % 2 == 0:
            raise ConfigError("k_max must be odd and >= 1")
        if self.Lm < 10 * self.Lp:
            warnings.warn("Lm < 10*Lp: magnetizing branch is not negligible", stacklevel=2)

    # per-harmonic resistance lookup; unspecified k fall back to k=1
    def resistance(self, name, ks):
        table = dict(getattr(self, name))
        return np.array([table.get(int(k), table[1]) for k in np.atleast_1d(ks)])

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class ModulationPoint:
    delta_p: float
    delta_s: float
    phi: float

    def __post_init__(self):
        for name in ("delta_p", "delta_s", "phi"):
            val = getattr(self, name)
            if not (-1e-12 <= val <= math.pi / 2 + 1e-12):
                raise ValueError(f"{name}={val} outside [0, pi/2]")

    def as_tuple(self):
        return (self.delta_p, self.delta_s, self.phi)


@dataclass(frozen=True)
class OperatingPoint:
    Vin: float
    Vout: float  # physical secondary dc voltage
    Ps_target: float = 0.0

    def __post_init__(self):
        if not (self.Vin > 0 and self.Vout > 0):
            raise ValueError("Vin and Vout must be positive")
        if self.Ps_target < 0:
            raise ValueError("power target must be non-negative (forward flow)")


def lumped_params(p: CircuitParams, include_transformer=True):
    """Primary-referred total series inductance and resistance (k = 1)."""
    n2 = p.n ** 2
    Rp, Rs = p.resistance("Rp", 1)[0], p.resistance("Rs", 1)[0]
    if include_transformer:
        Lt = p.Lp + p.Llp + n2 * (p.Ls + p.Lls)
        Rt = Rp + p.resistance("Rlp", 1)[0] + n2 * (Rs + p.resistance("Rls", 1)[0])
    else:
        Lt = p.Lp + n2 * p.Ls
        Rt = Rp + n2 * Rs
    return {"Lt": Lt, "Rt": Rt}


def scale_to_lumped(p: CircuitParams, Lt, Rt):
    """Rescale a circuit so its lumped (Lt, Rt) hit the requested values.

    All series inductances are scaled by a common factor, likewise all series
    resistance tables, so the primary/secondary split keeps nominal ratios.
    """
    base = lumped_params(p)
    a = Lt / base["Lt"]
    b = Rt / base["Rt"] if base["Rt"] > 0 else 0.0
    tabs = {k: tuple((h, r * b) for h, r in getattr(p, k)) for k in ("Rp", "Rs", "Rlp", "Rls")}
    return replace(p, Lp=p.Lp * a, Ls=p.Ls * a, Llp=p.Llp * a, Lls=p.Lls * a, **tabs)


# ---------------------------------------------------------------- config I/O

def _num(x, name):
    try:
        return float(x)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {x!r}") from None


def _req(sec, key, where):
    if key not in sec:
        raise ConfigError(f"missing mandatory field '{where}.{key}'")
    return sec[key]


def _coss_from(spec, base_dir, name):
    if isinstance(spec, dict) and "csv" in spec:
        path = Path(spec["csv"])
        if not path.is_absolute():
            path = Path(base_dir) / path
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if rows and not _isfloat(rows[0][0]):
            rows = rows[1:]
        pts = [(float(a), float(b)) for a, b in rows]
    else:
        pts = [(_num(a, name), _num(b, name)) for a, b in spec]
    try:
        return CossCurve(tuple(a for a, _ in pts), tuple(b for _, b in pts))
    except ConfigError as e:
        raise ConfigError(f"{name}: {e}") from None


def _isfloat(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def params_from_dict(d, base_dir="."):
    conv = _req(d, "converter", "")
    ind = _req(d, "inductances", "")
    res = _req(d, "resistances", "")
    cap = d.get("capacitances", {}) or {}
    sw = d.get("switching", {}) or {}
    turns = _req(conv, "turns_ratio", "converter")
    if isinstance(turns, (list, tuple)):
        n = _num(turns[0], "turns_ratio") / _num(turns[1], "turns_ratio")
        turns_t = (int(turns[0]), int(turns[1]))
    else:
        n = _num(turns, "turns_ratio")
        turns_t = ()
    kw = dict(
        Vin_nominal=_num(_req(conv, "Vin_nominal", "converter"), "Vin_nominal"),
        fsw=_num(_req(conv, "fsw", "converter"), "fsw"),
        n=n,
        turns=turns_t,
        rated_power=_num(conv.get("rated_power", 2000.0), "rated_power"),
        k_max=int(conv.get("k_max", 21)),
        Lp=_num(_req(ind, "Lp", "inductances"), "Lp"),
        Ls=_num(_req(ind, "Ls", "inductances"), "Ls"),
        Lm=_num(_req(ind, "Lm", "inductances"), "Lm"),
        Llp=_num(ind.get("Llp", 0.0), "Llp"),
        Lls=_num(ind.get("Lls", 0.0), "Lls"),
        Rp=_req(res, "Rp", "resistances"),
        Rs=_req(res, "Rs", "resistances"),
        Rlp=res.get("Rlp", 0.0),
        Rls=res.get("Rls", 0.0),
        Cip=_num(cap.get("Cip", 0.0), "Cip"),
        Cis=_num(cap.get("Cis", 0.0), "Cis"),
        Cps=_num(cap.get("Cps", 0.0), "Cps"),
        Td=_num(sw.get("Td", 0.0), "Td"),
        t_on=sw.get("t_on", 0.0),
        t_off=sw.get("t_off", 0.0),
        B_sat=_num(d.get("B_sat", 0.35), "B_sat"),
    )
    for key in ("Rp", "Rs", "Rlp", "Rls"):
        v = kw[key]
        kw[key] = {k: _num(r, key) for k, r in v.items()} if isinstance(v, dict) else _num(v, key)
    for key in ("t_on", "t_off"):
        v = kw[key]
        kw[key] = {k: _num(t, key) for k, t in v.items()} if isinstance(v, dict) else _num(v, key)
    if "coss_primary" in sw:
        kw["coss_primary"] = _coss_from(sw["coss_primary"], base_dir, "coss_primary")
    if "coss_secondary" in sw:
        kw["coss_secondary"] = _coss_from(sw["coss_secondary"], base_dir, "coss_secondary")
    cores = []
    for i, c in enumerate(d.get("cores", []) or []):
        cores.append(MagneticCore(
            name=str(c.get("name", f"core{i}")),
            winding=str(_req(c, "winding", f"cores[{i}]")),
            n_turns=int(_req(c, "n_turns", f"cores[{i}]")),
            Ae=_num(_req(c, "Ae", f"cores[{i}]"), "Ae"),
            V_core=_num(_req(c, "V_core", f"cores[{i}]"), "V_core"),
            T_core=_num(c.get("T_core", 25.0), "T_core"),
        ))
    kw["cores"] = tuple(cores)
    return CircuitParams(**kw)


def load_config(path) -> CircuitParams:
    path = Path(path)
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: not a mapping")
    return params_from_dict(d, base_dir=path.parent)


def params_to_dict(p: CircuitParams):
    def tab(t):
        return {int(k): float(r) for k, r in t}

    d = {
        "converter": {
            "Vin_nominal": p.Vin_nominal,
            "fsw": p.fsw,
            "turns_ratio": list(p.turns) if p.turns else p.n,
            "rated_power": p.rated_power,
            "k_max": p.k_max,
        },
        "inductances": {"Lp": p.Lp, "Ls": p.Ls, "Lm": p.Lm, "Llp": p.Llp, "Lls": p.Lls},
        "resistances": {k: tab(getattr(p, k)) for k in ("Rp", "Rs", "Rlp", "Rls")},
        "capacitances": {"Cip": p.Cip, "Cis": p.Cis, "Cps": p.Cps},
        "switching": {
            "Td": p.Td,
            "t_on": dict(zip(LEGS, p.t_on)),
            "t_off": dict(zip(LEGS, p.t_off)),
        },
        "B_sat": p.B_sat,
        "cores": [
            {"name": c.name, "winding": c.winding, "n_turns": c.n_turns, "Ae": c.Ae,
             "V_core": c.V_core, "T_core": c.T_core}
            for c in p.cores
        ],
    }
    for key in ("coss_primary", "coss_secondary"):
        curve = getattr(p, key)
        if curve is not None:
            d["switching"][key] = [[a, b] for a, b in zip(curve.v, curve.c)]
    return d


def save_config(p: CircuitParams, path):
    with open(path, "w") as fh:
        yaml.safe_dump(params_to_dict(p), fh, sort_keys=False)


def config_hash(p: CircuitParams):
    text = yaml.safe_dump(params_to_dict(p), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_config_path():
    return Path(__file__).resolve().parent / "data" / "nominal.yaml"


def nominal_params() -> CircuitParams:
    return load_config(default_config_path())


def field_names():
    return [f.name for f in fields(CircuitParams)]
