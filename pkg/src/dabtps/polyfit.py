"""Four-variable polynomial duty surfaces fitted by least squares.

Inputs (Ps_out, V'out, Lt, Rt) are scaled to [0, 1] with stored ranges;
coefficients come from an SVD pseudoinverse of the monomial design matrix.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

VARIABLES = ("Ps_out", "Vout_ref", "Lt", "Rt")
FORMAT_VERSION = 1
RCOND = 1e-10
HALF_PI = math.pi / 2


class RankDeficientError(np.linalg.LinAlgError):
    pass


def exponents(degree=4, nvar=4):
    """All exponent tuples with total degree <= ``degree`` (graded lex order)."""
    out = []
    for d in range(degree + 1):
        for e in itertools.product(range(d + 1), repeat=nvar):
            if sum(e) == d:
                out.append(e)
    return sorted(out, key=lambda e: (sum(e), tuple(-x for x in e)))


def design_matrix(Z, exps):
    """Monomials of scaled inputs ``Z`` (N, nvar)."""
    Z = np.atleast_2d(Z)
    deg = max(sum(e) for e in exps)
    pw = Z[:, :, None] ** np.arange(deg + 1)  # (N, nvar, deg+1)
    cols = [np.prod([pw[:, v, e[v]] for v in range(Z.shape[1])], axis=0) for e in exps]
    return np.stack(cols, axis=1)


@dataclass
class PolySurface:
    target: str
    degree: int
    exps: list
    coeffs: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    stats: dict = field(default_factory=dict)

    def scale(self, X):
        return (np.atleast_2d(np.asarray(X, float)) - self.lo) / (self.hi - self.lo)

    def raw(self, X):
        """Unclamped polynomial value (multivariate Horner)."""
        Z = self.scale(X)
        table = {e: c for e, c in zip(map(tuple, self.exps), self.coeffs)}
        return _horner(table, Z, 0, self.degree)

    def __call__(self, X):
        return np.clip(self.raw(X), 0.0, HALF_PI)

    def out_of_range(self, X, margin=0.0):
        Z = self.scale(X)
        return np.any((Z < -margin) | (Z > 1 + margin), axis=1)

    # --------------------------------------------------------------- I/O
    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "target": self.target,
            "degree": self.degree,
            "variables": list(VARIABLES),
            "scaling": {v: [float(a), float(b)] for v, a, b in zip(VARIABLES, self.lo, self.hi)},
            "terms": [[*map(int, e), float(c)] for e, c in zip(self.exps, self.coeffs)],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported surface version {d.get('version')}")
        if list(d["variables"]) != list(VARIABLES):
            raise ValueError("surface variables do not match")
        lo = np.array([d["scaling"][v][0] for v in VARIABLES], float)
        hi = np.array([d["scaling"][v][1] for v in VARIABLES], float)
        exps = [tuple(t[:4]) for t in d["terms"]]
        coeffs = np.array([t[4] for t in d["terms"]], float)
        return cls(d["target"], int(d["degree"]), exps, coeffs, lo, hi)

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def _horner(table, Z, v, deg):
    """Evaluate sum c_e prod z^e by nesting on variable ``v``."""
    nvar = Z.shape[1]
    if v == nvar - 1:
        acc = np.zeros(Z.shape[0])
        for i in range(deg, -1, -1):
            acc = acc * Z[:, v] + table.get((i,), 0.0)
        return acc
    acc = np.zeros(Z.shape[0])
    for i in range(deg, -1, -1):
        sub = {e[1:]: c for e, c in table.items() if e[0] == i}
        inner = _horner(sub, Z, v + 1, deg - i) if sub else 0.0
        acc = acc * Z[:, v] + inner
    return acc


def rows_to_inputs(rows, n):
    """(Ps_out, n*Vout, Lt, Rt) from sweep rows."""
    return np.array([[r["Ps_out"], n * r["Vout"], r["Lt"], r["Rt"]] for r in rows], float)


def fit_poly(X, y, degree=4, target="delta_p", lo=None, hi=None):
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float)
    exps = exponents(degree, X.shape[1])
    if X.shape[0] < len(exps):
        raise RankDeficientError(f"need >= {len(exps)} rows, got {X.shape[0]}")
    lo = X.min(0) if lo is None else np.asarray(lo, float)
    hi = X.max(0) if hi is None else np.asarray(hi, float)
    if np.any(hi - lo <= 0):
        bad = [VARIABLES[i] for i in np.flatnonzero(hi - lo <= 0)]
        raise RankDeficientError(f"degenerate scaling range for {bad}")
    Z = (X - lo) / (hi - lo)
    A = design_matrix(Z, exps)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    small = s < RCOND * s[0]
    if small.any():
        names = []
        for v in Vt[small]:
            top = np.argsort(-np.abs(v))[:3]
            names.append("+".join(_mono_name(exps[t]) for t in top))
        raise RankDeficientError(f"rank-deficient design; null directions ~ {names}")
    coeffs = Vt.T @ ((U.T @ y) / s)
    surf = PolySurface(target, degree, exps, coeffs, lo, hi)
    res = surf.raw(X) - y
    surf.stats = _residual_stats(res, y)
    return surf


def _mono_name(e):
    parts = [f"{v}^{k}" if k > 1 else v for v, k in zip(VARIABLES, e) if k]
    return "*".join(parts) or "1"


def _residual_stats(res, y):
    vy = float(np.var(y))
    return {
        "error_variance_pct": 100.0 * float(np.var(res)) / vy if vy > 0 else 0.0,
        "max_abs_error": float(np.max(np.abs(res))),
        "rms_error": float(np.sqrt(np.mean(res ** 2))),
    }


def fit_poly4(rows, target, n, degree=4):
    """Fit ``target`` in {delta_p, delta_s} over feasible sweep rows."""
    rows = [r for r in rows if r.get("status", "ok") == "ok"]
    return fit_poly(rows_to_inputs(rows, n), [r[target] for r in rows], degree, target)


def eval_poly4(surface: PolySurface, Ps_out, Vout_ref, Lt, Rt):
    """Clamped duty and an out-of-range flag per point."""
    X = np.column_stack(np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, float))
                                              for a in (Ps_out, Vout_ref, Lt, Rt))))
    return surface(X), surface.out_of_range(X)


def efficiency_penalty(p, rows, dp_surface=None, ds_surface=None, settings=None):
    """Mean of eta(optimal) - eta(fitted duties), phi re-solved per row.

    Either surface may be ``None``, in which case the row's optimal duty is
    used for that coordinate.  Returns ``(mean_penalty, per_row, n_unreachable)``.
    """
    from .optimizer import LossModel, OptSettings, _Problems, solve_phi

    st = settings or OptSettings()
    rows = [r for r in rows if r.get("status", "ok") == "ok"]
    X = rows_to_inputs(rows, p.n)
    dp = dp_surface(X) if dp_surface is not None else np.array([r["delta_p"] for r in rows])
    ds = ds_surface(X) if ds_surface is not None else np.array([r["delta_s"] for r in rows])
    g = lambda k: np.array([r[k] for r in rows], float)
    var = {"Lp": g("Lp"), "Ls": g("Ls"), "Rlp": g("Rlp"), "Rls": g("Rls")}
    model = LossModel(p, "total", st.k_max, st.passes)
    prob = _Problems(model, p.Vin_nominal, g("Vout"), g("Ps_out"), var)
    idx = np.arange(len(rows))
    phi, _, ok = solve_phi(prob, idx, dp, ds, tol=st.root_tol)
    _, r = model.full(prob.Vin, prob.Vout, dp, ds, phi, var)
    pen = np.where(ok, g("efficiency") - r["eff"], np.nan)
    return float(np.nanmean(pen)), pen, int((~ok).sum())


def fit_quality(surface: PolySurface, rows, p, partner: PolySurface | None = None,
                penalty=True, settings=None):
    """Residual statistics and (optionally) the efficiency penalty."""
    rows = [r for r in rows if r.get("status", "ok") == "ok"]
    X = rows_to_inputs(rows, p.n)
    y = np.array([r[surface.target] for r in rows])
    out = _residual_stats(surface.raw(X) - y, y)
    if penalty:
        surf = {surface.target: surface}
        if partner is not None:
            surf[partner.target] = partner
        pen, _, bad = efficiency_penalty(p, rows, surf.get("delta_p"), surf.get("delta_s"),
                                         settings)
        out["efficiency_penalty"] = pen
        out["n_unreachable"] = bad
    return out
