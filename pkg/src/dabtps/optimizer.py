"""Loss-optimal TPS modulation, optimal-control sweeps, ZVS and gain maps.

The power equality is removed by solving phi for the target at each
(delta_p, delta_s); the remaining 2-D box problem is minimized by a
projected quasi-Newton descent with central-difference gradients, run from
several low-discrepancy starts plus the SPS corner.  Everything is
vectorized over independent problems so a sweep can batch many cells.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .core import CircuitParams, ModulationPoint, OperatingPoint, lumped_params, scale_to_lumped
from .ilm import base_power, gain, power_pu, phi_for_power
from .losses import evaluate_batch
from .nifdm import build_network, solve_batch

log = logging.getLogger(__name__)

HALF_PI = math.pi / 2
COSTS = {
    "total": lambda r: r["P_total"],
    "cond": lambda r: r["P_cond"],
    "sw": lambda r: r["P_sw_vi"] + r["P_sw_coss"],
}
VARIANT_KEYS = ("Lp", "Ls", "Llp", "Lls", "Rp", "Rs", "Rlp", "Rls")
SWEEP_COLUMNS = ("Lp", "Ls", "Rlp", "Rls", "Vout", "Ps_out", "delta_p", "delta_s", "phi",
                 "P_total", "Lt", "Rt", "efficiency", "status")


class InfeasibleTarget(ValueError):
    """Requested power is outside the reachable envelope."""


@dataclass(frozen=True)
class OptSettings:
    n_starts: int = 8
    seed: int = 0
    eps_P: float = 10.0  # constraint tolerance on Ps_out [W]
    root_tol: float = 1e-4  # phi solve tolerance [W]
    h: float = 1e-4  # finite-difference step [rad]
    max_iter: int = 30
    ftol: float = 1e-4  # minimum accepted cost decrease [W]
    k_max: int | None = None
    passes: int = 2


@dataclass
class OptResult:
    m: ModulationPoint
    Ps_out: float
    P_total: float
    cost: float
    efficiency: float
    trace: list = field(default_factory=list)  # (start (dp, ds), final cost or nan)
    status: str = "ok"


# ------------------------------------------------------------------ model

class LossModel:
    """Batched (Ps_out, cost) evaluator with optional per-element circuit variants."""

    def __init__(self, p: CircuitParams, cost="total", k_max=None, passes=2):
        if cost not in COSTS:
            raise ValueError(f"cost must be one of {sorted(COSTS)}")
        self.p = p
        self.cost = COSTS[cost]
        self.k_max = k_max or p.k_max
        self.passes = passes
        self.k_int = 3 * self.k_max if (p.Td > 0 and passes > 0) else self.k_max
        self._net = build_network(p, self.k_int)
        self.calls = 0

    def net_for(self, var):
        if not var:
            return self._net
        R = {k: var[k] for k in ("Rp", "Rs", "Rlp", "Rls") if k in var}
        L = {k: var[k] for k in ("Lp", "Ls", "Llp", "Lls") if k in var}
        return build_network(self.p, self.k_int, R=R, **L)

    def full(self, Vin, Vout, dp, ds, phi, var=None):
        self.calls += np.size(dp)
        b = solve_batch(self.p, Vin, Vout, dp, ds, phi, self.k_max, self.passes,
                        net=self.net_for(var))
        return b, evaluate_batch(self.p, b)

    def __call__(self, Vin, Vout, dp, ds, phi, var=None):
        _, r = self.full(Vin, Vout, dp, ds, phi, var)
        return r["Ps_out"], self.cost(r)


def _take(var, idx):
    return {k: v[idx] for k, v in var.items()} if var else None


class _Problems:
    """Flat arrays of independent problems (cell x start)."""

    def __init__(self, model, Vin, Vout, target, var=None):
        self.model = model
        B = np.broadcast(np.asarray(Vin), np.asarray(Vout), np.asarray(target)).size
        self.B = max(B, max((np.size(v) for v in (var or {}).values()), default=1))
        f = lambda x: np.broadcast_to(np.asarray(x, float), (self.B,)).copy()
        self.Vin, self.Vout, self.target = f(Vin), f(Vout), f(target)
        self.var = {k: f(v) for k, v in (var or {}).items()}

    def eval(self, idx, dp, ds, phi):
        if idx.size == 0:
            return np.zeros(0), np.zeros(0)
        return self.model(self.Vin[idx], self.Vout[idx], dp, ds, phi, _take(self.var, idx))

    def lumped_L(self, idx):
        p = self.model.p
        n2 = p.n ** 2
        g = lambda k: self.var[k][idx] if k in self.var else getattr(p, k)
        return g("Lp") + g("Llp") + n2 * (g("Ls") + g("Lls"))


# ------------------------------------------------------------------ phi solve

def solve_phi(prob: _Problems, idx, dp, ds, phi0=None, slope0=None, tol=1e-4, maxit=40):
    """Safeguarded secant for Ps_out(phi) = target on [0, pi/2].

    Returns ``(phi, cost, ok)``; ``ok`` is False where the target is not
    reachable or the iteration failed.
    """
    idx = np.asarray(idx)
    N = idx.size
    tgt = prob.target[idx]
    if phi0 is None:
        # ideal-model seed from the lumped inductance
        L = prob.lumped_L(idx)
        p = prob.model.p
        mg = gain(prob.Vin[idx], prob.Vout[idx], p.n)
        pb = base_power(prob.Vin[idx], p.fsw, L)
        phi0 = phi_for_power(dp, ds, tgt / pb, mg)
        h = 1e-3
        slope0 = (power_pu(dp, ds, np.minimum(phi0 + h, HALF_PI), mg)
                  - power_pu(dp, ds, np.maximum(phi0 - h, 0.0), mg)) / (2 * h) * pb
    x = np.clip(np.asarray(phi0, float), 0.0, HALF_PI).copy()
    s = np.asarray(slope0, float).copy() if slope0 is not None else np.full(N, np.nan)
    lo = np.zeros(N)
    hi = np.full(N, HALF_PI)
    hi_checked = np.zeros(N, bool)
    P, c = prob.eval(idx, dp, ds, x)
    g = P - tgt
    cost = c.copy()
    ok = np.abs(g) < tol
    dead = np.zeros(N, bool)
    for _ in range(maxit):
        lo = np.where(g < 0, np.maximum(lo, x), lo)
        upd = g > 0
        hi = np.where(upd, np.minimum(hi, x), hi)
        hi_checked |= upd
        # target above the value at pi/2: unreachable
        dead |= (~ok) & (x >= HALF_PI) & (g < 0)
        dead |= (~ok) & (hi - lo < 1e-13)
        act = ~ok & ~dead
        if not act.any():
            break
        a = np.flatnonzero(act)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x[a] - g[a] / s[a]
        good = np.isfinite(xn) & (s[a] > 0)
        xn = np.where(good, xn, 0.5 * (lo[a] + hi[a]))
        # overshoot past the unchecked upper limit: probe pi/2 itself
        over = xn >= hi[a]
        xn = np.where(over & ~hi_checked[a], hi[a], xn)
        out = (xn <= lo[a]) | ((xn >= hi[a]) & hi_checked[a])
        xn = np.where(out, 0.5 * (lo[a] + hi[a]), xn)
        Pn, cn = prob.eval(idx[a], dp[a], ds[a], xn)
        gn = Pn - tgt[a]
        dx = xn - x[a]
        with np.errstate(divide="ignore", invalid="ignore"):
            sn = (gn - g[a]) / dx
        s[a] = np.where(np.abs(dx) > 1e-14, sn, s[a])
        x[a], g[a], cost[a] = xn, gn, cn
        ok[a] = np.abs(gn) < tol
    return x, cost, ok & ~dead


# ------------------------------------------------------------------ descent

def _starts(n_starts, seed):
    pts = [(0.0, 0.0)]
    if n_starts > 0:
        sob = qmc.Sobol(2, scramble=True, seed=seed)
        m = int(math.ceil(math.log2(max(n_starts, 1))))
        u = sob.random_base2(m)[:n_starts]
        pts += [tuple(HALF_PI * r) for r in u]
    return np.array(pts)


def _descend(prob: _Problems, dp, ds, phi, cost, st: OptSettings):
    """Projected quasi-Newton descent of the reduced cost; in-place on all problems."""
    B = dp.size
    h = st.h
    H = np.tile(np.eye(2) * 0.01, (B, 1, 1))
    G_prev = np.full((B, 2), np.nan)
    x_prev = np.full((B, 2), np.nan)
    done = ~np.isfinite(cost)
    iters = np.zeros(B, int)
    for _ in range(st.max_iter):
        a = np.flatnonzero(~done)
        if a.size == 0:
            break
        iters[a] += 1
        x = np.stack([dp[a], ds[a]], 1)
        # six 3-D probes (one-sided at the box faces)
        up = np.minimum(x + h, HALF_PI)
        dn = np.maximum(x - h, 0.0)
        fu = np.minimum(phi[a] + h, HALF_PI)
        fd = np.maximum(phi[a] - h, 0.0)
        A = a.size
        pdp = np.concatenate([up[:, 0], dn[:, 0], x[:, 0], x[:, 0], x[:, 0], x[:, 0]])
        pds = np.concatenate([x[:, 1], x[:, 1], up[:, 1], dn[:, 1], x[:, 1], x[:, 1]])
        pph = np.concatenate([phi[a], phi[a], phi[a], phi[a], fu, fd])
        P6, c6 = prob.eval(np.tile(a, 6), pdp, pds, pph)
        P6 = P6.reshape(6, A)
        c6 = c6.reshape(6, A)
        ddp = up[:, 0] - dn[:, 0]
        dds = up[:, 1] - dn[:, 1]
        dph = fu - fd
        Pd = np.stack([(P6[0] - P6[1]) / ddp, (P6[2] - P6[3]) / dds], 1)
        cd = np.stack([(c6[0] - c6[1]) / ddp, (c6[2] - c6[3]) / dds], 1)
        Pf = (P6[4] - P6[5]) / dph
        cf = (c6[4] - c6[5]) / dph
        bad = ~(Pf > 0)
        G = cd - (cf / np.where(bad, 1.0, Pf))[:, None] * Pd
        # projection onto the active box faces
        blocked = ((x <= 0) & (G > 0)) | ((x >= HALF_PI) & (G < 0))
        Gp = np.where(blocked, 0.0, G)
        gn = np.linalg.norm(Gp, axis=1)
        fin = bad | (gn < 1e-9)
        # BFGS update of the inverse Hessian
        s_ = x - x_prev[a]
        y_ = Gp - G_prev[a]
        sy = np.einsum("ij,ij->i", s_, y_)
        upd = np.isfinite(sy) & (sy > 1e-12)
        for j in np.flatnonzero(upd):
            Hj = H[a[j]]
            rho = 1.0 / sy[j]
            V = np.eye(2) - rho * np.outer(s_[j], y_[j])
            H[a[j]] = V @ Hj @ V.T + rho * np.outer(s_[j], s_[j])
        d_q = -np.einsum("bij,bj->bi", H[a], Gp)
        d_q = np.where(blocked, 0.0, d_q)
        d_q = np.where((np.einsum("ij,ij->i", d_q, Gp) < 0)[:, None], d_q, -Gp * 0.01)
        d_s = -Gp / np.where(gn > 0, gn, 1.0)[:, None]
        cb = np.full(A, np.inf)
        Xb = x.copy()
        phib = phi[a].copy()
        stages = ([d_q, 0.03 * d_s], [0.3 * d_q, 0.1 * d_s, 0.01 * d_s, 0.003 * d_s, 0.001 * d_s])
        todo = np.flatnonzero(~fin)
        for trials in stages:
            if todo.size == 0:
                break
            T = len(trials)
            xs = x[todo]
            X = np.clip(np.concatenate([xs + d[todo] for d in trials]), 0.0, HALF_PI)
            rep = np.tile(todo, T)
            dX = X - x[rep]
            Pf_r = np.where(bad, 1.0, Pf)[rep]
            phi_pred = phi[a][rep] - np.einsum("ij,ij->i", Pd[rep], dX) / Pf_r
            phi_t, c_t, ok_t = solve_phi(prob, a[rep], X[:, 0], X[:, 1],
                                         np.clip(phi_pred, 0, HALF_PI),
                                         np.where(bad, np.nan, Pf)[rep], st.root_tol)
            c_t = np.where(ok_t, c_t, np.inf).reshape(T, todo.size)
            best = np.argmin(c_t, axis=0)
            cbest = c_t[best, np.arange(todo.size)]
            k = best * todo.size + np.arange(todo.size)
            cb[todo] = cbest
            Xb[todo] = X[k]
            phib[todo] = phi_t[k]
            todo = todo[~(cbest < cost[a[todo]] - st.ftol)]
        improve = (cb < cost[a] - st.ftol) & ~fin
        j = np.flatnonzero(improve)
        x_prev[a] = x
        G_prev[a] = Gp
        dp[a[j]] = Xb[j, 0]
        ds[a[j]] = Xb[j, 1]
        phi[a[j]] = phib[j]
        cost[a[j]] = cb[j]
        done[a[~improve]] = True
    return iters


def _as_extra(extra):
    """Extra starts as (cells, E, 2); a (cells, 2) array means one per cell."""
    extra = np.asarray(extra, float)
    return extra[:, None, :] if extra.ndim == 2 else extra


def _optimize_flat(prob: _Problems, cells, st: OptSettings, extra_starts=None):
    """Run all starts of all cells; ``cells`` maps problem rows to cell ids."""
    starts = _starts(st.n_starts, st.seed)
    ncell = int(cells.max()) + 1 if cells.size else 0
    S = starts.shape[0]
    if extra_starts is not None:
        extra_starts = _as_extra(extra_starts)
        S += extra_starts.shape[1]
    # problem rows: cell-major, start-minor
    dp = np.repeat(starts[:, 0][None], ncell, 0)
    ds = np.repeat(starts[:, 1][None], ncell, 0)
    if extra_starts is not None:
        dp = np.concatenate([dp, extra_starts[:, :, 0]], 1)
        ds = np.concatenate([ds, extra_starts[:, :, 1]], 1)
    dp = dp.ravel().copy()
    ds = ds.ravel().copy()
    start_pts = np.stack([dp, ds], 1).copy()
    idx = np.arange(dp.size)
    phi, cost, ok = solve_phi(prob, idx, dp, ds, tol=st.root_tol)
    # pull unreachable starts toward the SPS corner
    for _ in range(4):
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            break
        dp[bad] *= 0.5
        ds[bad] *= 0.5
        phi[bad], cost[bad], ok[bad] = solve_phi(prob, bad, dp[bad], ds[bad], tol=st.root_tol)
    cost = np.where(ok, cost, np.nan)
    _descend(prob, dp, ds, phi, cost, st)
    return dp.reshape(ncell, S), ds.reshape(ncell, S), phi.reshape(ncell, S), \
        cost.reshape(ncell, S), start_pts.reshape(ncell, S, 2)


def _finish(prob: _Problems, rows, dp, ds, phi):
    """Full evaluation at the chosen points (one per cell)."""
    _, r = prob.model.full(prob.Vin[rows], prob.Vout[rows], dp, ds, phi, _take(prob.var, rows))
    return r


def _ilm_envelope(p: CircuitParams, op: OperatingPoint, L):
    return gain(op.Vin, op.Vout, p.n) * base_power(op.Vin, p.fsw, L) * math.pi / 4


def optimize_tps(p: CircuitParams, op: OperatingPoint, cost="total", n_starts=8, seed=0,
                 settings: OptSettings | None = None, extra_start=None) -> OptResult:
    """Minimize the selected loss at Ps_out = op.Ps_target over [0, pi/2]^3."""
    st = settings or OptSettings(n_starts=n_starts, seed=seed)
    if op.Ps_target <= 0:
        raise InfeasibleTarget("target power must be positive")
    Lt = lumped_params(p)["Lt"]
    if op.Ps_target > _ilm_envelope(p, op, Lt):
        raise InfeasibleTarget(f"{op.Ps_target} W exceeds the ideal-model maximum")
    model = LossModel(p, cost, st.k_max, st.passes)
    res = _optimize_cells(model, [op.Vin], [op.Vout], [op.Ps_target], None, st,
                          None if extra_start is None else np.array([extra_start], float))[0]
    if res.status != "ok":
        raise InfeasibleTarget("no start satisfied the power constraint")
    return res


def _optimize_cells(model, Vin, Vout, target, var, st, extra=None):
    """Optimize many cells at once.  Returns a list of OptResult (grid order)."""
    C = len(Vin)
    S = st.n_starts + 1 + (0 if extra is None else _as_extra(extra).shape[1])
    rep = lambda a: np.repeat(np.asarray(a, float), S)
    pv = {k: rep(v) for k, v in (var or {}).items()}
    prob = _Problems(model, rep(Vin), rep(Vout), rep(target), pv)
    cells = np.repeat(np.arange(C), S)
    dp, ds, phi, cost, starts = _optimize_flat(prob, cells, st, extra)
    c = np.where(np.isfinite(cost), cost, np.inf)
    best = np.argmin(c, axis=1)
    ar = np.arange(C)
    feas = np.isfinite(c[ar, best])
    rows = ar * S + best
    bdp, bds, bph = dp[ar, best], ds[ar, best], phi[ar, best]
    fin = _finish(prob, rows, bdp, bds, bph)
    out = []
    for i in range(C):
        trace = [(tuple(map(float, starts[i, j])), float(cost[i, j])) for j in range(S)]
        if not feas[i]:
            out.append(OptResult(ModulationPoint(0.0, 0.0, 0.0), math.nan, math.nan, math.nan,
                                 math.nan, trace, "infeasible"))
            continue
        Ps = float(fin["Ps_out"][i])
        status = "ok" if abs(Ps - target[i]) <= st.eps_P else "constraint_violated"
        out.append(OptResult(ModulationPoint(float(bdp[i]), float(bds[i]), float(bph[i])), Ps,
                             float(fin["P_total"][i]), float(c[i, best[i]]),
                             float(fin["eff"][i]), trace, status))
    return out


def sps_baseline(p: CircuitParams, op: OperatingPoint, cost="total", settings=None):
    """SPS feasible point (dp = ds = 0, phi solving the power target): (phi, cost)."""
    st = settings or OptSettings()
    prob = _Problems(LossModel(p, cost, st.k_max, st.passes), op.Vin, op.Vout, op.Ps_target)
    phi, c, ok = solve_phi(prob, np.array([0]), np.zeros(1), np.zeros(1), tol=st.root_tol)
    if not ok[0]:
        raise InfeasibleTarget("SPS cannot reach the target")
    return float(phi[0]), float(c[0])


# ------------------------------------------------------------------ sweeps

@dataclass(frozen=True)
class GridSpec:
    """Sweep axes; Ls and Rls are physical secondary values, Vout physical."""

    Vout: tuple
    Ps_out: tuple
    Lp: tuple
    Ls: tuple
    Rlp: tuple
    Rls: tuple
    Vin: float = 160.0

    AXES = ("Vout", "Ps_out", "Lp", "Ls", "Rlp", "Rls")

    @classmethod
    def from_dict(cls, d):
        def axis(v):
            if isinstance(v, dict):
                a, b, s = float(v["start"]), float(v["stop"]), float(v["step"])
                n = int(round((b - a) / s)) + 1
                return tuple(float(x) for x in a + s * np.arange(n))
            return tuple(float(x) for x in np.atleast_1d(v))
        kw = {k: axis(d[k]) for k in cls.AXES}
        return cls(**kw, Vin=float(d.get("Vin", 160.0)))

    def cells(self):
        return list(itertools.product(*(getattr(self, a) for a in self.AXES)))


def _sweep_chunk(args):
    p, cells, Vin, st, cost = args
    model = LossModel(p, cost, st.k_max, st.passes)
    a = np.array(cells, float)
    var = {"Lp": a[:, 2], "Ls": a[:, 3], "Rlp": a[:, 4], "Rls": a[:, 5]}
    res = _optimize_cells(model, np.full(len(a), Vin), a[:, 0], a[:, 1], var, st)
    rows = []
    n2 = p.n ** 2
    Rp, Rs = p.resistance("Rp", 1)[0], p.resistance("Rs", 1)[0]
    for (Vo, Ps, Lp, Ls, Rlp, Rls), r in zip(cells, res):
        Lt = Lp + p.Llp + n2 * (Ls + p.Lls)
        Rt = Rp + Rlp + n2 * (Rs + Rls)
        rows.append({"Lp": Lp, "Ls": Ls, "Rlp": Rlp, "Rls": Rls, "Vout": Vo, "Ps_out": Ps,
                     "delta_p": r.m.delta_p, "delta_s": r.m.delta_s, "phi": r.m.phi,
                     "P_total": r.P_total, "Lt": Lt, "Rt": Rt, "efficiency": r.efficiency,
                     "status": r.status})
    return rows


def sweep_optimal_dataset(p: CircuitParams, grid: GridSpec, seed=0, n_starts=8, cost="total",
                          chunk=128, workers=1, settings=None):
    """One row per grid cell in grid order; infeasible cells carry their status.

    ``Lp``, ``Ls`` replace the series inductors and ``Rlp``, ``Rls`` the
    leakage resistances (flat over harmonics) of the base circuit.
    """
    st = settings or OptSettings(n_starts=n_starts, seed=seed)
    cells = grid.cells()
    jobs = [(p, cells[i:i + chunk], grid.Vin, st, cost) for i in range(0, len(cells), chunk)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_sweep_chunk, jobs))
    else:
        parts = [_sweep_chunk(j) for j in jobs]
    return [r for part in parts for r in part]


def _neighbour_starts(grid: GridSpec, rows):
    """Per cell: optimal duties of its axis neighbours (own duties pad)."""
    shape = tuple(len(getattr(grid, a)) for a in grid.AXES)
    own = np.array([[r["delta_p"], r["delta_s"]] if r["status"] == "ok" else [0.0, 0.0]
                    for r in rows])
    ok = np.array([r["status"] == "ok" for r in rows])
    E = 2 * len(shape)
    out = np.repeat(own[:, None, :], E, 1)
    for flat in range(len(rows)):
        ix = np.unravel_index(flat, shape)
        e = 0
        for ax in range(len(shape)):
            for step in (-1, 1):
                j = list(ix)
                j[ax] += step
                if 0 <= j[ax] < shape[ax]:
                    nb = np.ravel_multi_index(tuple(j), shape)
                    if ok[nb]:
                        out[flat, e] = own[nb]
                e += 1
    return out


def refine_sweep(p: CircuitParams, grid: GridSpec, rows, rounds=1, cost="total", chunk=64,
                 settings=None):
    """Continuation pass: re-descend every cell from its neighbours' optima.

    A cell's row is replaced only when the new point is feasible and cheaper,
    so each round is monotone in the cost.  Returns (rows, n_improved).
    """
    st = settings or OptSettings()
    st0 = dataclasses.replace(st, n_starts=0)
    rows = [dict(r) for r in rows]
    cells = grid.cells()
    total = 0
    for _ in range(rounds):
        extra = _neighbour_starts(grid, rows)
        improved = 0
        for i in range(0, len(cells), chunk):
            part = cells[i:i + chunk]
            a = np.array(part, float)
            var = {"Lp": a[:, 2], "Ls": a[:, 3], "Rlp": a[:, 4], "Rls": a[:, 5]}
            res = _optimize_cells(LossModel(p, cost, st.k_max, st.passes),
                                  np.full(len(a), grid.Vin), a[:, 0], a[:, 1], var, st0,
                                  extra[i:i + chunk])
            for k, r in enumerate(res):
                old = rows[i + k]
                better = old["status"] != "ok" or r.P_total < old["P_total"] - 1e-9
                if r.status == "ok" and better:
                    old.update(delta_p=r.m.delta_p, delta_s=r.m.delta_s, phi=r.m.phi,
                               P_total=r.P_total, efficiency=r.efficiency, status="ok")
                    improved += 1
        total += improved
        if improved == 0:
            break
    return rows, total


def _fmt(v):
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (v if k == "status" else float(v)) for k, v in r.items()})
    return rows


# ------------------------------------------------------------------ maps

def optimize_grid(p, Vouts, Ps_list, Vin=None, cost="total", settings=None, extra=None):
    """Optimal points over a (Vout, Ps) grid; returns results in row-major order."""
    st = settings or OptSettings()
    Vin = p.Vin_nominal if Vin is None else Vin
    cells = list(itertools.product(Vouts, Ps_list))
    model = LossModel(p, cost, st.k_max, st.passes)
    res = _optimize_cells(model, [Vin] * len(cells), [c[0] for c in cells],
                          [c[1] for c in cells], None, st, extra)
    return res


def zvs_map(p: CircuitParams, Vouts, Ps_list, results=None, settings=None, Vin=None):
    """Count of fully soft-switched legs per (Vout, Ps) cell (-1 if infeasible)."""
    from .losses import ZVS_FULL
    st = settings or OptSettings()
    Vin = p.Vin_nominal if Vin is None else Vin
    results = results or optimize_grid(p, Vouts, Ps_list, Vin, settings=st)
    model = LossModel(p, "total", st.k_max, st.passes)
    out = np.full((len(Vouts), len(Ps_list)), -1, int)
    dV = np.full((len(Vouts), len(Ps_list), 4), np.nan)
    for i, (Vo, Ps) in enumerate(itertools.product(Vouts, Ps_list)):
        r = results[i]
        if r.status != "ok":
            continue
        b, _ = model.full(Vin, Vo, r.m.delta_p, r.m.delta_s, r.m.phi)
        link = np.array([Vin, Vin, Vo, Vo])
        d = b.dV[0]
        dV.flat[i * 4:(i + 1) * 4] = d
        out.flat[i] = int(np.sum(d < ZVS_FULL * link))
    return out, dV


def adaptive_gain_map(p_nom: CircuitParams, Lt_actual, Rt_actual, Vouts, Ps_list,
                      settings=None, Vin=None):
    """Efficiency gain of re-optimized duties over nominal-parameter duties.

    Both candidates run on the actual-parameter model with phi re-solved for
    the same output power.  The actual-parameter optimization also starts
    from the nominal duties, so the adapted point is never worse than them.
    Returns ``(delta_eta, eta_adapted, eta_static)`` arrays (nV, nP).
    """
    st = settings or OptSettings()
    Vin = p_nom.Vin_nominal if Vin is None else Vin
    p_act = scale_to_lumped(p_nom, Lt_actual, Rt_actual)
    nom = optimize_grid(p_nom, Vouts, Ps_list, Vin, settings=st)
    duties = np.array([[r.m.delta_p, r.m.delta_s] if r.status == "ok" else [0.0, 0.0]
                       for r in nom])
    act = optimize_grid(p_act, Vouts, Ps_list, Vin, settings=st, extra=duties)
    cells = list(itertools.product(Vouts, Ps_list))
    model = LossModel(p_act, "total", st.k_max, st.passes)
    prob = _Problems(model, Vin, [c[0] for c in cells], [c[1] for c in cells])
    idx = np.arange(len(cells))
    phi, _, ok = solve_phi(prob, idx, duties[:, 0], duties[:, 1], tol=st.root_tol)
    _, r = model.full(Vin, prob.Vout, duties[:, 0], duties[:, 1], phi)
    eta_static = np.where(ok & np.array([x.status == "ok" for x in nom]), r["eff"], np.nan)
    eta_adapt = np.array([x.efficiency if x.status == "ok" else np.nan for x in act])
    shape = (len(Vouts), len(Ps_list))
    return ((eta_adapt - eta_static).reshape(shape), eta_adapt.reshape(shape),
            eta_static.reshape(shape))
