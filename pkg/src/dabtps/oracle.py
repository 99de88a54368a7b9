"""Time-domain reference solver for the parasitic DAB network.

Independent of the harmonic model: the R-L-C network is written as a
linear state-space system, driven by the four leg node voltages.  While a
leg is gated its node is held at a rail; during deadtime it floats on the
device capacitance (charge-equivalent constant) and is clamped by the body
diodes.  Segments are propagated with exact matrix exponentials, deadtime
windows with fine exponential steps.  Periodic steady state is found by
half-wave shooting: x(t + T/2) = -x(t) for the network states.

Resistances use their fundamental (k = 1) values.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm

from .core import CircuitParams, ModulationPoint, OperatingPoint, charge_equivalent_capacitance

PI = math.pi
DRIVEN, FLOAT, DIODE = 0, 1, 2


class OracleError(RuntimeError):
    pass


def _network_matrices(p: CircuitParams):
    """Return (A, Bx, nz, names): z' = A z + Bx @ [x1, x2, x3, x4]."""
    n = p.n
    n2 = n * n
    r = lambda name: float(p.resistance(name, 1)[0])
    Rp, Rlp = r("Rp"), r("Rlp")
    Rs, Rls = n2 * r("Rs"), n2 * r("Rls")
    Lp, Llp, Lm = p.Lp, p.Llp, p.Lm
    Ls, Lls = n2 * p.Ls, n2 * p.Lls
    # bridge voltages from leg nodes
    Gp = np.array([1.0, -1.0, 0.0, 0.0])
    Gs = np.array([0.0, 0.0, n, -n])
    caps = (p.Cip, p.Cis, p.Cps)
    if all(c == 0 for c in caps):
        # z = [ip, is]; inductance matrix with magnetizing coupling
        Lmat = np.array([[Lp + Llp + Lm, Lm], [Lm, Ls + Lls + Lm]])
        Li = np.linalg.inv(Lmat)
        A = -Li @ np.diag([Rp + Rlp, Rs + Rls])
        Bx = Li @ np.vstack([Gp, Gs])
        return A, Bx, ("ip", "is")
    Cn = np.array([[p.Cip + p.Cps, -p.Cps], [-p.Cps, p.Cis + p.Cps]])
    if abs(np.linalg.det(Cn)) < 1e-40:
        raise OracleError("node capacitance matrix is singular; give Cip/Cis or none at all")
    if Llp <= 0 or Lls <= 0:
        raise OracleError("full network needs positive leakage inductances")
    Ci = np.linalg.inv(Cn)
    # z = [ip, ilp, ils, is, vA, vB]
    D = 1 + Lm / Llp + Lm / Lls
    # vM = gM @ z
    gM = Lm / D * np.array([0, -Rlp / Llp, -Rls / Lls, 0, 1 / Llp, 1 / Lls])
    A = np.zeros((6, 6))
    Bx = np.zeros((6, 4))
    A[0, 0], A[0, 4] = -Rp / Lp, -1 / Lp
    Bx[0] = Gp / Lp
    A[1] = (np.array([0, -Rlp, 0, 0, 1, 0]) - gM) / Llp
    A[2] = (np.array([0, 0, -Rls, 0, 0, 1]) - gM) / Lls
    A[3, 3], A[3, 5] = -Rs / Ls, -1 / Ls
    Bx[3] = Gs / Ls
    inj = np.array([[1, -1, 0, 0, 0, 0], [0, 0, -1, 1, 0, 0]], float)
    A[4:6] = Ci @ inj
    return A, Bx, ("ip", "ilp", "ils", "is", "vA", "vB")


class _System:
    def __init__(self, p, Vin, Vout):
        self.A, self.Bx, self.names = _network_matrices(p)
        self.nz = self.A.shape[0]
        self.ip = 0
        self.is_ = self.names.index("is")
        n = p.n
        self.n = n
        self.rails = np.array([Vin, Vin, Vout, Vout])
        Cp = float(charge_equivalent_capacitance(p.coss_primary, min(Vin, p.coss_primary.vmax))) \
            if p.coss_primary is not None else 0.0
        Cs = float(charge_equivalent_capacitance(p.coss_secondary, min(Vout, p.coss_secondary.vmax))) \
            if p.coss_secondary is not None else 0.0
        # dx_j/dt = coef_j * current
        self.coef = np.array([-1 / (2 * Cp), 1 / (2 * Cp), -n / (2 * Cs), n / (2 * Cs)]) \
            if Cp > 0 and Cs > 0 else None
        self._cache = {}
        N = self.nz + 4
        self.N = N

    def matrix(self, mask):
        N = self.N
        M = np.zeros((N, N))
        M[: self.nz, : self.nz] = self.A
        M[: self.nz, self.nz:] = self.Bx
        for j in range(4):
            if mask[j]:
                src = self.ip if j < 2 else self.is_
                M[self.nz + j, src] = self.coef[j]
        return M

    def step(self, mask, dt):
        key = (tuple(mask), dt)
        E = self._cache.get(key)
        if E is None:
            E = expm(self.matrix(mask) * dt)
            if len(self._cache) < 256:
                self._cache[key] = E
        return E

    def current_of_leg(self, X, j):
        return X[self.ip] if j < 2 else X[self.is_]


def _schedule(m: ModulationPoint, wTd):
    """Gate edges: (angle, leg, target level 0/1)."""
    dp, ds, phi = m.delta_p, m.delta_s, m.phi
    edges = [
        (dp, 0, 1), (PI + dp, 0, 0),
        (-dp, 1, 0), (PI - dp, 1, 1),
        (phi + ds, 2, 1), (PI + phi + ds, 2, 0),
        (phi - ds, 3, 0), (PI + phi - ds, 3, 1),
    ]
    return [(a % (2 * PI), j, lvl) for a, j, lvl in edges]


def _start_angle(edges, wTd):
    """Midpoint of the largest interval with every leg gated."""
    starts = sorted(a for a, _, _ in edges)
    best, best_mid = -1.0, 0.0
    for i, a in enumerate(starts):
        nxt = starts[(i + 1) % len(starts)] + (2 * PI if i + 1 == len(starts) else 0)
        gap = nxt - (a + wTd)
        if gap > best:
            best, best_mid = gap, a + wTd + 0.5 * gap
    if best <= 0:
        raise OracleError("deadtime windows cover the whole period")
    return best_mid % (2 * PI)


def _levels_at(theta, edges):
    """Gated level (0/1) of each leg at angle theta (outside windows)."""
    lvl = np.zeros(4)
    for j in range(4):
        own = sorted(((a - theta) % (2 * PI), l) for a, jj, l in edges if jj == j)
        # last edge before theta is the one with the largest forward distance
        lvl[j] = own[-1][1]
    return lvl


class _HalfPeriod:
    def __init__(self, sys, m, omega, Td, steps):
        self.sys, self.omega, self.Td = sys, omega, Td
        wTd = omega * Td
        self.edges = _schedule(m, wTd)
        self.theta0 = _start_angle(self.edges, wTd) if Td > 0 else \
            _start_angle(self.edges, 0.0)
        self.lvl0 = _levels_at(self.theta0, self.edges)
        ev = []
        for a, j, l in self.edges:
            rel = (a - self.theta0) % (2 * PI)
            if rel < PI:
                ev.append((rel / omega, j, l))
        self.events = sorted(ev)
        self.T2 = PI / omega
        self.h = Td / steps if Td > 0 else 0.0

    def run(self, z0, record=False):
        """Propagate half a period; returns (z_end, Ep, Es, x_end, dV, trace)."""
        sys = self.sys
        nz = sys.nz
        X = np.concatenate([z0, self.lvl0 * sys.rails])
        state = [DRIVEN] * 4
        target = list(self.lvl0)
        t = 0.0
        Ep = Es = 0.0
        dV = np.zeros(4)
        trace = [(t, X.copy())] if record else None
        # pending actions: (time, kind, leg, level)
        actions = []
        for te, j, l in self.events:
            if self.Td > 0:
                actions.append((te, 0, j, l))  # release gate -> float
                actions.append((te + self.Td, 1, j, l))  # drive to new level
            else:
                actions.append((te, 1, j, l))
        actions.sort()
        actions.append((self.T2, 2, -1, -1))

        def vp(X):
            return X[nz] - X[nz + 1]

        def vs(X):
            return sys.n * (X[nz + 2] - X[nz + 3])

        def advance(X, mask, dt):
            return sys.step(mask, dt) @ X

        def energy(X0, X1, dt, fl):
            # primary/secondary bridge energy over a step
            if fl[0] or fl[1]:
                e_p = 0.5 * dt * (vp(X0) * X0[sys.ip] + vp(X1) * X1[sys.ip])
            else:
                e_p = None
            if fl[2] or fl[3]:
                e_s = 0.5 * dt * (vs(X0) * X0[sys.is_] + vs(X1) * X1[sys.is_])
            else:
                e_s = None
            return e_p, e_s

        # integrals of ip, is over driven stretches via augmented exponential
        for ta, kind, j, l in actions:
            # propagate from t to ta
            while t < ta - 1e-18:
                mask = tuple(s == FLOAT for s in state)
                floating = any(mask) or any(s == DIODE for s in state)
                if not floating:
                    dt = ta - t
                    X1, qp, qs = self._exact_driven(X, dt)
                    Ep += vp(X) * qp
                    Es += vs(X) * qs
                    X, t = X1, ta
                    if record:
                        trace.append((t, X.copy()))
                    continue
                dt = min(self.h, ta - t)
                X1 = advance(X, mask, dt)
                # diode clamps of floating legs
                frac, leg, rail = 1.0, -1, 0.0
                for k in range(4):
                    if mask[k]:
                        x0, x1 = X[nz + k], X1[nz + k]
                        top = sys.rails[k]
                        if x1 > top:
                            f = (top - x0) / (x1 - x0)
                            if f < frac:
                                frac, leg, rail = f, k, top
                        elif x1 < 0:
                            f = (0 - x0) / (x1 - x0)
                            if f < frac:
                                frac, leg, rail = f, k, 0.0
                if leg >= 0:
                    dt = max(frac, 0.0) * dt
                    X1 = advance(X, mask, dt) if dt > 0 else X.copy()
                    X1[nz + leg] = rail
                ep, es = energy(X, X1, dt, mask)
                if ep is None:
                    ep = vp(X) * 0.5 * dt * (X[sys.ip] + X1[sys.ip])
                if es is None:
                    es = vs(X) * 0.5 * dt * (X[sys.is_] + X1[sys.is_])
                Ep += ep
                Es += es
                X, t = X1, t + dt
                if leg >= 0:
                    state[leg] = DIODE
                # release diode-held legs when current pushes inward
                for k in range(4):
                    if state[k] == DIODE:
                        drift = sys.coef[k] * sys.current_of_leg(X, k)
                        at_top = X[nz + k] >= sys.rails[k] - 1e-12 * sys.rails[k]
                        if (at_top and drift < 0) or (not at_top and drift > 0):
                            state[k] = FLOAT
                if record:
                    trace.append((t, X.copy()))
            if kind == 0:
                state[j] = FLOAT
                # a leg whose current pushes it outward stays on its diode
                drift = sys.coef[j] * sys.current_of_leg(X, j)
                at_top = target[j] == 1
                if (at_top and drift > 0) or (not at_top and drift < 0):
                    state[j] = DIODE
                target[j] = l
            elif kind == 1:
                new = l * sys.rails[j]
                dV[j] = abs(new - X[nz + j])
                X[nz + j] = new
                state[j] = DRIVEN
                target[j] = l
                if record:
                    trace.append((t, X.copy()))
        return X[:nz].copy(), Ep, Es, X[nz:].copy(), dV, trace

    def _exact_driven(self, X, dt):
        """Exact propagation with all legs held; also returns int ip, int is."""
        sys = self.sys
        N = sys.N
        key = ("aug", dt)
        E = sys._cache.get(key)
        if E is None:
            M = np.zeros((N + 2, N + 2))
            M[:N, :N] = sys.matrix((False,) * 4)
            M[N, sys.ip] = 1.0
            M[N + 1, sys.is_] = 1.0
            E = expm(M * dt)
            if len(sys._cache) < 256:
                sys._cache[key] = E
        Y = E @ np.concatenate([X, [0.0, 0.0]])
        return Y[:N], Y[N], Y[N + 1]


def time_domain_oracle(p: CircuitParams, op: OperatingPoint, m: ModulationPoint,
                       steps_per_deadtime=200, max_iter=40, tol=1e-10, samples=0):
    """Periodic steady state of the switched network.

    Returns a dict with Pp_ac, Ps_ac (bridge powers, Ps_ac < 0 forward),
    per-leg residual voltage at turn-on, the periodicity residual, the
    relative power change between two successive half periods and, if
    ``samples`` > 0, sampled waveforms.
    """
    sys = _System(p, op.Vin, op.Vout)
    if p.Td > 0 and sys.coef is None:
        raise OracleError("deadtime needs Coss curves")
    omega = 2 * PI * p.fsw
    hp = _HalfPeriod(sys, m, omega, p.Td, steps_per_deadtime)
    nz = sys.nz

    def F(z):
        z1, *_ = hp.run(z)
        return z1 + z

    def jac(z, f):
        J = np.zeros((nz, nz))
        for k in range(nz):
            d = np.zeros(nz)
            d[k] = 1e-3
            J[:, k] = (F(z + d) - f) / d[k]
        return J

    # damped Newton with a finite-difference Jacobian, refreshed on stalls
    z = np.zeros(nz)
    f = F(z)
    J = jac(z, f)
    fn = np.linalg.norm(f)
    for it in range(max_iter):
        if fn < tol * (1 + np.linalg.norm(z)) * 1e2:
            break
        step = np.linalg.solve(J, f)
        lam = 1.0
        for _ in range(8):
            zt = z - lam * step
            ft = F(zt)
            if np.linalg.norm(ft) < fn:
                break
            lam *= 0.5
        else:
            J = jac(z, f)
            continue
        if np.linalg.norm(ft) > 0.25 * fn:
            J = jac(zt, ft)
        z, f, fn = zt, ft, np.linalg.norm(ft)
    else:
        raise OracleError("no periodic steady state within the iteration budget")
    z1, Ep1, Es1, x1, dV, tr = hp.run(z, record=samples > 0)
    # second half by symmetry: run from the mirrored state, compare energies
    # the next half period starts from -z1 in mirrored coordinates
    _, Ep2, _, _, _, _ = hp.run(-z1)
    T2 = hp.T2
    Pp = Ep1 / T2
    Ps = Es1 / T2
    resid = float(np.linalg.norm(z1 + z) / (1 + np.linalg.norm(z)))
    drift = abs(Ep2 - Ep1) / max(abs(Ep1), 1e-30)
    if drift > 1e-4:
        raise OracleError("successive half periods disagree")
    out = {"Pp_ac": Pp, "Ps_ac": Ps, "dV": dict(zip(("p1", "p2", "s1", "s2"), dV)),
           "residual": resid, "power_drift": drift, "iterations": it + 1,
           "theta0": hp.theta0, "z0": z}
    if samples:
        ts = np.array([a for a, _ in tr])
        Xs = np.array([b for _, b in tr])
        th = hp.theta0 + omega * ts
        out["waveforms"] = {
            "theta": th,
            "ip": Xs[:, 0],
            "is": Xs[:, sys.is_],
            "vp": Xs[:, nz] - Xs[:, nz + 1],
            "vs": sys.n * (Xs[:, nz + 2] - Xs[:, nz + 3]),
        }
    return out
