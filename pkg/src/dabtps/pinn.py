"""Physics-informed estimation of lumped (Lt, Rt) from terminal measurements.

Synthetic data come from the loss model; the network is a from-scratch numpy
MLP (8 -> 64 -> 64 -> 2, ReLU, dropout, L2) trained with Adam on a data MSE
plus a weighted terminal-power consistency term.  Physics powers at the
predicted (Lt, Rt) are read from a per-sample response table of the model
built once before training (see ``PhysicsTable``).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .core import CircuitParams, lumped_params, scale_to_lumped

log = logging.getLogger(__name__)

INPUTS = ("Vin", "Vout", "Iin", "Iout", "Ploss", "delta_p", "delta_s", "phi")
LABELS = ("Lt", "Rt")
CSV_COLUMNS = INPUTS + LABELS + ("provenance",)
MODEL_VERSION = 1


class DegenerateColumnError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


# ------------------------------------------------------------------ data

@dataclass(frozen=True)
class DatasetRanges:
    Vin: tuple = (150.0, 170.0)
    Vout: tuple = (90.0, 130.0)  # physical secondary volts
    Ps_out: tuple = (150.0, 1500.0)
    Lp: tuple = (0.6e-6, 12.0e-6)
    Ls: tuple = (0.45e-6, 3.9e-6)  # physical
    Rlp: tuple = (0.0, 0.02)
    Rls: tuple = (0.0, 0.01)
    duty_max: float = 0.8  # random duties drawn in [0, duty_max]


@dataclass
class Dataset:
    X: np.ndarray  # (N, 8) in INPUTS order
    Y: np.ndarray  # (N, 2) Lt, Rt
    provenance: list
    circuits: np.ndarray | None = None  # (N, 4) Lp, Ls, Rlp, Rls (synthetic only)

    def __len__(self):
        return self.X.shape[0]

    @property
    def Pp_in(self):
        return self.X[:, 0] * self.X[:, 2]

    @property
    def Ps_out(self):
        return self.X[:, 1] * self.X[:, 3]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for x, y, pv in zip(self.X, self.Y, self.provenance):
                w.writerow([repr(float(v)) for v in (*x, *y)] + [pv])

    @classmethod
    def from_csv(cls, path):
        X, Y, pv = [], [], []
        with open(path, newline="") as fh:
            r = csv.DictReader(fh)
            if tuple(r.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"dataset header must be {CSV_COLUMNS}")
            for row in r:
                X.append([float(row[c]) for c in INPUTS])
                Y.append([float(row[c]) for c in LABELS])
                pv.append(row["provenance"])
        return cls(np.array(X), np.array(Y), pv)


def generate_synthetic_dataset(p: CircuitParams, n, ranges: DatasetRanges | None = None, seed=0,
                               optimal_fraction=0.0, max_rounds=20, settings=None):
    """``n`` model samples with random circuits and operating points.

    Duties are random admissible points (phi solved for the drawn output
    power); ``optimal_fraction`` of the samples use optimizer duties instead.
    Draws whose power is unreachable are redrawn.
    """
    from .optimizer import LossModel, OptSettings, _optimize_cells, _Problems, solve_phi

    rg = ranges or DatasetRanges()
    st = settings or OptSettings(n_starts=2)
    rng = np.random.default_rng(seed)
    model = LossModel(p, "total")
    keep = []
    n_opt = int(round(optimal_fraction * n))
    for rnd in range(max_rounds):
        need = n - sum(len(k["Vin"]) for k in keep)
        if need <= 0:
            break
        m = int(need * 1.3) + 8
        u = lambda r: rng.uniform(r[0], r[1], m)
        d = {"Vin": u(rg.Vin), "Vout": u(rg.Vout), "Ps": u(rg.Ps_out), "Lp": u(rg.Lp),
             "Ls": u(rg.Ls), "Rlp": u(rg.Rlp), "Rls": u(rg.Rls),
             "dp": rng.uniform(0, rg.duty_max, m), "ds": rng.uniform(0, rg.duty_max, m)}
        var = {k: d[k] for k in ("Lp", "Ls", "Rlp", "Rls")}
        prob = _Problems(model, d["Vin"], d["Vout"], d["Ps"], var)
        idx = np.arange(m)
        done_opt = sum(int(k["opt"].sum()) for k in keep)
        opt = np.zeros(m, bool)
        opt[:max(0, min(n_opt - done_opt, m))] = True
        if opt.any():
            o = np.flatnonzero(opt)
            res = _optimize_cells(model, d["Vin"][o], d["Vout"][o], d["Ps"][o],
                                  {k: v[o] for k, v in var.items()}, st)
            for j, r in zip(o, res):
                d["dp"][j], d["ds"][j] = r.m.delta_p, r.m.delta_s
        phi, _, ok = solve_phi(prob, idx, d["dp"], d["ds"], tol=1e-3)
        _, r = model.full(d["Vin"], d["Vout"], d["dp"], d["ds"], phi, var)
        ok &= np.isfinite(r["Ps_out"]) & (r["Pp_in"] > r["Ps_out"]) & (r["Ps_out"] > 0)
        sel = np.flatnonzero(ok)[:need]
        part = {k: v[sel] for k, v in d.items()}
        part.update(phi=phi[sel], Pp_in=r["Pp_in"][sel], Ps_out=r["Ps_out"][sel], opt=opt[sel])
        keep.append(part)
    cat = {k: np.concatenate([c[k] for c in keep]) for k in keep[0]}
    if cat["Vin"].size < n:
        raise RuntimeError(f"only {cat['Vin'].size} feasible samples after {max_rounds} rounds")
    n2 = p.n ** 2
    Rp, Rs = p.resistance("Rp", 1)[0], p.resistance("Rs", 1)[0]
    Lt = cat["Lp"] + p.Llp + n2 * (cat["Ls"] + p.Lls)
    Rt = Rp + cat["Rlp"] + n2 * (Rs + cat["Rls"])
    X = np.column_stack([cat["Vin"], cat["Vout"], cat["Pp_in"] / cat["Vin"],
                         cat["Ps_out"] / cat["Vout"], cat["Pp_in"] - cat["Ps_out"],
                         cat["dp"], cat["ds"], cat["phi"]])
    circ = np.column_stack([cat["Lp"], cat["Ls"], cat["Rlp"], cat["Rls"]])
    return Dataset(X, np.column_stack([Lt, Rt]), ["model"] * n, circ)


@dataclass
class Prepared:
    ds: Dataset
    Xn: np.ndarray
    Yn: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    ymin: np.ndarray
    ymax: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    corr: np.ndarray

    def denorm_y(self, Yn):
        return Yn * (self.ymax - self.ymin) + self.ymin

    def norm_x(self, X):
        return (X - self.xmin) / (self.xmax - self.xmin)


def normalize(Y, lo, hi):
    return (Y - lo) / (hi - lo)


def denormalize(Yn, lo, hi):
    return Yn * (hi - lo) + lo


def prepare_dataset(ds: Dataset, seed=0, fractions=(0.7, 0.2, 0.1)) -> Prepared:
    X, Y = ds.X, ds.Y
    xmin, xmax = X.min(0), X.max(0)
    ymin, ymax = Y.min(0), Y.max(0)
    for name, lo, hi in zip(INPUTS + LABELS, np.r_[xmin, ymin], np.r_[xmax, ymax]):
        if not hi > lo:
            raise DegenerateColumnError(f"column {name} is constant")
    N = len(ds)
    perm = np.random.default_rng(seed).permutation(N)
    a = int(round(fractions[0] * N))
    b = a + int(round(fractions[1] * N))
    corr = np.corrcoef(np.column_stack([X, Y]), rowvar=False)
    return Prepared(ds, normalize(X, xmin, xmax), normalize(Y, ymin, ymax), xmin, xmax, ymin,
                    ymax, np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]), corr)


# ------------------------------------------------------------------ network

@dataclass
class MlpModel:
    W: list
    b: list
    dropout: float = 0.1
    l2: float = 0.01
    xmin: np.ndarray | None = None
    xmax: np.ndarray | None = None
    ymin: np.ndarray | None = None
    ymax: np.ndarray | None = None

    @classmethod
    def init(cls, dims=(8, 64, 64, 2), seed=0, dropout=0.1, l2=0.01):
        rng = np.random.default_rng(seed)
        W = [rng.normal(0, math.sqrt(2.0 / a), (a, b_)) for a, b_ in zip(dims[:-1], dims[1:])]
        return cls(W, [np.zeros(d) for d in dims[1:]], dropout, l2)

    @property
    def dims(self):
        return (self.W[0].shape[0],) + tuple(w.shape[1] for w in self.W)

    def params(self):
        return self.W + self.b

    def copy(self):
        return replace(self, W=[w.copy() for w in self.W], b=[x.copy() for x in self.b])

    def predict(self, Xn):
        return mlp_forward(self, Xn)[0]

    def predict_physical(self, X):
        Xn = (X - self.xmin) / (self.xmax - self.xmin)
        return denormalize(self.predict(Xn), self.ymin, self.ymax)

    def to_dict(self):
        f = lambda a: None if a is None else [float(v) for v in np.ravel(a)]
        return {"version": MODEL_VERSION, "dims": list(self.dims), "dropout": self.dropout,
                "l2": self.l2, "xmin": f(self.xmin), "xmax": f(self.xmax),
                "ymin": f(self.ymin), "ymax": f(self.ymax),
                "W": [f(w) for w in self.W], "b": [f(x) for x in self.b]}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != MODEL_VERSION:
            raise ValueError("unsupported model version")
        dims = d["dims"]
        W = [np.array(w, float).reshape(a, b_) for w, a, b_ in zip(d["W"], dims[:-1], dims[1:])]
        g = lambda k: None if d[k] is None else np.array(d[k], float)
        return cls(W, [np.array(x, float) for x in d["b"]], d["dropout"], d["l2"],
                   g("xmin"), g("xmax"), g("ymin"), g("ymax"))

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def mlp_forward(model: MlpModel, X, training=False, rng=None):
    """Returns (output, cache).  Inverted dropout after each hidden ReLU."""
    X = np.atleast_2d(X)
    acts = [X]
    masks = []
    h = X
    L = len(model.W)
    for i, (W, b) in enumerate(zip(model.W, model.b)):
        z = h @ W + b
        if i < L - 1:
            h = np.maximum(z, 0.0)
            if training and model.dropout > 0:
                keep = 1.0 - model.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            else:
                mask = None
            masks.append(mask)
            acts.append(h)
        else:
            h = z
    return h, (acts, masks)


def mlp_backward(model: MlpModel, cache, dout):
    """Gradients of a loss with d(loss)/d(output) = ``dout`` (no L2)."""
    acts, masks = cache
    gW = [None] * len(model.W)
    gb = [None] * len(model.W)
    g = dout
    for i in range(len(model.W) - 1, -1, -1):
        gW[i] = acts[i].T @ g
        gb[i] = g.sum(0)
        if i > 0:
            g = g @ model.W[i].T
            if masks[i - 1] is not None:
                g = g * masks[i - 1]
            g = g * (acts[i] > 0)
    return gW, gb


def custom_loss(pred, labels, phys_pred=None, measured=None, lam=0.8, P_rated=2000.0):
    """Data MSE (both labels) plus lam times the normalized power MSE."""
    pred = np.atleast_2d(pred)
    labels = np.atleast_2d(labels)
    data = float(np.mean((pred[:, 0] - labels[:, 0]) ** 2) + np.mean((pred[:, 1] - labels[:, 1]) ** 2))
    if lam == 0 or phys_pred is None:
        return data
    e = (np.atleast_2d(phys_pred) - np.atleast_2d(measured)) / P_rated
    return data + lam * float(np.mean(e[:, 0] ** 2) + np.mean(e[:, 1] ** 2))


def l2_penalty(model):
    return model.l2 * sum(float(np.sum(w * w)) for w in model.W)


# ------------------------------------------------------------------ physics

class PhysicsTable:
    """Terminal powers of the model versus (Lt, Rt) for fixed sample inputs.

    For each sample, (Pp_in, Ps_out) times Lt/Lt_nom is tabulated on a log
    grid in Lt and a linear grid in Rt (circuit split at nominal ratios) and
    interpolated bilinearly; the Lt scaling removes most of the curvature.
    """

    def __init__(self, p: CircuitParams, X, Lt_range, Rt_range, nL=16, nR=3, chunk=4000):
        from .optimizer import LossModel

        self.p = p
        base = lumped_params(p)
        self.Lt_nom, self.Rt_nom = base["Lt"], base["Rt"]
        self.u = np.linspace(math.log(Lt_range[0]), math.log(Lt_range[1]), nL)
        self.r = np.linspace(Rt_range[0], Rt_range[1], nR)
        N = X.shape[0]
        UU, RR = np.meshgrid(self.u, self.r, indexing="ij")
        aL = np.exp(UU.ravel()) / self.Lt_nom
        aR = RR.ravel() / self.Rt_nom if self.Rt_nom > 0 else np.zeros(RR.size)
        G = aL.size
        model = LossModel(p, "total")
        tab = np.empty((N, G, 2))
        rt = {k: p.resistance(k, 1)[0] for k in ("Rp", "Rs", "Rlp", "Rls")}
        flat_s = np.repeat(np.arange(N), G)
        flat_g = np.tile(np.arange(G), N)
        for s0 in range(0, flat_s.size, chunk):
            sl = slice(s0, s0 + chunk)
            si, gi = flat_s[sl], flat_g[sl]
            a, b = aL[gi], aR[gi]
            var = {"Lp": p.Lp * a, "Ls": p.Ls * a, "Llp": p.Llp * a, "Lls": p.Lls * a,
                   **{k: v * b for k, v in rt.items()}}
            x = X[si]
            _, r = model.full(x[:, 0], x[:, 1], x[:, 5], x[:, 6], x[:, 7], var)
            tab[si, gi, 0] = r["Pp_in"] * a
            tab[si, gi, 1] = r["Ps_out"] * a
        self.tab = tab.reshape(N, nL, nR, 2)

    def __call__(self, rows, Lt, Rt):
        """Interpolated (Pp_in, Ps_out) for sample ``rows`` at (Lt, Rt) (clamped)."""
        u = np.clip(np.log(np.maximum(Lt, 1e-300)), self.u[0], self.u[-1])
        r = np.clip(Rt, self.r[0], self.r[-1])
        du = self.u[1] - self.u[0]
        i = np.clip(((u - self.u[0]) / du).astype(int), 0, self.u.size - 2)
        fu = ((u - self.u[i]) / du)[:, None]
        if self.r.size > 1:
            dr = self.r[1] - self.r[0]
            j = np.clip(((r - self.r[0]) / dr).astype(int), 0, self.r.size - 2)
            fr = ((r - self.r[j]) / dr)[:, None]
        else:
            j = np.zeros_like(i)
            fr = np.zeros_like(fu)
        T = self.tab
        jj = np.minimum(j + 1, self.r.size - 1)
        q = ((1 - fu) * (1 - fr) * T[rows, i, j] + fu * (1 - fr) * T[rows, i + 1, j]
             + (1 - fu) * fr * T[rows, i, jj] + fu * fr * T[rows, i + 1, jj])
        return q / (np.exp(u) / self.Lt_nom)[:, None]


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 230
    lam: float = 0.8
    seed: int = 0
    fd_rel: float = 1e-4
    dropout: float = 0.1
    l2: float = 0.01
    l2_mode: str = "decoupled"  # decoupled (AdamW-style decay) | penalty (l2 * sum W^2 in the loss)
    P_rated: float = 2000.0
    lam_schedule: str = "fixed"  # fixed | balance
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class History:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    data: list = field(default_factory=list)
    physics: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    best_epoch: int = -1


def train(prep: Prepared, cfg: TrainConfig = TrainConfig(), table: PhysicsTable | None = None,
          table_rows=None):
    """Adam training; returns (best-validation model, History).

    ``table`` supplies physics powers for dataset rows (index map
    ``table_rows``: dataset row -> table row; identity by default).
    """
    if cfg.l2_mode not in ("decoupled", "penalty"):
        raise ValueError(f"unknown l2_mode {cfg.l2_mode!r}")
    model = MlpModel.init((prep.Xn.shape[1], 64, 64, 2), cfg.seed, cfg.dropout, cfg.l2)
    model.xmin, model.xmax, model.ymin, model.ymax = prep.xmin, prep.xmax, prep.ymin, prep.ymax
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.params()
    m1 = [np.zeros_like(x) for x in params]
    m2 = [np.zeros_like(x) for x in params]
    t = 0
    hist = History()
    best = (math.inf, model.copy())
    lam = cfg.lam
    use_phys = table is not None and cfg.lam > 0
    tmap = table_rows if table_rows is not None else None
    tr = prep.train
    Xv, Yv = prep.Xn[prep.val], prep.Yn[prep.val]
    nL = len(model.W)
    for ep in range(cfg.epochs):
        order = tr[rng.permutation(tr.size)]
        tot = dsum = psum = 0.0
        nb = 0
        for s in range(0, order.size, cfg.batch):
            rows = order[s:s + cfg.batch]
            X, Y = prep.Xn[rows], prep.Yn[rows]
            out, cache = mlp_forward(model, X, True, rng)
            B = rows.size
            dout = 2 * (out - Y) / B
            data = float(np.mean((out[:, 0] - Y[:, 0]) ** 2) + np.mean((out[:, 1] - Y[:, 1]) ** 2))
            phys = 0.0
            if use_phys:
                trows = rows if tmap is None else tmap[rows]
                phys, g, _ = _physics_terms_rows(prep, table, rows, trows, out, cfg, lam)
                dout = dout + g
            gW, gb = mlp_backward(model, cache, dout)
            reg = 0.0
            if cfg.l2_mode == "penalty":
                reg = l2_penalty(model)
                for i in range(nL):
                    gW[i] = gW[i] + 2 * model.l2 * model.W[i]
            loss = data + phys + reg
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {ep}", hist)
            t += 1
            grads = gW + gb
            params = model.W + model.b
            for k, (p_, g_) in enumerate(zip(params, grads)):
                m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g_
                m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g_ * g_
                mh = m1[k] / (1 - cfg.beta1 ** t)
                vh = m2[k] / (1 - cfg.beta2 ** t)
                p_ -= cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
            if cfg.l2_mode == "decoupled":
                for w_ in model.W:
                    w_ *= 1 - cfg.lr * model.l2
            tot += loss
            dsum += data
            psum += phys
            nb += 1
        pv = model.predict(Xv)
        val = float(np.mean((pv[:, 0] - Yv[:, 0]) ** 2) + np.mean((pv[:, 1] - Yv[:, 1]) ** 2))
        hist.train.append(tot / nb)
        hist.data.append(dsum / nb)
        hist.physics.append(psum / nb)
        hist.val.append(val)
        hist.lam.append(lam)
        if val < best[0]:
            best = (val, model.copy())
            hist.best_epoch = ep
        if use_phys and cfg.lam_schedule == "balance" and psum > 0:
            # keep the weighted physics term at the data term's size
            lam = lam * (dsum / psum)
    return best[1], hist


def _physics_terms_rows(prep, table, rows, trows, pred, cfg, lam):
    span = prep.ymax - prep.ymin
    Yp = pred * span + prep.ymin
    meas = np.column_stack([prep.ds.Pp_in[rows], prep.ds.Ps_out[rows]])
    e = (table(trows, Yp[:, 0], Yp[:, 1]) - meas) / cfg.P_rated
    B = len(rows)
    loss = lam * float(np.mean(e[:, 0] ** 2) + np.mean(e[:, 1] ** 2))
    grad = np.zeros_like(pred)
    for c in range(2):
        h = cfg.fd_rel * np.maximum(np.abs(Yp[:, c]), 1e-12)
        up, dn = Yp.copy(), Yp.copy()
        up[:, c] += h
        dn[:, c] -= h
        dP = (table(trows, up[:, 0], up[:, 1]) - table(trows, dn[:, 0], dn[:, 1])) / (2 * h)[:, None]
        grad[:, c] = lam * np.sum(2 * e * dP / cfg.P_rated, axis=1) / B * span[c]
    return loss, grad, e


def build_physics_table(p: CircuitParams, prep: Prepared, rows=None, **kw):
    """Table for the given dataset rows (default: training split).

    Returns ``(table, row_map)`` where ``row_map[dataset_row]`` is the table row.
    """
    rows = prep.train if rows is None else np.asarray(rows)
    lo = prep.ymin * 0.9
    hi = prep.ymax * 1.1
    table = PhysicsTable(p, prep.ds.X[rows], (lo[0], hi[0]), (max(lo[1], 0.0), hi[1]), **kw)
    row_map = np.full(len(prep.ds), -1)
    row_map[rows] = np.arange(rows.size)
    return table, row_map


def evaluate(model: MlpModel, prep: Prepared, split="test"):
    """Mean absolute relative error (percent) per label on a split."""
    rows = getattr(prep, split)
    pred = prep.denorm_y(model.predict(prep.Xn[rows]))
    true = prep.ds.Y[rows]
    mae = 100 * np.mean(np.abs(pred - true) / np.abs(true), axis=0)
    return {"MAE_Lt": float(mae[0]), "MAE_Rt": float(mae[1])}


def loss_and_grads(model: MlpModel, X, Y, lam=0.0, phys=None):
    """Deterministic (no dropout) loss and analytic gradients, for checking.

    ``phys`` may be ``(fn, measured, P_rated, span, ymin)`` with ``fn(Lt, Rt)``
    returning powers; its gradient uses the same central differences as
    training.
    """
    out, cache = mlp_forward(model, X, False)
    B = X.shape[0]
    loss = float(np.mean((out[:, 0] - Y[:, 0]) ** 2) + np.mean((out[:, 1] - Y[:, 1]) ** 2))
    dout = 2 * (out - Y) / B
    if phys is not None and lam > 0:
        fn, meas, Pr, span, ymin = phys
        Yp = out * span + ymin
        e = (fn(Yp[:, 0], Yp[:, 1]) - meas) / Pr
        loss += lam * float(np.mean(e[:, 0] ** 2) + np.mean(e[:, 1] ** 2))
        for c in range(2):
            h = 1e-6 * np.maximum(np.abs(Yp[:, c]), 1e-12)
            up, dn = Yp.copy(), Yp.copy()
            up[:, c] += h
            dn[:, c] -= h
            dP = (fn(up[:, 0], up[:, 1]) - fn(dn[:, 0], dn[:, 1])) / (2 * h)[:, None]
            dout[:, c] += lam * np.sum(2 * e * dP / Pr, axis=1) / B * span[c]
    loss += l2_penalty(model)
    gW, gb = mlp_backward(model, cache, dout)
    gW = [g + 2 * model.l2 * w for g, w in zip(gW, model.W)]
    return loss, gW, gb
