"""Boltzmann machines: energies, exact distributions, ML/CD training, projections.

Units are ordered visible first, then hidden.  In every joint table over
``(x, h)`` unit ``k`` sits at bit ``k`` of the cell index.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize
from scipy.special import expit, logsumexp

from .coords import MAX_VARS, JointTable, ThetaVector
from .errors import DimensionMismatch, NoConvergence, SizeCap

KINDS = ("VBM", "RBM", "vRBM", "general")
INIT_SCALE = 0.01
_CHUNK = 1 << 16


def _sym_ok(a: np.ndarray) -> bool:
    return a.shape[0] == a.shape[1] and np.array_equal(a, a.T) and not np.any(np.diag(a))


def _frozen(a, shape, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class BmModel:
    """Boltzmann machine with energy
    ``-x'Ux/2 - h'Vh/2 - x'Wh - b'x - d'h`` and per-connection masks."""

    n_x: int
    n_h: int
    kind: str
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    b: np.ndarray
    d: np.ndarray
    mask_U: np.ndarray
    mask_V: np.ndarray
    mask_W: np.ndarray

    def __post_init__(self):
        nx, nh = self.n_x, self.n_h
        if nx < 1 or nh < 0:
            raise DimensionMismatch(f"bad unit counts n_x={nx}, n_h={nh}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        for name, shape, dt in (
            ("U", (nx, nx), np.float64), ("V", (nh, nh), np.float64), ("W", (nx, nh), np.float64),
            ("b", (nx,), np.float64), ("d", (nh,), np.float64),
            ("mask_U", (nx, nx), bool), ("mask_V", (nh, nh), bool), ("mask_W", (nx, nh), bool),
        ):
            a = np.asarray(getattr(self, name))
            if a.size != int(np.prod(shape)):
                raise DimensionMismatch(f"{name} has {a.size} entries, expected shape {shape}")
            object.__setattr__(self, name, _frozen(a, shape, dt))
        for w, m in (("U", "mask_U"), ("V", "mask_V")):
            if not _sym_ok(getattr(self, w)) or not _sym_ok(getattr(self, m)):
                raise ValueError(f"{w} and its mask must be symmetric with zero diagonal")
        for w, m in (("U", "mask_U"), ("V", "mask_V"), ("W", "mask_W")):
            if np.any(getattr(self, w)[~getattr(self, m)] != 0):
                raise ValueError(f"masked-out entries of {w} must be exactly 0")
        if self.kind == "VBM" and nh != 0:
            raise ValueError("a VBM has no hidden units")
        if self.kind == "RBM" and (self.mask_U.any() or self.mask_V.any()):
            raise ValueError("an RBM has no visible-visible or hidden-hidden connections")
        if self.kind == "vRBM" and self.mask_V.any():
            raise ValueError("a vRBM has no hidden-hidden connections")

    @property
    def n_units(self) -> int:
        return self.n_x + self.n_h

    @classmethod
    def create(cls, n_x: int, n_h: int = 0, kind: str = "VBM", rng: np.random.Generator | None = None,
               mask_U=None, mask_V=None, mask_W=None) -> "BmModel":
        """New model with the default connectivity for ``kind``.

        Enabled weights are drawn uniformly from ``[-0.01, 0.01]`` when
        ``rng`` is given (zero otherwise); biases start at 0.
        """
        off = lambda k: ~np.eye(k, dtype=bool)
        default_u = off(n_x) if kind in ("VBM", "vRBM", "general") else np.zeros((n_x, n_x), bool)
        default_v = off(n_h) if kind == "general" else np.zeros((n_h, n_h), bool)
        default_w = np.ones((n_x, n_h), bool) if kind != "VBM" else np.zeros((n_x, 0), bool)
        mu = default_u if mask_U is None else np.asarray(mask_U, bool)
        mv = default_v if mask_V is None else np.asarray(mask_V, bool)
        mw = default_w if mask_W is None else np.asarray(mask_W, bool)

        def draw(mask, symmetric):
            if rng is None:
                return np.zeros(mask.shape)
            w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=mask.shape)
            if symmetric:
                w = np.triu(w, 1)
                w = w + w.T
            return np.where(mask, w, 0.0)

        return cls(n_x, n_h, kind, draw(mu, True), draw(mv, True), draw(mw, False),
                   np.zeros(n_x), np.zeros(n_h), mu, mv, mw)

    def full(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unified ``(weights, biases, mask)`` over all units."""
        nx = self.n_x
        n = self.n_units
        w = np.zeros((n, n))
        m = np.zeros((n, n), bool)
        w[:nx, :nx], m[:nx, :nx] = self.U, self.mask_U
        w[nx:, nx:], m[nx:, nx:] = self.V, self.mask_V
        w[:nx, nx:], m[:nx, nx:] = self.W, self.mask_W
        w[nx:, :nx], m[nx:, :nx] = self.W.T, self.mask_W.T
        return w, np.concatenate([self.b, self.d]), m

    def with_full(self, weights: np.ndarray, biases: np.ndarray) -> "BmModel":
        nx = self.n_x
        _, _, m = self.full()
        w = np.where(m, weights, 0.0)
        w = 0.5 * (w + w.T)
        return replace(self, U=w[:nx, :nx], V=w[nx:, nx:], W=w[:nx, nx:], b=biases[:nx], d=biases[nx:])

    def to_json(self) -> str:
        return json.dumps({
            "n_x": self.n_x, "n_h": self.n_h, "kind": self.kind,
            "U": self.U.tolist(), "V": self.V.tolist(), "W": self.W.tolist(),
            "b": self.b.tolist(), "d": self.d.tolist(),
            "mask": {"U": self.mask_U.tolist(), "V": self.mask_V.tolist(), "W": self.mask_W.tolist()},
        })

    @classmethod
    def from_json(cls, text: str) -> "BmModel":
        o = json.loads(text)
        nx, nh = int(o["n_x"]), int(o["n_h"])
        arr = lambda v, shape, dt=np.float64: np.asarray(v, dtype=dt).reshape(shape)
        m = o["mask"]
        return cls(nx, nh, o["kind"], arr(o["U"], (nx, nx)), arr(o["V"], (nh, nh)), arr(o["W"], (nx, nh)),
                   arr(o["b"], (nx,)), arr(o["d"], (nh,)), arr(m["U"], (nx, nx), bool),
                   arr(m["V"], (nh, nh), bool), arr(m["W"], (nx, nh), bool))


# -- parameter layout -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Layout:
    """Enabled parameters as a flat vector: all biases, then enabled pairs
    ``i < j`` in row-major order."""

    n_units: int
    pairs: np.ndarray  # (P, 2)

    @classmethod
    def of(cls, model: BmModel) -> "Layout":
        _, _, m = model.full()
        i, j = np.nonzero(np.triu(m, 1))
        return cls(model.n_units, np.stack([i, j], axis=1))

    @property
    def size(self) -> int:
        return self.n_units + len(self.pairs)

    def pack(self, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
        return np.concatenate([biases, weights[self.pairs[:, 0], self.pairs[:, 1]]])

    def unpack(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_units
        w = np.zeros((n, n))
        w[self.pairs[:, 0], self.pairs[:, 1]] = vec[n:]
        return w + w.T, vec[:n].copy()

    def stats(self, mean: np.ndarray, second: np.ndarray) -> np.ndarray:
        return self.pack(second, mean)

    def labels(self, n_x: int) -> list[tuple[str, int, int]]:
        """``(block, row, col)`` per vector entry, in the model's own indexing."""
        out = [("b", i, -1) if i < n_x else ("d", i - n_x, -1) for i in range(self.n_units)]
        for i, j in self.pairs:
            if j < n_x:
                out.append(("U", int(i), int(j)))
            elif i >= n_x:
                out.append(("V", int(i - n_x), int(j - n_x)))
            else:
                out.append(("W", int(i), int(j - n_x)))
        return out


@dataclass(frozen=True)
class Gradient:
    """Log-likelihood gradient over the enabled parameters."""

    labels: list
    values: np.ndarray

    @property
    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def get(self, block: str, i: int, j: int = -1) -> float:
        return float(self.values[self.labels.index((block, i, j))])


# -- exact enumeration ------------------------------------------------------

def _check_cap(n: int) -> None:
    if n > MAX_VARS:
        raise SizeCap(f"{n} units exceed the exact-enumeration cap of {MAX_VARS}")


def _bits(codes: np.ndarray, n: int) -> np.ndarray:
    return ((codes[:, None] >> np.arange(n)) & 1).astype(np.float64)


def _neg_energy_all(weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """``-E`` for every state, indexed by bitmask."""
    n = biases.size
    out = np.empty(1 << n)
    for start in range(0, 1 << n, _CHUNK):
        s = _bits(np.arange(start, min(start + _CHUNK, 1 << n)), n)
        out[start:start + s.shape[0]] = 0.5 * np.einsum("si,ij,sj->s", s, weights, s) + s @ biases
    return out


def _moments(weights_over_states: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    s = _bits(np.arange(1 << n), n)
    return weights_over_states @ s, s.T @ (s * weights_over_states[:, None])


def energy(model: BmModel, x, h=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=np.float64)
    if x.shape != (model.n_x,) or h.shape != (model.n_h,):
        raise DimensionMismatch(f"state shapes {x.shape}, {h.shape} do not match ({model.n_x}, {model.n_h})")
    return float(-0.5 * x @ model.U @ x - 0.5 * h @ model.V @ h - x @ model.W @ h - model.b @ x - model.d @ h)


def exact_distribution(model: BmModel) -> JointTable:
    """Joint table over ``(x, h)`` by enumeration of all states."""
    _check_cap(model.n_units)
    w, bias, _ = model.full()
    s = _neg_energy_all(w, bias)
    return JointTable(model.n_units, np.exp(s - logsumexp(s)))


def _hidden_free(model: BmModel) -> bool:
    return not model.mask_V.any()


def _visible_log_weights(model: BmModel) -> np.ndarray:
    """Unnormalised ``log p(x)`` with hidden units summed out."""
    _check_cap(model.n_x)
    xs = _bits(np.arange(1 << model.n_x), model.n_x)
    base = 0.5 * np.einsum("si,ij,sj->s", xs, model.U, xs) + xs @ model.b
    if model.n_h == 0:
        return base
    if _hidden_free(model):
        return base + np.logaddexp(0.0, xs @ model.W + model.d).sum(axis=1)
    _check_cap(model.n_units)
    w, bias, _ = model.full()
    return logsumexp(_neg_energy_all(w, bias).reshape(1 << model.n_h, 1 << model.n_x), axis=0)


def _visible_log_probs(model: BmModel) -> np.ndarray:
    s = _visible_log_weights(model)
    return s - logsumexp(s)


def marginal_visible(model: BmModel) -> JointTable:
    return JointTable(model.n_x, np.exp(_visible_log_probs(model)))


def bm_to_theta(model: BmModel) -> ThetaVector:
    """Order-1 theta = biases, order-2 theta = pair weights, higher orders 0."""
    n = model.n_units
    _check_cap(n)
    w, bias, _ = model.full()
    vals = np.zeros((1 << n) - 1)
    for i in range(n):
        vals[(1 << i) - 1] = bias[i]
        for j in range(i + 1, n):
            vals[(1 << i | 1 << j) - 1] = w[i, j]
    return ThetaVector(n, vals)


def _posterior_joint(model: BmModel, q_x: np.ndarray) -> np.ndarray:
    """``q(x) p(h | x)`` over all joint states (general connectivity)."""
    w, bias, _ = model.full()
    s = _neg_energy_all(w, bias).reshape(1 << model.n_h, 1 << model.n_x)
    post = np.exp(s - logsumexp(s, axis=0))
    return (post * q_x).reshape(-1)


def _expected_stats(model: BmModel, layout: Layout, q_x: np.ndarray) -> np.ndarray:
    """``E[s_i]`` and ``E[s_i s_j]`` under ``q(x) p(h | x)``."""
    nx, nh = model.n_x, model.n_h
    if nh and not _hidden_free(model):
        mean, second = _moments(_posterior_joint(model, q_x), model.n_units)
        return layout.stats(mean, second)
    xs = _bits(np.arange(1 << nx), nx)
    if nh == 0:
        mean, second = q_x @ xs, xs.T @ (xs * q_x[:, None])
        return layout.stats(mean, second)
    sig = expit(xs @ model.W + model.d)
    wx, ws = xs * q_x[:, None], sig * q_x[:, None]
    mean = np.concatenate([wx.sum(axis=0), ws.sum(axis=0)])
    second = np.zeros((model.n_units, model.n_units))
    second[:nx, :nx] = xs.T @ wx
    second[:nx, nx:] = xs.T @ ws
    second[nx:, :nx] = second[:nx, nx:].T
    second[nx:, nx:] = sig.T @ ws  # hidden units are independent given x
    return layout.stats(mean, second)


def _data_weights(data, n_x: int) -> np.ndarray:
    """Cell weights over visible states from a table, a weight vector or samples."""
    if isinstance(data, JointTable):
        if data.n != n_x:
            raise DimensionMismatch(f"data has {data.n} variables, model has {n_x} visible units")
        return data.probs
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1:
        if a.size != 1 << n_x:
            raise DimensionMismatch(f"expected {1 << n_x} cell weights, got {a.size}")
        return a / a.sum()
    if a.ndim != 2 or a.shape[1] != n_x:
        raise DimensionMismatch(f"samples must have {n_x} columns")
    codes = a.astype(np.int64) @ (1 << np.arange(n_x, dtype=np.int64))
    counts = np.bincount(codes, minlength=1 << n_x).astype(np.float64)
    return counts / counts.sum()


def _kl_weights(q: np.ndarray, log_p: np.ndarray) -> float:
    nz = q > 0
    return float(max(np.sum(q[nz] * (np.log(q[nz]) - log_p[nz])), 0.0))


def ml_gradient_exact(model: BmModel, data_table) -> Gradient:
    """``E_data[-dE/dxi] - E_model[-dE/dxi]`` over the enabled parameters."""
    _check_cap(model.n_units)
    q = _data_weights(data_table, model.n_x)
    layout = Layout.of(model)
    p = np.exp(_visible_log_probs(model))
    g = _expected_stats(model, layout, q) - _expected_stats(model, layout, p)
    return Gradient(layout.labels(model.n_x), g)


# -- Gibbs sampling ----------------------------------------------------------

def _sweep(weights, biases, state, rng, units) -> np.ndarray:
    for i in units:
        a = biases[i] + state @ weights[:, i]
        state[:, i] = rng.random(state.shape[0]) < expit(a)
    return state


def gibbs_sweep(model: BmModel, state, rng: np.random.Generator) -> np.ndarray:
    """Resample every unit once, in ascending order, from its conditional.

    ``state`` is one joint state ``(x, h)`` or a batch of them (rows).
    """
    st = np.array(state, dtype=np.float64)
    single = st.ndim == 1
    st = np.atleast_2d(st)
    if st.shape[1] != model.n_units:
        raise DimensionMismatch(f"state has {st.shape[1]} units, model has {model.n_units}")
    w, bias, _ = model.full()
    _sweep(w, bias, st, rng, range(model.n_units))
    return st[0] if single else st


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """``method`` is ``exact_ml`` or ``cd``.

    ``solver`` picks the exact-ML optimiser: ``newton`` (no hidden units),
    ``lbfgs``, ``gradient`` (plain ascent at ``learning_rate``) or ``auto``.
    """

    method: str = "exact_ml"
    learning_rate: float = 0.01
    max_epochs: int = 2000
    tol: float = 1e-7
    seed: int = 0
    cd_steps: int = 1
    batch_size: int | None = None  # None trains CD on the full batch
    solver: str = "auto"

    def __post_init__(self):
        if self.method not in ("exact_ml", "cd"):
            raise ValueError(f"unknown training method {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be at least 1")
        if self.max_epochs < 0 or (self.batch_size is not None and self.batch_size < 1):
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")
        if self.solver not in ("auto", "newton", "lbfgs", "gradient"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class TrainResult:
    model: BmModel
    trace: list = field(default_factory=list)  # (epoch, grad_norm, kl_to_data)
    converged: bool = False

    @property
    def grad_norm(self) -> float:
        return self.trace[-1][1] if self.trace else float("nan")

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "grad_norm", "kl_to_data"])
        for e, g, k in self.trace:
            w.writerow([e, repr(float(g)), repr(float(k))])
        return buf.getvalue()


def _objective(model: BmModel, layout: Layout, q: np.ndarray):
    """Return ``f(vec) -> (kl, -grad)`` for minimisation over the layout."""
    if _hidden_free(model):
        return _hidden_free_objective(model, layout, q)

    def f(vec):
        m = model.with_full(*layout.unpack(vec))
        log_p = _visible_log_probs(m)
        g = _expected_stats(m, layout, q) - _expected_stats(m, layout, np.exp(log_p))
        return _kl_weights(q, log_p), -g

    return f


def _hidden_free_objective(model: BmModel, layout: Layout, q: np.ndarray):
    """Array-level version of the objective when hidden units share no edges.

    The gradient is linear in the cell weights, so data and model phases
    collapse into one pass over ``q - p``.
    """
    nx, n = model.n_x, model.n_units
    xs = _bits(np.arange(1 << nx), nx)
    pi, pj = layout.pairs[:, 0], layout.pairs[:, 1]
    xx = pj < nx
    xi, xj = pi[xx], pj[xx]
    hi, hj = pi[~xx], pj[~xx] - nx
    pair_xx = xs[:, xi] * xs[:, xj]
    nz = q > 0
    q_ent = float(np.sum(q[nz] * np.log(q[nz])))

    def f(vec):
        b, d = vec[:nx], vec[nx:n]
        wv = vec[n:]
        w = np.zeros((nx, n - nx))
        w[hi, hj] = wv[~xx]
        act = xs @ w + d
        lw = xs @ b + pair_xx @ wv[xx] + np.logaddexp(0.0, act).sum(axis=1)
        log_p = lw - logsumexp(lw)
        r = q - np.exp(log_p)
        sig = expit(act)
        rs = sig * r[:, None]
        g = np.empty_like(vec)
        g[:nx] = r @ xs
        g[nx:n] = rs.sum(axis=0)
        g[n:][xx] = r @ pair_xx
        g[n:][~xx] = (xs.T @ rs)[hi, hj]
        return max(q_ent - float(q[nz] @ log_p[nz]), 0.0), -g

    return f


def fit_visible(weights: np.ndarray, biases: np.ndarray, mask: np.ndarray, q: np.ndarray,
                tol: float = 1e-8, max_iter: int = 200, trace: list | None = None):
    """Maximum-likelihood pairwise log-linear model over fully observed units.

    Damped Newton on the convex ``log Z - xi . E_q[features]``.  Returns the
    fitted ``(weights, biases, converged, grad_norm)``.
    """
    n = biases.size
    i, j = np.nonzero(np.triu(mask, 1))
    s = _bits(np.arange(1 << n), n)
    feats = np.concatenate([s, s[:, i] * s[:, j]], axis=1)
    target = q @ feats
    vec = np.concatenate([biases, weights[i, j]])

    def evaluate(v):
        lw = feats @ v
        lz = logsumexp(lw)
        p = np.exp(lw - lz)
        return lz - v @ target, p, lw - lz

    merit, p, log_p = evaluate(vec)
    gnorm = np.inf
    for it in range(max_iter + 1):
        mean = p @ feats
        grad = mean - target
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if trace is not None:
            trace.append((it, gnorm, _kl_weights(q, log_p)))
        if gnorm < tol or it == max_iter:
            break
        centered = feats - mean
        hess = centered.T @ (centered * p[:, None])
        hess[np.diag_indices_from(hess)] += 1e-12 * max(1.0, np.trace(hess))
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = -grad
        if step @ grad >= 0:
            step = -grad
        big = np.max(np.abs(step))
        if big > 5.0:
            step *= 5.0 / big
        t = 1.0
        while True:
            cand = vec + t * step
            m2, p2, lp2 = evaluate(cand)
            flat = abs(m2 - merit) <= 1e-12 * (1 + abs(merit))
            if m2 <= merit + 1e-4 * t * (step @ grad) or (flat and np.max(np.abs(p2 @ feats - target)) < gnorm):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            break
        vec, merit, p, log_p = cand, m2, p2, lp2
    w = np.zeros((n, n))
    w[i, j] = vec[n:]
    return w + w.T, vec[:n].copy(), gnorm < tol, gnorm


def _train_newton(model, q, cfg, res: TrainResult) -> TrainResult:
    w, bias, mask = model.full()
    w, bias, ok, _ = fit_visible(w, bias, mask, q, tol=cfg.tol, max_iter=cfg.max_epochs, trace=res.trace)
    res.model, res.converged = model.with_full(w, bias), ok
    return res


def _train_lbfgs(model, q, cfg, res: TrainResult) -> TrainResult:
    layout = Layout.of(model)
    f = _objective(model, layout, q)
    w, bias, _ = model.full()
    x0 = layout.pack(w, bias)
    kl0, g0 = f(x0)
    res.trace.append((0, float(np.max(np.abs(g0))), kl0))
    if res.trace[-1][1] < cfg.tol or cfg.max_epochs == 0:
        res.converged = res.trace[-1][1] < cfg.tol
        return res
    last = {}

    def fun(v):
        kl, g = f(v)
        last["v"], last["kl"], last["g"] = v.copy(), kl, g
        return kl, g

    def callback(v):
        kl, g = f(v) if not np.array_equal(v, last.get("v")) else (last["kl"], last["g"])
        res.trace.append((len(res.trace), float(np.max(np.abs(g))), kl))

    out = scipy.optimize.minimize(
        fun, x0, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": cfg.max_epochs, "gtol": cfg.tol, "ftol": 0.0, "maxcor": 30},
    )
    kl, g = f(out.x)
    gn = float(np.max(np.abs(g)))
    if res.trace[-1][1] != gn:
        res.trace.append((len(res.trace), gn, kl))
    res.model = model.with_full(*layout.unpack(out.x))
    res.converged = gn < cfg.tol
    return res


def _train_gradient(model, q, cfg, res: TrainResult) -> TrainResult:
    layout = Layout.of(model)
    f = _objective(model, layout, q)
    w, bias, _ = model.full()
    vec = layout.pack(w, bias)
    for epoch in range(cfg.max_epochs + 1):
        kl, g = f(vec)
        gn = float(np.max(np.abs(g))) if g.size else 0.0
        res.trace.append((epoch, gn, kl))
        if gn < cfg.tol:
            res.converged = True
            break
        if epoch == cfg.max_epochs:
            break
        vec = vec - cfg.learning_rate * g
    res.model = model.with_full(*layout.unpack(vec))
    return res


def cd_update(model: BmModel, batch, m: int, rng: np.random.Generator, learning_rate: float = 0.01) -> BmModel:
    """One CD-m step from a minibatch of visible rows."""
    if m < 1:
        raise ValueError("CD needs m >= 1")
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != model.n_x:
        raise DimensionMismatch(f"batch has {x.shape[1]} columns, model has {model.n_x} visible units")
    layout = Layout.of(model)
    w, bias, _ = model.full()
    delta = cd_direction(model, x, m, rng, w, bias, layout)
    return model.with_full(*layout.unpack(layout.pack(w, bias) + learning_rate * delta))


def cd_direction(model: BmModel, x: np.ndarray, m: int, rng: np.random.Generator,
                 w=None, bias=None, layout=None) -> np.ndarray:
    """``<-dE/dxi>_0 - <-dE/dxi>_m`` over the enabled parameters."""
    if w is None:
        w, bias, _ = model.full()
        layout = Layout.of(model)
    nx, n = model.n_x, model.n_units
    state = np.zeros((x.shape[0], n))
    state[:, :nx] = x
    _sweep(w, bias, state, rng, range(nx, n))  # h ~ p(h | x), x clamped
    pos = state.copy()
    for _ in range(m):
        _sweep(w, bias, state, rng, range(n))
    k = x.shape[0]
    stats = lambda s: layout.stats(s.mean(axis=0), s.T @ s / k)
    return stats(pos) - stats(state)


def _train_cd(model, data, cfg, res: TrainResult) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    a = np.asarray(data, dtype=np.float64)
    if isinstance(data, JointTable) or a.ndim == 1:
        raise DimensionMismatch("CD training needs a sample matrix")
    q = _data_weights(a, model.n_x)
    exact = model.n_x <= MAX_VARS and (model.n_units <= MAX_VARS or _hidden_free(model))

    def record(epoch, m):
        if exact:
            g = ml_gradient_exact(m, q)
            res.trace.append((epoch, g.max_norm, _kl_weights(q, _visible_log_probs(m))))
        else:
            res.trace.append((epoch, float("nan"), float("nan")))

    record(0, model)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(a.shape[0])
        size = cfg.batch_size or a.shape[0]
        for start in range(0, a.shape[0], size):
            model = cd_update(model, a[order[start:start + size]], cfg.cd_steps, rng, cfg.learning_rate)
        record(epoch, model)
    res.model = model
    return res


def train(model: BmModel, data, cfg: TrainConfig) -> TrainResult:
    """Fit ``model`` to ``data`` (table, cell weights or sample matrix).

    Non-convergence is reported through ``TrainResult.converged``.
    """
    res = TrainResult(model)
    if cfg.method == "cd":
        return _train_cd(model, data, cfg, res)
    _check_cap(model.n_x)
    if model.n_h and not _hidden_free(model):
        _check_cap(model.n_units)
    q = _data_weights(data, model.n_x)
    solver = cfg.solver
    if solver == "auto":
        solver = "newton" if model.n_h == 0 else "lbfgs"
    if solver == "newton" and model.n_h:
        raise ValueError("the newton solver needs a fully visible model")
    return {"newton": _train_newton, "lbfgs": _train_lbfgs, "gradient": _train_gradient}[solver](
        model, q, cfg, res)


# -- iterative projection ---------------------------------------------------------

def project_H(q_x: JointTable, model: BmModel) -> JointTable:
    """``q(x) p(h | x; model)`` as a joint table over ``(x, h)``."""
    if q_x.n != model.n_x:
        raise DimensionMismatch(f"q_x has {q_x.n} variables, model has {model.n_x} visible units")
    _check_cap(model.n_units)
    return JointTable(model.n_units, _posterior_joint(model, q_x.probs))


def project_B(q_xh: JointTable, init_model: BmModel, cfg: TrainConfig | None = None) -> BmModel:
    """Treat every unit as visible and fit the model's connectivity to ``q_xh``."""
    if q_xh.n != init_model.n_units:
        raise DimensionMismatch(f"joint table has {q_xh.n} variables, model has {init_model.n_units} units")
    tol = 1e-8 if cfg is None else min(cfg.tol, 1e-8)
    w, bias, mask = init_model.full()
    w, bias, ok, gn = fit_visible(w, bias, mask, q_xh.probs, tol=tol, max_iter=500)
    if not ok:
        raise NoConvergence("projection onto the BM manifold did not converge", 500, gn)
    return init_model.with_full(w, bias)


def _kl_tables(a: JointTable, b: JointTable) -> float:
    return _kl_weights(a.probs, np.log(b.probs))


@dataclass
class ProjectionTrace:
    rows: list = field(default_factory=list)  # (round, D[q_{i+1}, p_i], D[q_{i+1}, p_{i+1}])
    converged: bool = False

    def monotone(self, slack: float = 1e-9) -> bool:
        """The chain ``D[q_{i+1}, p_i] >= D[q_{i+1}, p_{i+1}] >= D[q_{i+2}, p_{i+1}]``."""
        seq = [v for _, before, after in self.rows for v in (before, after)]
        return all(b <= a + slack for a, b in zip(seq, seq[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "kl_before", "kl_after"])
        for r, a, b in self.rows:
            w.writerow([r, repr(a), repr(b)])
        return buf.getvalue()


def iterative_projection(q_x: JointTable, init_model: BmModel, cfg: TrainConfig | None = None,
                         max_rounds: int = 500, tol: float = 1e-9) -> tuple[BmModel, ProjectionTrace]:
    """Alternate the data-manifold and model-manifold projections."""
    model = init_model
    trace = ProjectionTrace()
    p = exact_distribution(model)
    for r in range(max_rounds):
        q = project_H(q_x, model)
        before = _kl_tables(q, p)
        model = project_B(q, model, cfg)
        p = exact_distribution(model)
        after = _kl_tables(q, p)
        trace.rows.append((r, before, after))
        if before - after < tol:
            trace.converged = True
            break
    return model, trace


__all__ = [
    "BmModel", "Gradient", "Layout", "ProjectionTrace", "TrainConfig", "TrainResult",
    "bm_to_theta", "cd_direction", "cd_update", "energy", "exact_distribution", "fit_visible",
    "gibbs_sweep", "iterative_projection", "marginal_visible", "ml_gradient_exact",
    "project_B", "project_H", "train",
]
