"""Dual-view graph learning layer.

Per stratum a one-layer GCN propagates the augmented series over the cell
adjacency. For each anchor, the unknown node's hidden rows of all features
feed FFN1, the global kriging estimate feeds FFN2, and the two are mixed by
learned per-timestep weights into the measurement of an unscented Kalman
filter whose state has one entry per feature. A softmax-gated mixture of
experts maps every anchor's filtered states to feature space and averages
over anchors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff
from .diff import Tensor


class FilterError(ArithmeticError):
    pass


# ---------------------------------------------------------------- GCN


def normalized_adjacency(a):
    """``D^-1/2 (A + I) D^-1/2`` for a non-negative adjacency ``A``."""
    a = np.asarray(a, dtype=float)
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    inv = 1.0 / np.sqrt(deg)
    return a_hat * inv[:, None] * inv[None, :]


def gcn_forward(a, x, w, b):
    """One graph convolution ``D^-1/2 (A+I) D^-1/2 X W + b``.

    ``x`` is node-major (one row per node); ``b`` is broadcast to every node.
    """
    norm = normalized_adjacency(a)
    x = diff.tensor(x)
    if x.shape[0] != norm.shape[0]:
        raise diff.ShapeError(f"gcn: adjacency {norm.shape} vs node features {x.shape}")
    return diff.matmul(diff.constant(norm), x) @ w + b


def propagate(a, x_aug, node=-1):
    """Row ``node`` of the normalised propagation of a ``T x (U+2)`` augmented series.

    This is the per-timestep scalar input of the unknown node after one
    hop of message passing, shape ``(T,)``.
    """
    norm = normalized_adjacency(a)
    return np.asarray(x_aug, dtype=float) @ norm[node]


# ---------------------------------------------------------------- UKF


@dataclass(frozen=True)
class SigmaConfig:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.1
    j: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.j < 1:
            raise ValueError(f"state dimension must be >= 1, got {self.j}")

    @property
    def xi(self):
        return self.alpha**2 * (self.j + self.kappa) - self.j

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "kappa": self.kappa, "j": self.j}


def sigma_weights(cfg):
    """Merwe scaled sigma-point weights ``(W_m, W_c)``, each of length ``2j+1``."""
    j, xi = cfg.j, cfg.xi
    if not j + xi > 0:
        raise ValueError(f"j + xi must be positive, got {j + xi}")
    wm = np.full(2 * j + 1, 1.0 / (2.0 * (j + xi)))
    wc = wm.copy()
    wm[0] = xi / (j + xi)
    wc[0] = xi / (j + xi) + (1.0 - cfg.alpha**2 + cfg.beta)
    return wm, wc


def _chol(p, scale):
    p = 0.5 * (p + p.T)
    try:
        return np.linalg.cholesky(scale * p)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(scale * (p + 1e-9 * np.eye(len(p))))
    except np.linalg.LinAlgError as exc:
        raise FilterError("covariance is not positive definite") from exc


def sigma_points(x, p, cfg):
    """``(2j+1) x j`` sigma points around ``x``."""
    root = _chol(p, cfg.j + cfg.xi)
    return np.vstack([x, x + root.T, x - root.T])


def ukf_step(x, p, z, cfg, qn, rn, fx=None, hx=None, return_gain=False):
    """One predict + update cycle of the unscented Kalman filter.

    ``fx`` and ``hx`` map a single state row; both default to the identity.
    Sigma points are regenerated from the predicted covariance before the
    update.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    z = np.asarray(z, dtype=float)
    wm, wc = sigma_weights(cfg)

    chi = sigma_points(x, p, cfg)
    if fx is not None:
        chi = np.array([fx(s) for s in chi])
    x_pred = wm @ chi
    dx = chi - x_pred
    p_pred = (wc[:, None] * dx).T @ dx + qn
    p_pred = 0.5 * (p_pred + p_pred.T)

    chi = sigma_points(x_pred, p_pred, cfg)
    gamma = chi if hx is None else np.array([hx(s) for s in chi])
    z_hat = wm @ gamma
    dz = gamma - z_hat
    dx = chi - x_pred
    p_zz = (wc[:, None] * dz).T @ dz + rn
    p_xz = (wc[:, None] * dx).T @ dz
    gain = np.linalg.solve(p_zz.T, p_xz.T).T
    x_new = x_pred + gain @ (z - z_hat)
    p_new = p_pred - gain @ p_zz @ gain.T
    p_new = 0.5 * (p_new + p_new.T)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(p_new))):
        raise FilterError("non-finite filter state")
    if return_gain:
        return x_new, p_new, gain
    return x_new, p_new


def run_filter(z, cfg, qn, rn):
    """Filter a ``T x j`` measurement stream from ``x0 = 0``, ``P0 = I``.

    Returns ``(states, gains)`` with ``gains[t]`` the Kalman gain of step ``t``.
    """
    z = np.asarray(z, dtype=float)
    n_t, j = z.shape
    x = np.zeros(j)
    p = np.eye(j)
    states = np.empty_like(z)
    gains = np.empty((n_t, j, j))
    for t in range(n_t):
        x, p, k = ukf_step(x, p, z[t], cfg, qn, rn, return_gain=True)
        states[t] = x
        gains[t] = k
    return states, gains


_GAIN_CACHE = {}


def gain_schedule(n_steps, cfg, qn, rn):
    """Kalman gains of the identity-map filter for ``n_steps`` steps.

    The covariance recursion does not depend on the measurements, so the
    gains are computed once with :func:`ukf_step` and reused.
    """
    key = (n_steps, cfg, np.asarray(qn).tobytes(), np.asarray(rn).tobytes())
    gains = _GAIN_CACHE.get(key)
    if gains is None:
        _, gains = run_filter(np.zeros((n_steps, cfg.j)), cfg, qn, rn)
        gains.setflags(write=False)
        if len(_GAIN_CACHE) > 64:
            _GAIN_CACHE.clear()
        _GAIN_CACHE[key] = gains
    return gains


def apply_gains(z, gains):
    """States of ``x_t = x_{t-1} + K_t (z_t - x_{t-1})`` from ``x_0 = 0``."""
    z = np.asarray(z, dtype=float)
    states = np.empty_like(z)
    x = np.zeros(z.shape[1])
    for t in range(z.shape[0]):
        x = x + gains[t] @ (z[t] - x)
        states[t] = x
    return states


def filter_node(z, cfg, qn, rn, through_filter=False):
    """Differentiable wrapper around :func:`run_filter`.

    With identity transition and measurement maps the filtered state obeys
    ``x_t = (I - K_t) x_{t-1} + K_t z_t`` with gains independent of ``z``.
    States are computed from the cached gain schedule, which reproduces
    :func:`run_filter` on ``z``. By default the gradient passes straight through (``dL/dz = dL/dx``);
    ``through_filter=True`` back-propagates that recursion exactly.
    """
    gains = gain_schedule(z.shape[0], cfg, qn, rn)
    states = apply_gains(z.value, gains)
    if not through_filter:
        return diff.make_node(states, (z,), lambda g: (g,), "ukf_straight")
    eye = np.eye(z.shape[1])

    def rule(g):
        out = np.empty_like(g)
        carry = np.zeros(g.shape[1])
        for t in range(g.shape[0] - 1, -1, -1):
            total = g[t] + carry
            out[t] = gains[t].T @ total
            carry = (eye - gains[t]).T @ total
        return (out,)

    return diff.make_node(states, (z,), rule, "ukf")


# ---------------------------------------------------------------- parameters


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Params:
    """Named trainable tensors, kept in insertion order."""

    def __init__(self):
        self._items = {}

    def add(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def items(self):
        return self._items.items()

    def tensors(self):
        return list(self._items.values())

    def zero_grad(self):
        for t in self._items.values():
            t.zero_grad()

    def to_dict(self):
        return {name: t.value.tolist() for name, t in self._items.items()}

    def load(self, doc):
        for name, value in doc.items():
            if name not in self._items:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.asarray(value, dtype=float)
            if arr.shape != self._items[name].shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {self._items[name].shape}")
            self._items[name].value = arr.reshape(self._items[name].shape)
        missing = set(self._items) - set(doc)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")

    def copy_values(self):
        return {name: t.value.copy() for name, t in self._items.items()}


def mlp(x, params, prefix):
    """Single-hidden-layer ReLU network."""
    h = diff.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _add_mlp(params, rng, prefix, n_in, n_hidden, n_out, identity=False):
    if identity and n_in == n_out and n_hidden >= 2 * n_in:
        _add_identity_mlp(params, rng, prefix, n_in, n_hidden)
        return
    params.add(f"{prefix}.w1", _uniform(rng, n_in, (n_in, n_hidden)))
    params.add(f"{prefix}.b1", _uniform(rng, n_in, (1, n_hidden)))
    params.add(f"{prefix}.w2", _uniform(rng, n_hidden, (n_hidden, n_out)))
    params.add(f"{prefix}.b2", _uniform(rng, n_hidden, (1, n_out)))


def _add_identity_mlp(params, rng, prefix, n, n_hidden):
    """ReLU network that starts as the identity map: ``x = relu(x) - relu(-x)``.

    Spare hidden units get the usual random input weights and zero output
    weights, so they are free to learn without perturbing the start.
    """
    eye = np.eye(n)
    w1 = _uniform(rng, n, (n, n_hidden))
    w1[:, : 2 * n] = np.hstack([eye, -eye])
    b1 = _uniform(rng, n, (1, n_hidden))
    b1[:, : 2 * n] = 0.0
    w2 = np.zeros((n_hidden, n))
    w2[: 2 * n] = np.vstack([eye, -eye])
    params.add(f"{prefix}.w1", w1)
    params.add(f"{prefix}.b1", b1)
    params.add(f"{prefix}.w2", w2)
    params.add(f"{prefix}.b2", np.zeros((1, n)))


@dataclass(frozen=True)
class GLLConfig:
    n_features: int
    n_steps: int
    hidden: int = 16  # GCN output width F'
    ffn_hidden: int = 16
    expert_hidden: int = 16
    n_experts: int = 4
    q_noise: float = 1e-3
    r_noise: float = 1e-2
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.1
    through_filter: bool = False
    # start from "trust global kriging": identity ffn2/experts, fusion leaning to x_global
    identity_init: bool = True
    fuse_init: float = -2.0

    @property
    def sigma(self):
        return SigmaConfig(self.alpha, self.beta, self.kappa, self.n_features)

    def to_dict(self):
        return dict(self.__dict__)


class GLL:
    """Parameters and forward pass of the graph learning layer."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        f, h = cfg.n_features, cfg.hidden
        p = Params()
        for feat in range(f):
            p.add(f"gcn{feat}.w", _uniform(rng, 1, (1, h)))
            p.add(f"gcn{feat}.b", _uniform(rng, 1, (1, h)))
        _add_mlp(p, rng, "ffn1", f * h, cfg.ffn_hidden, f)
        _add_mlp(p, rng, "ffn2", f, cfg.ffn_hidden, f, identity=cfg.identity_init)
        if cfg.identity_init:
            p.add("fuse", np.full((cfg.n_steps, f), cfg.fuse_init))
        else:
            p.add("fuse", _uniform(rng, 1, (cfg.n_steps, f)))
        p.add("gate.w", _uniform(rng, f, (f, cfg.n_experts)))
        p.add("gate.b", _uniform(rng, f, (1, cfg.n_experts)))
        for e in range(cfg.n_experts):
            _add_mlp(p, rng, f"expert{e}", f, cfg.expert_hidden, f, identity=cfg.identity_init)
        self.params = p
        self.qn = cfg.q_noise * np.eye(f)
        self.rn = cfg.r_noise * np.eye(f)

    # individual stages are exposed for testing

    def hidden(self, propagated):
        """GCN hidden rows of the unknown node, ``T x (F*F')``.

        ``propagated`` is ``T x F``: per feature, the unknown node's
        one-hop propagated value at each timestep.
        """
        propagated = np.asarray(propagated, dtype=float)
        cols = []
        for feat in range(self.cfg.n_features):
            x = diff.constant(propagated[:, feat : feat + 1])
            cols.append(x @ self.params[f"gcn{feat}.w"] + self.params[f"gcn{feat}.b"])
        return diff.concat_cols(cols)

    def measurement(self, hidden, x_global):
        h = mlp(hidden, self.params, "ffn1")
        x = mlp(diff.constant(x_global), self.params, "ffn2")
        w = diff.sigmoid(self.params["fuse"])
        return w * h + (1.0 - w) * x

    def cfe(self, propagated, x_global):
        z = self.measurement(self.hidden(propagated), x_global)
        return filter_node(z, self.cfg.sigma, self.qn, self.rn, self.cfg.through_filter)

    def moe(self, states):
        return moe_forward(states, self.params, self.cfg.n_experts)

    def forward(self, anchor_inputs, x_global):
        """Prediction ``T x F`` for one unknown location.

        ``anchor_inputs`` holds one ``T x F`` propagated matrix per anchor.
        """
        if not anchor_inputs:
            raise ValueError("no anchor inputs")
        states = [self.cfe(p, x_global) for p in anchor_inputs]
        return self.moe(states)


def moe_forward(states, params, n_experts):
    """Softmax-gated experts per stratum, averaged over strata."""
    if not states:
        raise ValueError("mixture of experts needs at least one stratum")
    total = None
    for h in states:
        g = diff.softmax_rows(h @ params["gate.w"] + params["gate.b"])
        out = None
        for e in range(n_experts):
            pick = np.zeros((n_experts, 1))
            pick[e, 0] = 1.0
            term = (g @ diff.constant(pick)) * mlp(h, params, f"expert{e}")
            out = term if out is None else out + term
        total = out if total is None else total + out
    return diff.scale(total, 1.0 / len(states))
