"""Masked-location training and inference.

Every epoch hides a random subset of the training locations, rebuilds the
strata from the remaining ones, and learns to reconstruct the hidden series.
Hidden locations never contribute to strata, correlations, variograms or
kriging inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diff
from .datamodel import Dataset, MaskSplit, NormStats, compute_stats, normalize, split_masks
from .gll import GLL, GLLConfig, propagate
from .kriging import build_augmented, fit_feature_variogram, global_kriging, local_kriging
from .sscc import (
    SCParams,
    build_strata,
    cell_density,
    extend_for_outside_target,
    mcmc_update,
    select_anchors,
    unified_adjacency,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "anchorgk.checkpoint/1"


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    mask_fraction: float = 0.2
    seed: int = 0
    mcmc_every: int = 10
    mcmc_steps: int = 5
    anchors: int = 5
    neighbors: int = 5
    grid_rows: int = 4
    grid_cols: int = 4
    masks_per_epoch: int = 10
    inner_steps: int = 1
    fixed_mask: bool = False
    # > 0 cycles through this many seeded masks instead of drawing fresh ones
    mask_pool: int = 0
    validation_fraction: float = 0.1
    hidden: int = 16
    n_experts: int = 4
    q_noise: float = 0.1
    r_noise: float = 1e-2
    ukf_alpha: float = 0.1
    ukf_beta: float = 2.0
    ukf_kappa: float = 0.1
    through_filter: bool = False
    pooled_variogram: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.mask_fraction < 1:
            raise ValueError("mask_fraction must be in (0, 1)")
        if self.inner_steps < 1 or self.masks_per_epoch < 1:
            raise ValueError("inner_steps and masks_per_epoch must be >= 1")
        if self.mask_pool < 0:
            raise ValueError("mask_pool must be >= 0")
        if self.anchors < 1 or self.neighbors < 1:
            raise ValueError("anchors and neighbors must be >= 1")

    def gll_config(self, n_features, n_steps):
        return GLLConfig(
            n_features=n_features,
            n_steps=n_steps,
            hidden=self.hidden,
            n_experts=self.n_experts,
            q_noise=self.q_noise,
            r_noise=self.r_noise,
            alpha=self.ukf_alpha,
            beta=self.ukf_beta,
            kappa=self.ukf_kappa,
            through_filter=self.through_filter,
        )

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


# ---------------------------------------------------------------- metrics


def _check_metric_inputs(pred, truth, mask):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} must match as M x T x F")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None, :], pred.shape)
    if not mask.any():
        raise ValueError("no available cells to score")
    return pred, truth, mask


def rmse_loss(pred, truth, mask):
    """Root mean squared error over available cells, pooled."""
    pred, truth, mask = _check_metric_inputs(pred, truth, mask)
    return float(np.sqrt(np.mean((pred - truth)[mask] ** 2)))


def mae_metric(pred, truth, mask):
    pred, truth, mask = _check_metric_inputs(pred, truth, mask)
    return float(np.mean(np.abs(pred - truth)[mask]))


def rmse_tensor(preds, truths, masks):
    """Differentiable pooled RMSE over a list of ``T x F`` predictions."""
    total = None
    count = 0
    for pred, truth, avail in zip(preds, truths, masks):
        cell_mask = np.broadcast_to(np.asarray(avail, dtype=float)[None, :], truth.shape)
        count += int(cell_mask.sum())
        err = diff.square(pred - diff.constant(truth)) * diff.constant(cell_mask)
        s = diff.sum(err)
        total = s if total is None else total + s
    if count == 0:
        raise ValueError("no available cells to score")
    return diff.sqrt(diff.scale(total, 1.0 / count))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(opt, params, lr, grads=None):
    """Adam update of ``params`` in place; non-finite gradients skip the step.

    ``grads`` maps names to arrays and defaults to each tensor's ``.grad``.
    """
    items = list(params.items())
    if grads is None:
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in items}
    if any(not np.all(np.isfinite(grads[n])) for n, _ in items):
        opt.skipped += 1
        log.warning("non-finite gradient, optimiser step skipped")
        return opt
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    for name, t in items:
        g = grads[name]
        m = opt.m.get(name, np.zeros_like(g))
        v = opt.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        m_hat = m / (1 - b1**opt.t)
        v_hat = v / (1 - b2**opt.t)
        t.value = t.value - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return opt


# ---------------------------------------------------------------- context


class Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    def add(self, phase, start):
        self.totals[phase] += time.perf_counter() - start


@dataclass(eq=False)
class Context:
    """Strata and variograms built from one set of known locations."""

    ds: Dataset
    strata: list
    by_anchor: dict
    variograms: list

    @property
    def anchors(self):
        return list(self.by_anchor)


def build_context(ds, cfg, timer=None):
    """Anchors, strata and per-feature variograms over the (normalised) known set."""
    start = time.perf_counter()
    q = min(cfg.anchors, ds.n)
    anchors = select_anchors(ds, q)
    strata = build_strata(ds, anchors, cfg.neighbors, cfg.grid_rows, cfg.grid_cols)
    by_anchor = {}
    for st in strata:
        by_anchor.setdefault(st.anchor_id, {})[st.feature] = st
    if timer:
        timer.add("sscc", start)
    start = time.perf_counter()
    variograms = [fit_feature_variogram(ds, f, cfg.pooled_variogram) for f in range(ds.f)]
    if timer:
        timer.add("kriging", start)
    return Context(ds, strata, by_anchor, variograms)


def target_inputs(ctx, target, sc_params, timer=None):
    """Network inputs for one unknown coordinate.

    Returns ``(anchor_inputs, x_global)``: one ``T x F`` propagated matrix per
    anchor whose strata cover ``target`` (every anchor if none does, with
    hulls grown to reach it), and the ``T x F`` global kriging estimate.
    """
    ds = ctx.ds
    start = time.perf_counter()
    x_global = np.zeros((ds.t, ds.f))
    for f in range(ds.f):
        if ds.available[:, f].any():
            x_global[:, f] = global_kriging(ds, f, target, ctx.variograms[f])
    if timer:
        timer.add("kriging", start)

    start = time.perf_counter()
    krig_seconds = 0.0
    covering = [a for a, group in ctx.by_anchor.items() if any(st.contains(target) for st in group.values())]
    chosen = covering or list(ctx.by_anchor)
    inputs = []
    for anchor in chosen:
        prop = x_global.copy()
        for f, st in ctx.by_anchor[anchor].items():
            st = extend_for_outside_target(st, target)
            cell_idx = st.locate_cell(target)
            alpha = cell_density(st, st.cells[cell_idx])
            adj = unified_adjacency(ds, st, cell_idx, sc_params, alpha)
            k_start = time.perf_counter()
            x_aug = build_augmented(ds, st, local_kriging(ds, st, target, ctx.variograms[f]))
            krig_seconds += time.perf_counter() - k_start
            prop[:, f] = propagate(adj.matrix, x_aug)
        inputs.append(prop)
    if timer:
        timer.totals["sscc"] += time.perf_counter() - start - krig_seconds
        timer.totals["kriging"] += krig_seconds
    return inputs, x_global


# ---------------------------------------------------------------- state


@dataclass(eq=False)
class TrainState:
    config: TrainConfig
    gll: GLL
    sc_params: SCParams
    stats: NormStats
    opt: AdamState = field(default_factory=AdamState)
    loss_history: list = field(default_factory=list)
    epochs_done: int = 0

    @property
    def trained(self):
        return self.epochs_done > 0

    def param_checksum(self):
        h = hashlib.sha256()
        for name, t in self.gll.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.value).tobytes())
        h.update(json.dumps(self.sc_params.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


def _masked_truth(ds, ids):
    rows = [ds.index_of(i) for i in ids]
    return ds.values[rows], ds.available[rows], ds.coords[rows]


def forward_targets(state, ctx, coords, sc_params=None, timer=None):
    """Prediction tensors (normalised units), one ``T x F`` per coordinate."""
    sc_params = sc_params or state.sc_params
    preds = []
    for coord in coords:
        inputs, x_global = target_inputs(ctx, coord, sc_params, timer)
        start = time.perf_counter()
        preds.append(state.gll.forward(inputs, x_global))
        if timer:
            timer.add("gll", start)
    return preds


def masked_predictions(state, ds_norm, split):
    """Predictions for ``split.masked_ids`` from ``split.observed_ids`` only."""
    ctx = build_context(ds_norm.subset(split.observed_ids), state.config)
    ids = sorted(split.masked_ids)
    _, _, coords = _masked_truth(ds_norm, ids)
    return np.stack([p.value for p in forward_targets(state, ctx, coords)]), ids


def new_state(ds, cfg, sc_params=None):
    stats = compute_stats(ds)
    gll = GLL(cfg.gll_config(ds.f, ds.t), seed=cfg.seed)
    return TrainState(cfg, gll, sc_params or SCParams(), stats)


def _epoch_split(ds, cfg, epoch, draw=0):
    if cfg.fixed_mask:
        return split_masks(ds, cfg.mask_fraction, cfg.seed)
    if cfg.mask_pool:
        slot = (epoch * cfg.masks_per_epoch + draw) % cfg.mask_pool
        return split_masks(ds, cfg.mask_fraction, [cfg.seed, slot])
    return split_masks(ds, cfg.mask_fraction, [cfg.seed, epoch, draw])


def train(ds, cfg, sc_params=None, callback=None):
    """Train on every location of ``ds``; returns ``(state, report)``.

    ``ds`` is in original units; normalisation statistics come from its
    available entries and are kept in the state.
    """
    state = new_state(ds, cfg, sc_params)
    ds_norm, _ = normalize(ds, state.stats)
    report = {"epochs": [], "sc_params": [state.sc_params.to_dict()]}
    for epoch in range(cfg.epochs):
        try:
            entry = _run_epoch(state, ds_norm, epoch)
        except Exception as exc:
            raise RuntimeError(f"epoch {epoch + 1} failed: {exc}") from exc
        report["epochs"].append(entry)
        report["sc_params"].append(state.sc_params.to_dict())
        if callback:
            callback(epoch, entry)
    report["loss_history"] = list(state.loss_history)
    report["skipped_steps"] = state.opt.skipped
    return state, report


def _fit_mask(state, ds_norm, split, ids, timer):
    """Optimiser steps reconstructing ``ids`` from ``split.observed_ids``."""
    cfg = state.config
    ctx = build_context(ds_norm.subset(split.observed_ids), cfg, timer)
    truth, avail, coords = _masked_truth(ds_norm, ids)
    cached = [target_inputs(ctx, c, state.sc_params, timer) for c in coords]
    losses = []
    for _ in range(cfg.inner_steps):
        start = time.perf_counter()
        state.gll.params.zero_grad()
        with diff.Tape() as tape:
            preds = [state.gll.forward(inp, xg) for inp, xg in cached]
            loss = rmse_tensor(preds, truth, avail)
        timer.add("gll", start)
        start = time.perf_counter()
        tape.backward(loss)
        adam_step(state.opt, state.gll.params, cfg.learning_rate)
        timer.add("backward", start)
        losses.append(float(loss.value))
    pred_values = np.stack([p.value for p in preds])
    return ctx, losses, pred_values, truth, avail


def _run_epoch(state, ds_norm, epoch):
    cfg = state.config
    timer = Timer()
    losses, sq_err, abs_err, n_cells = [], 0.0, 0.0, 0
    do_mcmc = cfg.mcmc_every > 0 and cfg.mcmc_steps > 0 and (epoch + 1) % cfg.mcmc_every == 0
    for draw in range(cfg.masks_per_epoch):
        split = _epoch_split(ds_norm, cfg, epoch, draw)
        masked = sorted(split.masked_ids)
        n_val = 0
        # the last mask of an MCMC epoch lends part of its locations to scoring
        if do_mcmc and draw == cfg.masks_per_epoch - 1 and len(masked) >= 2:
            n_val = max(1, int(math.floor(cfg.validation_fraction * len(masked))))
        order = np.random.default_rng([cfg.seed, epoch, draw]).permutation(len(masked))
        val_ids = sorted(masked[i] for i in order[:n_val])
        fit_ids = sorted(masked[i] for i in order[n_val:])
        ctx, step_losses, pred, truth, avail = _fit_mask(state, ds_norm, split, fit_ids, timer)
        losses.extend(step_losses)
        cells = np.broadcast_to(avail[:, None, :], pred.shape)
        sq_err += float(((pred - truth)[cells] ** 2).sum())
        abs_err += float(np.abs(pred - truth)[cells].sum())
        n_cells += int(cells.sum())

    entry = {
        "epoch": epoch + 1,
        "loss": float(np.mean(losses)),
        "masked_rmse": math.sqrt(sq_err / n_cells),
        "masked_mae": abs_err / n_cells,
    }

    if n_val:
        start = time.perf_counter()
        v_truth, v_avail, v_coords = _masked_truth(ds_norm, val_ids)

        def score(params):
            preds = forward_targets(state, ctx, v_coords, params)
            return rmse_loss(np.stack([p.value for p in preds]), v_truth, v_avail)

        best, best_score, _ = mcmc_update(state.sc_params, score, cfg.mcmc_steps, seed=[cfg.seed, epoch])
        state.sc_params = best
        entry["validation_rmse"] = best_score
        timer.add("mcmc", start)

    state.loss_history.append(entry["loss"])
    state.epochs_done += 1
    entry["seconds"] = {k: round(v, 6) for k, v in sorted(timer.totals.items())}
    return entry


def predict(state, ds, targets, normalized=False):
    """Series at arbitrary ``(lat, lon)`` targets from the known locations in ``ds``.

    Returns ``len(targets) x T x F``. Nothing in ``state`` is modified.
    """
    if not state.trained:
        raise StateError("model has not been trained")
    if ds.t != state.gll.cfg.n_steps or ds.f != state.gll.cfg.n_features:
        raise ValueError(
            f"dataset is T={ds.t}, F={ds.f}; model expects T={state.gll.cfg.n_steps}, F={state.gll.cfg.n_features}"
        )
    ds_norm, _ = normalize(ds, state.stats)
    ctx = build_context(ds_norm, state.config)
    coords = np.asarray(targets, dtype=float).reshape(-1, 2)
    out = np.stack([p.value for p in forward_targets(state, ctx, coords)])
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("non-finite prediction")
    if normalized:
        return out
    return out * state.stats.std + state.stats.mean


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(state, extra=None):
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "train_config": asdict(state.config),
        "gll_config": state.gll.cfg.to_dict(),
        "sigma_config": state.gll.cfg.sigma.to_dict(),
        "sc_params": state.sc_params.to_dict(),
        "norm_stats": {"mean": state.stats.mean.tolist(), "std": state.stats.std.tolist()},
        "epochs_done": state.epochs_done,
        "loss_history": list(state.loss_history),
        "params": state.gll.params.to_dict(),
    }
    if extra:
        doc.update(extra)
    return doc


def dumps_checkpoint(state, extra=None):
    return json.dumps(checkpoint_dict(state, extra), sort_keys=True, indent=1) + "\n"


class CheckpointError(ValueError):
    pass


def load_checkpoint(doc):
    """Rebuild a :class:`TrainState` from a checkpoint dict (or JSON text)."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    try:
        cfg = TrainConfig(**doc["train_config"])
        gcfg = GLLConfig(**doc["gll_config"])
        gll = GLL(gcfg, seed=cfg.seed)
        gll.params.load(doc["params"])
        stats = NormStats(np.asarray(doc["norm_stats"]["mean"], float), np.asarray(doc["norm_stats"]["std"], float))
        sc = SCParams.from_dict(doc["sc_params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    state = TrainState(cfg, gll, sc, stats)
    state.loss_history = list(doc.get("loss_history", []))
    state.epochs_done = int(doc.get("epochs_done", 0))
    return state
