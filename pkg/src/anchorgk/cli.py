"""Command-line entry point: ``anchorgk synth|fit|predict|evaluate|bench``.

Exit codes are 0 on success, 1 when a run fails and 2 for usage, config or
input errors.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import resource
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import DataError, load_dataset, load_locations, split_masks
from .kriging import fit_feature_variogram, global_kriging, idw_predict
from .sscc import SCParams, cell_density, unified_adjacency
from .synth import DEFAULT_BOX, SynthConfig, synthesize, write_synth
from .trainer import (
    CheckpointError,
    TrainConfig,
    build_context,
    dumps_checkpoint,
    load_checkpoint,
    mae_metric,
    predict,
    rmse_loss,
    train,
)

log = logging.getLogger("anchorgk")

RUN_SCHEMA = "anchorgk.run/1"
BENCH_SCHEMA = "anchorgk.bench/1"
RUN_KEYS = {"schema", "locations", "readings", "out", "holdout_fraction", "holdout_seed"}
SC_KEYS = {"lambda", "sigma", "epsilon", "apply_density"}


class UsageError(Exception):
    """Bad configuration or input; maps to exit code 2."""


# ---------------------------------------------------------------- run config


def _check_type(key, value, expected):
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise UsageError(f"config field {key!r}: expected {expected.__name__}, got {value!r}")


def _read_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def load_run_config(path, overrides=None):
    """Parse a run config into ``(paths, TrainConfig, SCParams, holdout)``.

    Relative paths resolve against the config file's directory. Unknown keys
    and wrongly typed values raise :class:`UsageError` naming the field.
    """
    doc = _read_json(path, "config")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    doc.update(overrides or {})
    if doc.get("schema", RUN_SCHEMA) != RUN_SCHEMA:
        raise UsageError(f"config field 'schema': expected {RUN_SCHEMA!r}, got {doc['schema']!r}")
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - RUN_KEYS - SC_KEYS - set(train_types))
    if unknown:
        raise UsageError(f"config field {unknown[0]!r}: unknown key")
    for key in ("locations", "readings"):
        if key not in doc:
            raise UsageError(f"config field {key!r}: required")
    base = Path(path).resolve().parent
    paths = {}
    for key in ("locations", "readings", "out"):
        if key in doc:
            _check_type(key, doc[key], str)
            paths[key] = str((base / doc[key]).resolve())
    paths.setdefault("out", str(base))

    scalar = {"int": int, "float": float, "bool": bool}
    kwargs = {}
    for key, type_name in train_types.items():
        if key in doc:
            _check_type(key, doc[key], scalar[type_name])
            kwargs[key] = doc[key]
    try:
        cfg = TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None

    sc_doc = {k: doc[k] for k in SC_KEYS if k in doc}
    for key, value in sc_doc.items():
        _check_type(key, value, bool if key == "apply_density" else float)
    try:
        sc = SCParams.from_dict(sc_doc)
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from None

    fraction = doc.get("holdout_fraction", 0.2)
    _check_type("holdout_fraction", fraction, float)
    if not 0.0 <= fraction < 1.0:
        raise UsageError("config field 'holdout_fraction': must be in [0, 1)")
    seed = doc.get("holdout_seed", cfg.seed)
    _check_type("holdout_seed", seed, int)
    return paths, cfg, sc, {"fraction": float(fraction), "seed": seed}


def _load_data(locations, readings):
    for p in (locations, readings):
        if not Path(p).is_file():
            raise UsageError(f"data file not found: {p}")
    try:
        return load_dataset(locations, readings)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _holdout_split(ds, fraction, seed):
    if fraction <= 0:
        return list(ds.ids), []
    try:
        split = split_masks(ds, fraction, seed)
    except ValueError as exc:
        raise UsageError(f"holdout: {exc}") from None
    return sorted(split.observed_ids), sorted(split.masked_ids)


# ---------------------------------------------------------------- outputs


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return repr(float(x))


def strata_document(state, ds):
    """Strata of ``ds`` with the unified adjacency of every cell, JSON-ready."""
    ds_norm = ds.with_values(state.stats.apply(ds.values, ds.available))
    ctx = build_context(ds_norm, state.config)
    out = []
    for st in ctx.strata:
        adjacency = []
        for idx, cell in enumerate(st.cells):
            sc = unified_adjacency(ds_norm, st, idx, state.sc_params, cell_density(st, cell))
            adjacency.append(sc.to_dict())
        out.append({"stratum": st.to_dict(), "adjacency": adjacency})
    return {"sc_params": state.sc_params.to_dict(), "strata": out}


BLUE = np.array([0.0, 0.0, 255.0])
RED = np.array([255.0, 0.0, 0.0])


def colorize(values, lo, hi):
    """Linear blue-to-red RGB bytes; a flat field maps entirely to blue."""
    values = np.asarray(values, dtype=float)
    span = hi - lo
    s = np.zeros_like(values) if span <= 0 else np.clip((values - lo) / span, 0.0, 1.0)
    rgb = BLUE + s[..., None] * (RED - BLUE)
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path, rgb):
    height, width, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens followed by exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("not an 8-bit binary PPM")
    width, height = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1 :], dtype=np.uint8).reshape(height, width, 3)


def heatmap(state, ds, feature, step, shape, bbox=None):
    """Grid predictions for one feature and timestep.

    Row 0 is the northern edge. Returns ``(lats, lons, grid)``.
    """
    if not 0 <= feature < ds.f:
        raise UsageError(f"heatmap feature {feature} out of range [0, {ds.f})")
    if not 0 <= step < ds.t:
        raise UsageError(f"heatmap timestep {step} out of range [0, {ds.t})")
    coords = ds.coords
    lat0, lat1, lon0, lon1 = bbox or (coords[:, 0].min(), coords[:, 0].max(), coords[:, 1].min(), coords[:, 1].max())
    rows, cols = shape
    lats = np.linspace(lat1, lat0, rows)
    lons = np.linspace(lon0, lon1, cols)
    targets = [(lat, lon) for lat in lats for lon in lons]
    pred = predict(state, ds, targets)[:, step, feature]
    return lats, lons, pred.reshape(rows, cols)


def _parse_heatmap(tokens):
    spec = {}
    for tok in tokens:
        key, _, value = tok.partition("=")
        if key not in ("f", "t") or not value.lstrip("-").isdigit():
            raise UsageError(f"--heatmap expects f=<int> t=<int>, got {tok!r}")
        spec[key] = int(value)
    if set(spec) != {"f", "t"}:
        raise UsageError("--heatmap expects both f=<int> and t=<int>")
    return spec["f"], spec["t"]


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    box = tuple(args.box) if args.box else DEFAULT_BOX
    try:
        cfg = SynthConfig(
            n=args.n,
            t=args.t,
            f=args.f,
            seed=args.seed,
            box=box,
            range_km=args.range_km,
            ar_coef=args.ar_coef,
            feature_correlation=args.feature_correlation,
            noise_std=args.noise_std,
            thinning=args.thinning,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds, truth = write_synth(cfg, args.out)
    print(f"wrote {ds.n} locations x {ds.t} steps x {ds.f} features to {args.out}")
    return 0


def cmd_fit(args):
    if not args.config:
        raise UsageError("fit needs --config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    paths, cfg, sc, holdout = load_run_config(args.config, overrides)
    out = Path(args.out or paths["out"])
    ds = _load_data(paths["locations"], paths["readings"])
    train_ids, held_ids = _holdout_split(ds, holdout["fraction"], holdout["seed"])
    train_ds = ds.subset(train_ids)

    def progress(epoch, entry):
        log.info("epoch %d loss %.6f masked_rmse %.6f", epoch + 1, entry["loss"], entry["masked_rmse"])

    state, report = train(train_ds, cfg, sc, callback=progress)
    extra = {
        "data": {"locations": paths["locations"], "readings": paths["readings"]},
        "holdout": {**holdout, "ids": held_ids},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.json").write_text(dumps_checkpoint(state, extra))
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (out / "strata.json").write_text(json.dumps(strata_document(state, train_ds), indent=1) + "\n")
    print(f"trained {state.epochs_done} epochs, final loss {state.loss_history[-1]:.6f}; wrote {out}")
    return 0


def _load_model(path):
    doc = _read_json(path, "checkpoint")
    try:
        state = load_checkpoint(doc)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    return state, doc


def _model_data(args, doc):
    if args.data:
        base = Path(args.data)
        return _load_data(str(base / "locations.csv"), str(base / "readings.csv"))
    data = doc.get("data")
    if not data:
        raise UsageError("checkpoint records no data paths; pass --data")
    return _load_data(data["locations"], data["readings"])


def _check_shape(state, ds):
    cfg = state.gll.cfg
    if (ds.t, ds.f) != (cfg.n_steps, cfg.n_features):
        raise UsageError(f"data is T={ds.t}, F={ds.f}; checkpoint expects T={cfg.n_steps}, F={cfg.n_features}")


def cmd_predict(args):
    state, doc = _load_model(args.checkpoint)
    ds = _model_data(args, doc)
    _check_shape(state, ds)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.targets:
        if not Path(args.targets).is_file():
            raise UsageError(f"targets file not found: {args.targets}")
        try:
            targets = load_locations(args.targets)
        except DataError as exc:
            raise UsageError(str(exc)) from None
        pred = predict(state, ds, [(t.lat, t.lon) for t in targets])
        rows = (
            (tgt.id, t, f, _fmt(pred[m, t, f]))
            for m, tgt in enumerate(targets)
            for t in range(ds.t)
            for f in range(ds.f)
        )
        _write_csv(out / "predictions.csv", ["target_id", "t", "feature", "value"], rows)
        print(f"wrote {len(targets) * ds.t * ds.f} predictions to {out / 'predictions.csv'}")
    if args.heatmap:
        feature, step = _parse_heatmap(args.heatmap)
        lats, lons, grid = heatmap(state, ds, feature, step, (args.grid, args.grid))
        lo, hi = float(grid.min()), float(grid.max())
        write_ppm(out / "heatmap.ppm", colorize(grid, lo, hi))
        _write_csv(
            out / "heatmap_grid.csv",
            ["row", "col", "lat", "lon", "value"],
            ((r, c, _fmt(lats[r]), _fmt(lons[c]), _fmt(grid[r, c])) for r in range(len(lats)) for c in range(len(lons))),
        )
        legend = {
            "feature": feature,
            "t": step,
            "min": lo,
            "max": hi,
            "colormap": {"type": "linear", "low_rgb": BLUE.astype(int).tolist(), "high_rgb": RED.astype(int).tolist()},
            "bbox": {"lat": [float(lats[-1]), float(lats[0])], "lon": [float(lons[0]), float(lons[-1])]},
            "shape": list(grid.shape),
        }
        (out / "heatmap.json").write_text(json.dumps(legend, indent=1) + "\n")
        print(f"wrote heatmap {grid.shape[0]}x{grid.shape[1]} to {out / 'heatmap.ppm'}")
    if not args.targets and not args.heatmap:
        raise UsageError("predict needs --targets and/or --heatmap")
    return 0


def baseline_predictions(known, coords, method):
    """``len(coords) x T x F`` from ordinary kriging or IDW over ``known``."""
    out = np.zeros((len(coords), known.t, known.f))
    for f in range(known.f):
        rows = np.flatnonzero(known.available[:, f])
        if rows.size == 0:
            continue
        if method == "ok":
            vario = fit_feature_variogram(known, f)
            for m, c in enumerate(coords):
                out[m, :, f] = global_kriging(known, f, c, vario)
        else:
            for m, c in enumerate(coords):
                out[m, :, f] = idw_predict(known.coords[rows], known.values[rows, :, f], c, metric="haversine")
    return out


def metrics_table(predictions, truth, available):
    """``[(method, mae, rmse), ...]`` over available cells, in insertion order."""
    return [(name, mae_metric(p, truth, available), rmse_loss(p, truth, available)) for name, p in predictions.items()]


def cmd_evaluate(args):
    state, doc = _load_model(args.checkpoint)
    ds = _model_data(args, doc)
    _check_shape(state, ds)
    if args.mask_seed is not None:
        fraction = args.mask_fraction or doc.get("holdout", {}).get("fraction") or 0.2
        known_ids, held = _holdout_split(ds, fraction, args.mask_seed)
    else:
        held = list(doc.get("holdout", {}).get("ids", []))
        known_ids = [i for i in ds.ids if i not in set(held)]
    if not held:
        raise UsageError("no held-out locations to evaluate; pass --mask-seed")
    try:
        rows = [ds.index_of(i) for i in held]
    except KeyError as exc:
        raise UsageError(f"held-out location {exc} not in data") from None

    baselines = [b for b in args.baselines.split(",") if b] if args.baselines else []
    bad = sorted(set(baselines) - {"ok", "idw"})
    if bad:
        raise UsageError(f"unknown baseline {bad[0]!r}; choose from ok, idw")

    known = ds.subset(known_ids)
    coords = ds.coords[rows]
    truth = state.stats.apply(ds.values[rows], ds.available[rows])
    available = ds.available[rows]
    known_norm = known.with_values(state.stats.apply(known.values, known.available))
    preds = {"anchorgk": predict(state, known, coords, normalized=True)}
    for name in baselines:
        preds[name] = baseline_predictions(known_norm, coords, name)

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    table = metrics_table(preds, truth, available)
    _write_csv(out / "metrics.csv", ["method", "mae", "rmse"], ((n, _fmt(a), _fmt(r)) for n, a, r in table))
    dump = (
        (name, held[m], t, f, _fmt(p[m, t, f]), _fmt(truth[m, t, f]))
        for name, p in preds.items()
        for m in range(len(held))
        for t in range(ds.t)
        for f in range(ds.f)
        if available[m, f]
    )
    _write_csv(out / "eval_predictions.csv", ["method", "target_id", "t", "feature", "prediction", "truth"], dump)
    for name, mae, rmse in table:
        print(f"{name:10s} mae {mae:.6f} rmse {rmse:.6f}")
    return 0


BENCH_DEFAULTS = {"q": [5], "u": [5], "n": [30], "f": [3], "t": 50, "seed": 0, "train": {}}


def load_bench_config(path):
    doc = dict(BENCH_DEFAULTS)
    if path:
        user = _read_json(path, "bench config")
        if not isinstance(user, dict):
            raise UsageError("bench config must be a JSON object")
        if user.get("schema", BENCH_SCHEMA) != BENCH_SCHEMA:
            raise UsageError(f"bench config field 'schema': expected {BENCH_SCHEMA!r}")
        unknown = sorted(set(user) - set(BENCH_DEFAULTS) - {"schema"})
        if unknown:
            raise UsageError(f"bench config field {unknown[0]!r}: unknown key")
        doc.update(user)
    for key in ("q", "u", "n", "f"):
        if isinstance(doc[key], int):
            doc[key] = [doc[key]]
        if not doc[key] or not all(isinstance(v, int) and v >= 1 for v in doc[key]):
            raise UsageError(f"bench config field {key!r}: expected a list of positive integers")
    unknown = sorted(set(doc["train"]) - TrainConfig.field_names())
    if unknown:
        raise UsageError(f"bench config field 'train.{unknown[0]}': unknown key")
    return doc


def bench_rows(doc):
    """One timing row per (q, u, n, f) combination."""
    base = TrainConfig(**{"epochs": 1, "masks_per_epoch": 1, "mcmc_every": 0, **doc["train"]})
    rows = []
    for q, u, n, f in itertools.product(doc["q"], doc["u"], doc["n"], doc["f"]):
        ds, _ = synthesize(SynthConfig(n=n, t=doc["t"], f=f, seed=doc["seed"]))
        cfg = replace(base, anchors=min(q, n), neighbors=u, seed=doc["seed"])
        start = time.perf_counter()
        build_context(ds, cfg)
        pre = time.perf_counter() - start
        start = time.perf_counter()
        _, report = train(ds, cfg)
        epoch = (time.perf_counter() - start) / cfg.epochs
        phases = {}
        for entry in report["epochs"]:
            for k, v in entry["seconds"].items():
                phases[k] = phases.get(k, 0.0) + v / cfg.epochs
        rows.append(
            {
                "q": q,
                "u": u,
                "n": n,
                "f": f,
                "t": doc["t"],
                "preprocess_s": pre,
                "epoch_s": epoch,
                **{f"{k}_s": phases.get(k, 0.0) for k in ("sscc", "kriging", "gll", "backward")},
                "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
            }
        )
    return rows


def cmd_bench(args):
    doc = load_bench_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    rows = bench_rows(doc)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0])
    _write_csv(out / "bench.csv", header, ([r[k] for k in header] for r in rows))
    for r in rows:
        print(f"q={r['q']} u={r['u']} n={r['n']} f={r['f']}: pre {r['preprocess_s']:.3f}s epoch {r['epoch_s']:.3f}s")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="anchorgk", description="Anchor-based stratified spatio-temporal kriging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--t", type=int, default=200)
    p.add_argument("--f", type=int, default=3)
    p.add_argument("--range-km", type=float, default=20.0)
    p.add_argument("--ar-coef", type=float, default=0.8)
    p.add_argument("--feature-correlation", type=float, default=0.5)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--thinning", type=float, default=0.0, help="fraction of (location, feature) pairs to drop")
    p.add_argument("--box", type=float, nargs=4, metavar=("LAT0", "LAT1", "LON0", "LON1"))
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("fit", parents=[common], help="train a model from a run config")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict at target coordinates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", help="CSV with id,lat,lon")
    p.add_argument("--data", help="directory with locations.csv and readings.csv (default: checkpoint's data)")
    p.add_argument("--heatmap", nargs=2, metavar=("f=I", "t=J"))
    p.add_argument("--grid", type=int, default=16, help="heatmap resolution per side")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score held-out locations against baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mask-seed", type=int, help="draw a fresh split instead of the checkpoint's holdout")
    p.add_argument("--mask-fraction", type=float)
    p.add_argument("--baselines", default="ok,idw", help="comma-separated subset of ok,idw")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", parents=[common], help="time preprocessing and training over a sweep")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "out", None) is None and args.command == "synth":
        parser.error("synth needs --out")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"anchorgk: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface any run failure as exit 1
        log.debug("run failed", exc_info=True)
        print(f"anchorgk: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
