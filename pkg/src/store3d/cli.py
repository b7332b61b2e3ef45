"""Command-line entry point: ``python -m store3d <command> [flags]``.

Every command reads a RunConfig (``--config``), applies flag overrides, writes
its outputs under ``--out`` and embeds the config hash and tool version in each
file.  Failures print one JSON object on stderr, remove partial outputs and exit
with 2 (config), 3 (data) or 4 (check failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config, validate
from .corridor import calibrate_dmin, label_dataset, labels_from_records, labels_to_records
from .data import SceneDataset, gen_synthetic
from .errors import CheckFailure, ConfigError, DataError, Store3DError
from .io import OutputTracker, meta, read_jsonl, write_csv, write_json, write_jsonl
from .metrics import detections_from_gt, evaluate, labels_by_frame, read_detections, write_detections
from .numeric import load_weights, save_weights

COMMANDS = ("gen", "calibrate", "label", "eval", "simulate", "profile", "gradcheck", "curve")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="store3d", description="Relevance-aligned sparse 3D detection toolkit")
    p.add_argument("--version", action="version", version=f"store3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=None, help="output directory (default: io.out_dir)")
        sp.add_argument("--mode", choices=("dense", "sparse_eval", "sparse_train"))
        sp.add_argument("--tkr", type=float)
        sp.add_argument("--dmin", type=float)
        sp.add_argument("--ra-radius", type=float, dest="ra_radius")
        sp.add_argument("--dataset", help="dataset JSON (default: generate from the config)")
        sp.add_argument("--labels", help="relevance labels JSONL")
        sp.add_argument("--detections", help="detections JSONL")
        sp.add_argument("--weights", help="weights manifest (weights.json) written by `curve`")
        if name == "eval":
            sp.add_argument("--oracle", action="store_true", help="score the ground truth itself as detections")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synthetic = dataclasses.replace(cfg.synthetic, seed=args.seed)
    if args.mode is not None:
        cfg.mode = args.mode
    try:
        if args.tkr is not None:
            cfg.schedule = dataclasses.replace(cfg.schedule, tkr=args.tkr)
        if args.dmin is not None:
            cfg.relevance = dataclasses.replace(cfg.relevance, d_min=args.dmin)
        if args.ra_radius is not None:
            cfg.metrics = dataclasses.replace(cfg.metrics, ra_radius=args.ra_radius)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    for key in ("dataset", "labels", "detections"):
        if getattr(args, key) is not None:
            setattr(cfg.io, key, getattr(args, key))
    if args.out is not None:
        cfg.io.out_dir = args.out
    return validate(cfg)


class Context:
    def __init__(self, cfg: RunConfig, args, tracker: OutputTracker):
        self.cfg = cfg
        self.args = args
        self.tracker = tracker
        self.out = Path(cfg.io.out_dir)
        hashed = cfg.to_dict()
        # where results go does not change what they are
        hashed["io"].pop("out_dir")
        self.meta = meta(hashed, command=args.command)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.tracker(self.out / name)

    def dataset(self) -> SceneDataset:
        if self.cfg.io.dataset:
            return _load(SceneDataset.load, self.cfg.io.dataset, "dataset")
        return gen_synthetic(self.cfg.synthetic)

    def labels(self, dataset: SceneDataset):
        if self.cfg.io.labels:
            return _load(lambda p: labels_from_records(read_jsonl(p)), self.cfg.io.labels, "labels")
        return label_dataset(dataset, self.cfg.relevance)


def _load(fn, path, what):
    try:
        return fn(path)
    except FileNotFoundError as e:
        raise DataError(f"{what} file not found: {path}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"malformed {what} file {path}: {e}") from e


# -- commands --------------------------------------------------------------------------


def cmd_gen(ctx: Context) -> dict:
    ds = gen_synthetic(ctx.cfg.synthetic)
    p = ctx.path("dataset.json")
    ds.save(p, ctx.meta)
    return {"dataset": str(p), "scenes": len(ds.scenes), "frames": ds.n_frames()}


def cmd_calibrate(ctx: Context) -> dict:
    ds = ctx.dataset()
    d_min, cdf = calibrate_dmin(ds, ctx.cfg.relevance)
    pj, pc = ctx.path("calibration.json"), ctx.path("dist_cdf.csv")
    write_json(pj, {"meta": ctx.meta, "d_min": d_min, "percentile": ctx.cfg.relevance.percentile, "n_pairs": len(cdf)})
    write_csv(pc, ["dC", "cdf"], cdf, ctx.meta)
    return {"d_min": d_min, "calibration": str(pj), "cdf": str(pc)}


def cmd_label(ctx: Context) -> dict:
    ds = ctx.dataset()
    labels = label_dataset(ds, ctx.cfg.relevance)
    p = ctx.path("labels.jsonl")
    write_jsonl(p, labels_to_records(labels), ctx.meta)
    n_rel = sum(len(fl.relevant_ids()) for fl in labels)
    return {"labels": str(p), "frames": len(labels), "relevant": n_rel}


def cmd_eval(ctx: Context) -> dict:
    ds = ctx.dataset()
    if ctx.args.oracle:
        dets = detections_from_gt(ds)
    elif ctx.cfg.io.detections:
        dets = _load(read_detections, ctx.cfg.io.detections, "detections")
    else:
        raise ConfigError("eval needs --detections (or --oracle)")
    report = evaluate(ds, dets, ctx.cfg.metrics, labels_by_frame(ctx.labels(ds)))
    pj, pc = ctx.path("metrics.json"), ctx.path("metrics.csv")
    write_json(pj, {"meta": ctx.meta, **report.to_dict()})
    keys, vals = report.csv_row()
    write_csv(pc, keys, [vals], ctx.meta)
    return {k: v for k, v in zip(keys, vals)}


def _trained(ctx: Context):
    """Model with fitted heads: loaded from --weights or trained from the config."""
    from .experiment import load_model_state, train_all
    from .pipeline import build_model

    if ctx.args.weights:
        model = build_model(ctx.cfg.model)
        load_model_state(model, _load(load_weights, ctx.args.weights, "weights"))
        return model, None
    prep, info = train_all(ctx.cfg)
    return prep.model, info


def cmd_simulate(ctx: Context) -> dict:
    from .experiment import detections
    from .training import make_samples

    cfg = ctx.cfg
    model, info = _trained(ctx)
    ds = ctx.dataset()
    samples = make_samples(ds, cfg.model, seed=cfg.seed)
    sched = cfg.schedule.resolve(cfg.model)
    dets, traces = detections(model, samples, sched, cfg.mode, seed=cfg.seed)
    pd, pt = ctx.path("detections.jsonl"), ctx.path("trace.jsonl")
    write_detections(pd, dets, ctx.meta)
    write_jsonl(pt, ({"frame_id": s.inp.frame_id, **t.to_dict()} for s, t in zip(samples, traces)), ctx.meta)
    res = {"detections": str(pd), "trace": str(pt), "frames": len(samples), "n_detections": len(dets)}
    if info is not None:
        res["relevance_auc"] = info["relevance_auc"]
    return res


def cmd_profile(ctx: Context) -> dict:
    from .profiler import full_scale_shape, pipeline_flops, schedule_table_check, sensitivity, store_reactivate_schedule, toy_shape

    cfg = ctx.cfg
    tkr = cfg.schedule.tkr
    if cfg.profile.shape == "full_scale":
        shape = full_scale_shape(cfg.profile.bytes_per_element)
        sched = store_reactivate_schedule(tkr, shape)
    else:
        shape = dataclasses.replace(toy_shape(cfg.model), bytes_per_element=cfg.profile.bytes_per_element)
        sched = cfg.schedule.resolve(cfg.model)
    report = pipeline_flops(shape, None if tkr >= 1.0 else sched)
    p = ctx.path("profile.json")
    write_json(
        p,
        {
            "meta": ctx.meta,
            "shape": cfg.profile.shape,
            "report": report.to_dict(),
            "sensitivity": sensitivity(shape),
            "schedule_table": schedule_table_check(),
        },
    )
    return {"profile": str(p), "flops": report.total, "ratio": report.ratio, "buffer_bytes": report.buffer_bytes}


def cmd_gradcheck(ctx: Context) -> dict:
    from .gradcheck import TOLERANCE, run_suites, stop_gradient_check

    results = run_suites(ctx.cfg.seed)
    stop = stop_gradient_check(ctx.cfg.seed)
    rows = [(r.name, r.max_rel_err, r.passed) for r in results]
    # for the stop-gradient row the number is the largest change of any upstream weight
    rows.append(("stop_gradient", stop.upstream_change, stop.passed))
    p = ctx.path("gradcheck.csv")
    write_csv(p, ["suite", "max_rel_err", "passed"], rows, ctx.meta)
    for name, err, ok in rows:
        print(f"{name:20s} {err:.3e} {'PASS' if ok else 'FAIL'}")
    failed = [name for name, _, ok in rows if not ok]
    if failed:
        # the table is the primary output; keep it even though the command fails
        ctx.tracker.paths.remove(p)
        raise CheckFailure(f"gradient checks failed (tolerance {TOLERANCE:g}): {failed}")
    return {"gradcheck": str(p), "suites": len(rows)}


def cmd_curve(ctx: Context) -> dict:
    from .experiment import CURVE_HEADER, curve_rows, model_state, train_all

    t0 = time.perf_counter()
    prep, info = train_all(ctx.cfg)
    rows = curve_rows(prep, ctx.cfg)
    pc, pw, pi = ctx.path("curve.csv"), ctx.path("weights.json"), ctx.path("train_info.json")
    ctx.path("weights.bin")
    write_csv(pc, CURVE_HEADER, rows, ctx.meta)
    save_weights(pw, model_state(prep.model), ctx.meta)
    info["timings"]["total"] = time.perf_counter() - t0
    write_json(pi, {"meta": ctx.meta, **info})
    return {"curve": str(pc), "weights": str(pw), "rows": len(rows)}


HANDLERS = {
    "gen": cmd_gen,
    "calibrate": cmd_calibrate,
    "label": cmd_label,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "profile": cmd_profile,
    "gradcheck": cmd_gradcheck,
    "curve": cmd_curve,
}


def _error(kind: str, message: str, code: int, command: Optional[str]) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, "command": command}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    tracker = OutputTracker()
    try:
        cfg = resolve_config(args)
        summary = HANDLERS[args.command](Context(cfg, args, tracker))
    except Store3DError as e:
        tracker.cleanup()
        return _error(type(e).__name__, str(e), e.exit_code, args.command)
    except (ValueError, KeyError, FloatingPointError) as e:
        tracker.cleanup()
        return _error(type(e).__name__, str(e), DataError.exit_code, args.command)
    except BaseException:
        tracker.cleanup()
        raise
    print(json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in summary.items()}, default=_jsonable))
    return 0


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")
