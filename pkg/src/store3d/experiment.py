"""End-to-end toy experiment: data, labels, head fitting, relevance training, TKR sweep."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .corridor import FrameLabels, label_dataset
from .data import SceneDataset, gen_synthetic
from .metrics import MetricsConfig, MetricsReport, evaluate, labels_by_frame
from .numeric import FlopCounter
from .pipeline import ToyModel, build_model, decode_detections, run_pipeline
from .profiler import pipeline_flops, toy_shape
from .sparsity import RelevanceHeadParams
from .training import (
    FrameSample,
    assign_relevance_targets,
    cache_dense,
    fit_det_heads,
    make_samples,
    refresh_outputs,
    relevance_auc,
    sparse_outputs,
    train_relevance,
)


@dataclass
class Prepared:
    model: ToyModel
    train: SceneDataset
    test: SceneDataset
    train_labels: list[FrameLabels]
    test_labels: list[FrameLabels]
    train_samples: list[FrameSample]
    test_samples: list[FrameSample]
    timings: dict = field(default_factory=dict)


def metrics_config(cfg: RunConfig) -> MetricsConfig:
    """Evaluation restricted to the area the toy model can see, unless set explicitly."""
    m = cfg.metrics
    if m.eval_extent is None:
        m = dataclasses.replace(m, eval_extent=(cfg.model.extent_x / 2, cfg.model.extent_y / 2))
    return m


def prepare(cfg: RunConfig) -> Prepared:
    t0 = time.perf_counter()
    spec = cfg.synthetic
    train = gen_synthetic(dataclasses.replace(spec, n_scenes=cfg.curve.train_scenes, seed=cfg.curve.train_seed))
    test = gen_synthetic(dataclasses.replace(spec, n_scenes=cfg.curve.test_scenes, seed=cfg.curve.test_seed))
    ltr = label_dataset(train, cfg.relevance)
    lte = label_dataset(test, cfg.relevance)
    t1 = time.perf_counter()
    model = build_model(cfg.model)
    S = make_samples(train, cfg.model, ltr, seed=cfg.seed)
    T = make_samples(test, cfg.model, lte, seed=cfg.seed + 1)
    cache_dense(S, model)
    cache_dense(T, model)
    t2 = time.perf_counter()
    return Prepared(model, train, test, ltr, lte, S, T, {"data_and_labels": t1 - t0, "render_and_dense": t2 - t1})


def fit_heads(prep: Prepared, cfg: RunConfig) -> dict:
    """Detection heads on dense features, then relevance targets from the dense matching."""
    t0 = time.perf_counter()
    stats = fit_det_heads(prep.model, prep.train_samples, cfg.train)
    refresh_outputs(prep.train_samples, prep.model)
    refresh_outputs(prep.test_samples, prep.model)
    assign_relevance_targets(prep.train_samples, prep.model, cfg.loss)
    assign_relevance_targets(prep.test_samples, prep.model, cfg.loss)
    prep.timings["det_fit"] = time.perf_counter() - t0
    return stats


def fit_relevance(prep: Prepared, cfg: RunConfig) -> list[dict]:
    t0 = time.perf_counter()
    log = train_relevance(prep.model, prep.train_samples, cfg.train, cfg.loss)
    prep.timings["relevance_train"] = time.perf_counter() - t0
    return log


def refit_heads_sparse(prep: Prepared, cfg: RunConfig) -> dict:
    """Refit detection heads on dense plus sparse_eval features so reactivated queries are handled."""
    t0 = time.perf_counter()
    extra = sparse_outputs(prep.train_samples, prep.model, cfg.curve.refit_ratios, cfg.seed)
    stats = fit_det_heads(prep.model, prep.train_samples, cfg.train, extra)
    refresh_outputs(prep.train_samples, prep.model)
    refresh_outputs(prep.test_samples, prep.model)
    prep.timings["det_refit"] = time.perf_counter() - t0
    return stats


def train_all(cfg: RunConfig) -> tuple[Prepared, dict]:
    prep = prepare(cfg)
    info = {"det_fit": fit_heads(prep, cfg)}
    log = fit_relevance(prep, cfg)
    info["relevance_final_loss"] = log[-1]["loss"] if log else None
    t0 = time.perf_counter()
    info["relevance_auc"] = relevance_auc(prep.model, prep.test_samples, cfg.train.tkr)[0]
    prep.timings["relevance_auc"] = time.perf_counter() - t0
    if cfg.curve.refit_ratios:
        info["det_refit"] = refit_heads_sparse(prep, cfg)
    info["timings"] = dict(prep.timings)
    return prep, info


def detections(model: ToyModel, samples: Sequence[FrameSample], schedules, mode: str, seed: int = 0):
    dets, traces = [], []
    for s in samples:
        out = run_pipeline(s.inp, model, schedules, mode, seed=seed)
        dets.extend(decode_detections(out, s.inp, model))
        traces.append(out.trace)
    return dets, traces


def evaluate_tkr(prep: Prepared, cfg: RunConfig, tkr: float) -> tuple[MetricsReport, float]:
    """Metrics on the held-out split plus measured FLOPs per frame (instrumented)."""
    mode = "dense" if tkr >= 1.0 else "sparse_eval"
    sched = cfg.schedule.resolve(cfg.model, tkr)
    with FlopCounter() as fc:
        dets, _ = detections(prep.model, prep.test_samples, sched, mode)
    report = evaluate(prep.test, dets, metrics_config(cfg), labels_by_frame(prep.test_labels))
    return report, fc.flops / max(1, len(prep.test_samples))


CURVE_HEADER = ["keep_ratio", "flops", "flop_ratio", "measured_flops", "mAP", "NDS", "NDS_RM", "mAP_RA", "NDS_RA"]


def curve_rows(prep: Prepared, cfg: RunConfig) -> list[list[float]]:
    shape = toy_shape(cfg.model)
    rows = []
    for tkr in cfg.curve.tkrs:
        rep, measured = evaluate_tkr(prep, cfg, tkr)
        fr = pipeline_flops(shape, None if tkr >= 1.0 else cfg.schedule.resolve(cfg.model, tkr))
        d = rep.to_dict()
        rows.append([tkr, fr.total, fr.ratio, measured, d["mAP"], d["NDS"], d["NDS_RM"], d["mAP_RA"], d["NDS_RA"]])
    return rows


# -- trainable-state persistence -------------------------------------------------------


def model_state(model: ToyModel) -> dict[str, np.ndarray]:
    """Everything fitted after `build_model`; the rest is regenerated from the config seed."""
    return {
        "det.w_cls": model.det.w_cls,
        "det.b_cls": model.det.b_cls,
        "det.w_box": model.det.w_box,
        "det.b_box": model.det.b_box,
        "rel_head": model.rel_head.flat(),
    }


def load_model_state(model: ToyModel, arrays: dict[str, np.ndarray]) -> ToyModel:
    expected = model_state(model)
    for k, v in expected.items():
        if k not in arrays or arrays[k].shape != v.shape:
            from .errors import ShapeMismatch

            raise ShapeMismatch(f"weights entry {k}: expected shape {v.shape}")
    model.det.w_cls = arrays["det.w_cls"].copy()
    model.det.b_cls = arrays["det.b_cls"].copy()
    model.det.w_box = arrays["det.w_box"].copy()
    model.det.b_box = arrays["det.b_box"].copy()
    model.rel_head = model.rel_head.with_flat(arrays["rel_head"].copy())
    return model
