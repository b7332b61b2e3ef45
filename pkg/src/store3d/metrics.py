"""Detection metrics: devkit-style mAP / NDS and the relevance-filtered variants.

RA restricts evaluation to a disc around the ego.  RM restricts the ground
truth to corridor-relevant agents; detections that land on irrelevant agents
are discarded rather than counted as false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .assignment import greedy_match
from .corridor import FrameLabels, RelevanceLabel
from .data import CLASSES, GTBox, SceneDataset
from .errors import MissingLabels
from .geometry import OrientedBoxBEV, Point2, angle_diff
from .io import read_jsonl, write_jsonl

TP_METRICS = ("trans_err", "scale_err", "orient_err", "vel_err", "attr_err")
AP_FORMULA = "101-point recall grid; AP = mean(max(p(r) - min_precision, 0) for r > min_recall) / (1 - min_precision)"
RM_FN_POLICY = "discard-irrelevant-matches"


@dataclass
class Detection:
    frame_id: str
    class_name: str
    box: OrientedBoxBEV
    score: float
    z: float = 0.0
    height: float = 1.0
    velocity: tuple[float, float] = (0.0, 0.0)
    attribute: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if not self.height > 0:
            raise ValueError("height must be positive")

    def to_record(self) -> dict:
        b = self.box
        return {
            "frame_id": self.frame_id,
            "class": self.class_name,
            "score": self.score,
            "box": {"x": b.center.x, "y": b.center.y, "z": self.z, "yaw": b.yaw, "l": b.length, "w": b.width, "h": self.height},
            "velocity": list(self.velocity),
            "attribute": self.attribute,
        }

    @classmethod
    def from_record(cls, r: dict) -> "Detection":
        b = r["box"]
        return cls(
            r["frame_id"],
            r["class"],
            OrientedBoxBEV(Point2(b["x"], b["y"]), b["yaw"], b["l"], b["w"]),
            float(r["score"]),
            float(b.get("z", 0.0)),
            float(b.get("h", 1.0)),
            tuple(r.get("velocity", (0.0, 0.0))),
            r.get("attribute", "none"),
        )


def write_detections(path, dets: Iterable[Detection], header: Optional[dict] = None) -> None:
    write_jsonl(path, (d.to_record() for d in dets), header)


def read_detections(path) -> list[Detection]:
    return [Detection.from_record(r) for r in read_jsonl(path)]


def detections_from_gt(dataset: SceneDataset, score: float = 1.0) -> list[Detection]:
    """Detections that reproduce the ground truth exactly."""
    out = []
    for _, frame in dataset.iter_frames():
        for g in frame.gt_boxes:
            out.append(Detection(frame.frame_id, g.class_name, g.box, score, g.z, g.height, g.velocity, g.attribute))
    return out


@dataclass
class MetricsConfig:
    center_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    ra_radius: float = 30.0
    min_recall: float = 0.1
    min_precision: float = 0.1
    classes: tuple[str, ...] = CLASSES
    # half-extents (x, y) of the ego-frame rectangle evaluated; None keeps everything
    eval_extent: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.eval_extent is not None and not all(e > 0 for e in self.eval_extent):
            raise ValueError("eval_extent must be positive")
        th = list(self.center_thresholds)
        if not th or any(t <= 0 for t in th) or th != sorted(th):
            raise ValueError("center_thresholds must be positive and ascending")
        if self.tp_threshold not in th:
            raise ValueError("tp_threshold must be one of center_thresholds")
        if not self.ra_radius > 0:
            raise ValueError("ra_radius must be positive")


# -- AP ---------------------------------------------------------------------


def interp_precision(rec: np.ndarray, prec: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Precision on the recall grid, linear between PR points and 0 beyond max recall.

    Same call as the benchmark devkit; where recall repeats (false-positive
    rows) np.interp takes the last point of the run.
    """
    if len(rec) == 0:
        return np.zeros(len(grid))
    return np.interp(grid, rec, prec, right=0.0)


def ap_from_pr(rec: np.ndarray, prec: np.ndarray, min_recall: float = 0.1, min_precision: float = 0.1) -> float:
    grid = np.linspace(0.0, 1.0, 101)
    p = interp_precision(np.asarray(rec, float), np.asarray(prec, float), grid)
    p = p[round(100 * min_recall) + 1 :] - min_precision
    p[p < 0] = 0.0
    return math.fsum(p) / len(p) / (1.0 - min_precision)


def _pr_curve(is_tp: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(is_tp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(is_tp, dtype=float))
    return tp / n_gt, tp / np.maximum(tp + fp, 1e-300)


@dataclass
class _FrameItems:
    frame_id: str
    dets: list[Detection]
    gts: list[GTBox]


def _match_class(frames: Sequence[_FrameItems], cls: str, threshold: float):
    """Score-sorted TP flags plus the matched (det, gt) pairs for one class."""
    scored = []  # (score, frame_id, index, is_tp)
    pairs = []
    for fr in frames:
        di = [i for i, d in enumerate(fr.dets) if d.class_name == cls]
        gi = [j for j, g in enumerate(fr.gts) if g.class_name == cls]
        dets = [fr.dets[i] for i in di]
        gts = [fr.gts[j] for j in gi]
        m = greedy_match(
            [d.box.center for d in dets], [d.score for d in dets], [g.box.center for g in gts], threshold
        )
        hit = {a: b for a, b, _ in m}
        for k, d in enumerate(dets):
            scored.append((d.score, fr.frame_id, di[k], k in hit))
            if k in hit:
                pairs.append((d, gts[hit[k]]))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [s[3] for s in scored], pairs


def average_precision(dets: Sequence[Detection], gts: Sequence[GTBox], cls: str, threshold: float, cfg: MetricsConfig, frame_of=None) -> float:
    """AP of one class at one centre-distance threshold.

    `dets`/`gts` may span frames; `frame_of(item)` gives the frame key
    (defaults to the detection's frame_id and a single GT frame).
    """
    frames = _group(dets, gts, frame_of)
    n_gt = sum(1 for fr in frames for g in fr.gts if g.class_name == cls)
    if n_gt == 0:
        return math.nan
    flags, _ = _match_class(frames, cls, threshold)
    if not flags:
        return 0.0
    rec, prec = _pr_curve(flags, n_gt)
    return ap_from_pr(rec, prec, cfg.min_recall, cfg.min_precision)


def _group(dets, gts, frame_of) -> list[_FrameItems]:
    if frame_of is None:
        fid = dets[0].frame_id if dets else "frame"
        return [_FrameItems(fid, list(dets), list(gts))]
    by: dict[str, _FrameItems] = {}
    for d in dets:
        by.setdefault(frame_of(d), _FrameItems(frame_of(d), [], [])).dets.append(d)
    for g in gts:
        by.setdefault(frame_of(g), _FrameItems(frame_of(g), [], [])).gts.append(g)
    return [by[k] for k in sorted(by)]


# -- TP errors / NDS ----------------------------------------------------------


def scale_iou(a_lwh: Sequence[float], b_lwh: Sequence[float]) -> float:
    """IoU of two boxes after aligning centres and headings."""
    inter = 1.0
    for x, y in zip(a_lwh, b_lwh):
        inter *= min(x, y)
    va = a_lwh[0] * a_lwh[1] * a_lwh[2]
    vb = b_lwh[0] * b_lwh[1] * b_lwh[2]
    return inter / (va + vb - inter)


def tp_errors(pairs: Sequence[tuple[Detection, GTBox]]) -> dict[str, float]:
    """Mean true-positive errors over matched pairs; 1.0 each when there are none."""
    if not pairs:
        return {k: 1.0 for k in TP_METRICS}
    te, se, oe, ve, ae = [], [], [], [], []
    for d, g in pairs:
        te.append(math.hypot(d.box.center.x - g.box.center.x, d.box.center.y - g.box.center.y))
        se.append(1.0 - scale_iou((d.box.length, d.box.width, d.height), (g.box.length, g.box.width, g.height)))
        oe.append(abs(angle_diff(d.box.yaw, g.box.yaw)))
        ve.append(math.hypot(d.velocity[0] - g.velocity[0], d.velocity[1] - g.velocity[1]))
        ae.append(0.0 if d.attribute == g.attribute else 1.0)
    n = len(pairs)
    return {k: math.fsum(v) / n for k, v in zip(TP_METRICS, (te, se, oe, ve, ae))}


def nds(mAP: float, errors: Mapping[str, float], metrics: Sequence[str] = TP_METRICS) -> float:
    """Composite score; with fewer than five error terms the weights renormalise."""
    tp = math.fsum(1.0 - min(1.0, errors[k]) for k in metrics)
    return (5.0 * mAP + tp) / (5.0 + len(metrics))


# -- filters ------------------------------------------------------------------


def _within(center: Point2, ego: Point2, radius: float) -> bool:
    return math.hypot(center.x - ego.x, center.y - ego.y) <= radius


def apply_ra_filter(dets: Sequence[Detection], gts: Sequence[GTBox], ego_center: Point2, ra_radius: float):
    if math.isinf(ra_radius):
        return list(dets), list(gts)
    return (
        [d for d in dets if _within(d.box.center, ego_center, ra_radius)],
        [g for g in gts if _within(g.box.center, ego_center, ra_radius)],
    )


def apply_extent_filter(dets: Sequence[Detection], gts: Sequence[GTBox], ego_pose, half_extent: Optional[tuple[float, float]]):
    """Keep items whose centre lies inside the ego-frame rectangle |x| < hx, |y| < hy."""
    if half_extent is None:
        return list(dets), list(gts)
    inv = ego_pose.inverse()
    hx, hy = half_extent

    def inside(p: Point2) -> bool:
        x, y = inv.apply(np.array([p.x, p.y]))
        return abs(x) < hx and abs(y) < hy

    return [d for d in dets if inside(d.box.center)], [g for g in gts if inside(g.box.center)]


def apply_rm_filter(dets: Sequence[Detection], gts: Sequence[GTBox], labels: Mapping[str, RelevanceLabel], match_threshold: float = 4.0):
    """Keep relevant GT; drop detections that match an irrelevant GT."""
    missing = [g.agent_id for g in gts if g.agent_id not in labels]
    if missing:
        raise MissingLabels(f"no relevance label for agents {missing[:5]}")
    relevant = [labels[g.agent_id].relevant for g in gts]
    drop: set[int] = set()
    for cls in sorted({d.class_name for d in dets}):
        di = [i for i, d in enumerate(dets) if d.class_name == cls]
        gi = [j for j, g in enumerate(gts) if g.class_name == cls]
        m = greedy_match(
            [dets[i].box.center for i in di], [dets[i].score for i in di], [gts[j].box.center for j in gi], match_threshold
        )
        drop.update(di[a] for a, b, _ in m if not relevant[gi[b]])
    return [d for i, d in enumerate(dets) if i not in drop], [g for g, r in zip(gts, relevant) if r]


# -- evaluation -----------------------------------------------------------------


@dataclass
class VariantResult:
    mAP: float
    per_class_ap: dict
    tp_errors: dict
    nds: float
    counts: dict


@dataclass
class MetricsReport:
    per_class_ap: dict
    mAP: float
    tp_errors: dict
    NDS: float
    mAP_RA: float
    NDS_RA: float
    NDS_RM: float
    counts: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "NDS": self.NDS,
            "mAP_RA": self.mAP_RA,
            "NDS_RA": self.NDS_RA,
            "NDS_RM": self.NDS_RM,
            "tp_errors": self.tp_errors,
            "per_class_ap": self.per_class_ap,
            "counts": self.counts,
            "metadata": self.metadata,
        }

    def csv_row(self) -> tuple[list[str], list[float]]:
        keys = ["mAP", "NDS", "mAP_RA", "NDS_RA", "NDS_RM"]
        return keys, [getattr(self, k) for k in keys]


def _active_tp_metrics(frames: Sequence[_FrameItems]) -> list[str]:
    gts = [g for fr in frames for g in fr.gts]
    metrics = ["trans_err", "scale_err", "orient_err"]
    if any(g.velocity is not None for g in gts) or not gts:
        metrics.append("vel_err")
    if any(g.attribute not in (None, "none") for g in gts) or not gts:
        metrics.append("attr_err")
    return metrics


def _evaluate_variant(frames: Sequence[_FrameItems], cfg: MetricsConfig, tp_metrics: Sequence[str]) -> VariantResult:
    per_class: dict = {}
    class_errors: dict = {}
    counts = {"tp": 0, "fp": 0, "gt": 0}
    aps = []
    for cls in cfg.classes:
        n_gt = sum(1 for fr in frames for g in fr.gts if g.class_name == cls)
        counts["gt"] += n_gt
        if n_gt == 0:
            continue  # no ground truth: AP undefined, class excluded from the mean
        per_class[cls] = {}
        for th in cfg.center_thresholds:
            flags, pairs = _match_class(frames, cls, th)
            if flags:
                rec, prec = _pr_curve(flags, n_gt)
                ap = ap_from_pr(rec, prec, cfg.min_recall, cfg.min_precision)
            else:
                ap = 0.0
            per_class[cls][str(th)] = ap
            aps.append(ap)
            if th == cfg.tp_threshold:
                class_errors[cls] = tp_errors(pairs)
                counts["tp"] += int(sum(flags))
                counts["fp"] += int(len(flags) - sum(flags))
    mAP = math.fsum(aps) / len(aps) if aps else 0.0
    if class_errors:
        errs = {k: math.fsum(e[k] for e in class_errors.values()) / len(class_errors) for k in TP_METRICS}
    else:
        errs = {k: 1.0 for k in TP_METRICS}
    return VariantResult(mAP, per_class, errs, nds(mAP, errs, tp_metrics), counts)


def labels_by_frame(labels: Iterable[FrameLabels]) -> dict[str, dict[str, RelevanceLabel]]:
    return {fl.frame_id: {lab.agent_id: lab for lab in fl.labels} for fl in labels}


def evaluate(
    dataset: SceneDataset,
    detections: Sequence[Detection],
    cfg: MetricsConfig,
    rm_labels: Optional[Mapping[str, Mapping[str, RelevanceLabel]]] = None,
) -> MetricsReport:
    """All metric variants in one pass; `rm_labels` maps frame_id -> agent_id -> label."""
    dets_by: dict[str, list[Detection]] = {}
    for d in detections:
        dets_by.setdefault(d.frame_id, []).append(d)
    frames_all, frames_ra, frames_rm = [], [], []
    for _, frame in sorted(dataset.iter_frames(), key=lambda sf: sf[1].frame_id):
        dets, gts = apply_extent_filter(dets_by.get(frame.frame_id, []), frame.gt_boxes, frame.ego_pose, cfg.eval_extent)
        frames_all.append(_FrameItems(frame.frame_id, dets, gts))
        frames_ra.append(_FrameItems(frame.frame_id, *apply_ra_filter(dets, gts, frame.ego_pose.translation, cfg.ra_radius)))
        if rm_labels is not None:
            labs = rm_labels.get(frame.frame_id)
            if labs is None:
                raise MissingLabels(f"no relevance labels for frame {frame.frame_id}")
            frames_rm.append(_FrameItems(frame.frame_id, *apply_rm_filter(dets, gts, labs, max(cfg.center_thresholds))))
    tp_metrics = _active_tp_metrics(frames_all)
    full = _evaluate_variant(frames_all, cfg, tp_metrics)
    ra = _evaluate_variant(frames_ra, cfg, tp_metrics)
    rm = _evaluate_variant(frames_rm, cfg, tp_metrics) if rm_labels is not None else None
    counts = {"all": full.counts, "ra": ra.counts}
    if rm is not None:
        counts["rm"] = rm.counts
    metadata = {
        "ap_formula": AP_FORMULA,
        "center_thresholds": list(cfg.center_thresholds),
        "tp_threshold": cfg.tp_threshold,
        "ra_radius": cfg.ra_radius,
        "eval_extent": list(cfg.eval_extent) if cfg.eval_extent is not None else None,
        "ra_shape": "disc around ego centre",
        "rm_fn_policy": RM_FN_POLICY,
        "nds_tp_metrics": list(tp_metrics),
        "nds_renormalized": len(tp_metrics) != len(TP_METRICS),
    }
    return MetricsReport(
        full.per_class_ap,
        full.mAP,
        full.tp_errors,
        full.nds,
        ra.mAP,
        ra.nds,
        rm.nds if rm is not None else math.nan,
        counts,
        metadata,
    )
