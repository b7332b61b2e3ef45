"""Desk-scale training of the detection heads and the planning-relevance head.

The backbone and decoder stay frozen, so dense decoder outputs can be cached
once per frame.  Detection heads are fit on those by plain gradient descent on
the set-matching loss; the relevance head is then trained in sparse_train mode
while the keep ratio warms up linearly from dense to the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .assignment import Assignment, hungarian

from .corridor import FrameLabels
from .data import SceneDataset
from .losses import LossConfig, clamp_probs, gaussian_focal_loss, relevance_heatmap, relevance_targets, set_matching_loss
from .numeric import sigmoid
from .pipeline import (
    N_BOX,
    FrameInput,
    ModelConfig,
    PipelineOutput,
    ToyModel,
    anchors,
    decode_detections,
    default_schedules,
    render_frame,
    run_pipeline,
)
from .sparsity import RelevanceHeadParams, relevance_head_backward, relevance_head_forward, training_keep_ratio


@dataclass
class TrainConfig:
    det_iters: int = 300  # L-BFGS iterations per class
    assign_radius: float = 4.0  # metres; GT farther from every anchor is left unassigned
    box_ridge: float = 1.0
    cls_l2: float = 1e-4
    rel_iters: int = 500
    rel_lr: float = 0.01  # Adam step size
    rel_batch: int = 2
    warmup: tuple[int, int] = (0, 250)
    tkr: float = 0.5
    seed: int = 0


@dataclass
class FrameSample:
    inp: FrameInput
    gt_cls: np.ndarray
    gt_params: np.ndarray  # (G, N_BOX) absolute, x/y in cells
    gt_centers: np.ndarray  # (G, 2) ego frame
    gt_diag: np.ndarray
    relevant: Optional[np.ndarray]
    dense: Optional[PipelineOutput] = None
    rel_target: Optional[np.ndarray] = None  # per query, original-index order
    rel_heatmap: Optional[np.ndarray] = None


def gt_params(b, z, h, vel, cell: float) -> np.ndarray:
    return np.array([b.center.x / cell, b.center.y / cell, z, math.log(b.length), math.log(b.width), math.log(h), math.sin(b.yaw), math.cos(b.yaw), vel[0], vel[1]])


def pred_params(out: PipelineOutput, cfg: ModelConfig) -> np.ndarray:
    p = out.boxes.copy()
    p[:, 0] += out.queries.reference_points[:, 0] / cfg.cell
    p[:, 1] += out.queries.reference_points[:, 1] / cfg.cell
    return p


def make_samples(dataset: SceneDataset, cfg: ModelConfig, labels: Optional[Sequence[FrameLabels]] = None, seed: int = 0) -> list[FrameSample]:
    by_frame = {fl.frame_id: {l.agent_id: l for l in fl.labels} for fl in labels} if labels is not None else None
    out = []
    hx, hy = cfg.extent_x / 2, cfg.extent_y / 2
    for _, frame in dataset.iter_frames():
        inp = render_frame(frame, cfg, seed)
        cls, params, centers, diag, rel = [], [], [], [], []
        for g, b, vel in inp.gt_ego:
            if abs(b.center.x) >= hx or abs(b.center.y) >= hy or g.class_name not in cfg.classes:
                continue
            cls.append(cfg.classes.index(g.class_name))
            params.append(gt_params(b, g.z, g.height, vel, cfg.cell))
            centers.append((b.center.x, b.center.y))
            diag.append(b.diagonal)
            if by_frame is not None:
                rel.append(bool(by_frame[frame.frame_id][g.agent_id].relevant))
        out.append(
            FrameSample(
                inp,
                np.array(cls, dtype=int),
                np.array(params, dtype=float).reshape(-1, N_BOX),
                np.array(centers, dtype=float).reshape(-1, 2),
                np.array(diag, dtype=float),
                np.array(rel, dtype=bool) if by_frame is not None else None,
            )
        )
    return out


def cache_dense(samples: Sequence[FrameSample], model: ToyModel) -> None:
    for s in samples:
        s.dense = run_pipeline(s.inp, model, mode="dense")


def anchor_assignment(sample: FrameSample, cell: float, max_dist: float) -> Assignment:
    """One query per GT: Hungarian on reference-point to GT-centre distance (in cells)."""
    ref = sample.dense.queries.reference_points[:, :2] / cell
    if not len(sample.gt_params):
        return Assignment([], 0.0)
    d = np.sqrt(((ref[:, None, :] - sample.gt_params[None, :, :2]) ** 2).sum(axis=2))
    asg = hungarian(d)
    keep = [(r, c) for r, c in asg.pairs if d[r, c] * cell <= max_dist]
    return Assignment(keep, math.fsum(d[r, c] for r, c in keep))


def fit_det_heads(model: ToyModel, samples: Sequence[FrameSample], cfg: TrainConfig, extra: Sequence[tuple[FrameSample, PipelineOutput]] = ()) -> dict:
    """Fit both heads on cached dense features with a fixed anchor assignment.

    With the backbone and decoder frozen the heads are linear, so the box head
    is a ridge regression on assigned queries and the class head an
    L2-regularised per-class logistic regression over all queries.  Both are
    convex, unlike descent on the set loss whose matching moves every step.
    `extra` adds (sample, output) pairs from sparse runs so the heads also see
    queries that were reactivated from the buffer.
    """
    mcfg = model.cfg
    n_cls = len(mcfg.classes)
    X, Y, xs_pos, box_t = [], [], [], []
    for s, out in [(s, s.dense) for s in samples] + list(extra):
        x = out.head_input
        ref = out.queries.reference_points[:, :2] / mcfg.cell
        y = np.zeros((len(x), n_cls))
        for r, c in anchor_assignment(s, mcfg.cell, cfg.assign_radius).pairs:
            y[r, s.gt_cls[c]] = 1.0
            xs_pos.append(x[r])
            t = s.gt_params[c].copy()
            t[:2] -= ref[r]
            box_t.append(t)
        X.append(x)
        Y.append(y)
    X = np.concatenate(X)
    Y = np.concatenate(Y)
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-6
    Z = np.c_[(X - mu) / sd, np.ones(len(X))]
    fdim = Z.shape[1]

    # box head: ridge on positives (bias unpenalised)
    P = np.c_[(np.asarray(xs_pos) - mu) / sd, np.ones(len(xs_pos))]
    reg = cfg.box_ridge * np.eye(fdim)
    reg[-1, -1] = 0.0
    Wb = np.linalg.solve(P.T @ P + reg, P.T @ np.asarray(box_t))

    # class head: logistic regression per class
    Wc = np.zeros((fdim, n_cls))
    losses = []
    for k in range(n_cls):
        yk = Y[:, k]

        def f(w):
            z = Z @ w
            loss = np.logaddexp(0.0, z) - yk * z
            g = Z.T @ (sigmoid(z) - yk) / len(z)
            pen = 0.5 * cfg.cls_l2 * float(w[:-1] @ w[:-1])
            g[:-1] += cfg.cls_l2 * w[:-1]
            return float(loss.mean()) + pen, g

        w0 = np.zeros(fdim)
        w0[-1] = math.log((yk.sum() + 1.0) / (len(yk) - yk.sum() + 1.0))
        res = minimize(f, w0, jac=True, method="L-BFGS-B", options={"maxiter": cfg.det_iters})
        Wc[:, k] = res.x
        losses.append(float(res.fun))
    # fold standardisation into the heads
    model.det.w_cls = Wc[:-1] / sd[:, None]
    model.det.b_cls = Wc[-1] - (mu / sd) @ Wc[:-1]
    model.det.w_box = Wb[:-1] / sd[:, None]
    model.det.b_box = Wb[-1] - (mu / sd) @ Wb[:-1]
    resid = P @ Wb - np.asarray(box_t)
    return {"class_loss": losses, "box_l1": float(np.abs(resid).mean()), "positives": len(xs_pos)}


def sparse_outputs(samples: Sequence[FrameSample], model: ToyModel, ratios: Sequence[float], seed: int = 0) -> list[tuple[FrameSample, PipelineOutput]]:
    """One sparse_eval run per sample at a keep ratio drawn from `ratios`."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        r = float(ratios[rng.integers(len(ratios))])
        out.append((s, run_pipeline(s.inp, model, default_schedules(r, model.cfg), "sparse_eval")))
    return out


def refresh_outputs(samples: Sequence[FrameSample], model: ToyModel) -> None:
    """Recompute logits/boxes of cached dense outputs after the heads changed."""
    for s in samples:
        d = s.dense
        d.cls_logits = d.head_input @ model.det.w_cls + model.det.b_cls
        d.boxes = d.head_input @ model.det.w_box + model.det.b_box


def assign_relevance_targets(samples: Sequence[FrameSample], model: ToyModel, loss_cfg: LossConfig = LossConfig()) -> None:
    """Plan targets from the dense model's Hungarian matching to ground truth."""
    cfg = model.cfg
    for s in samples:
        d = s.dense
        sl = set_matching_loss(d.probs, pred_params(d, cfg), s.gt_cls, s.gt_params, loss_cfg)
        s.rel_target = relevance_targets(d.queries.reference_points, sl.assignment, s.gt_centers, s.gt_diag, s.relevant, "plan")
        s.rel_heatmap = relevance_heatmap(d.queries.reference_points, sl.assignment, s.gt_centers, s.gt_diag, s.relevant)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney estimate with average ranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def relevance_loss_and_grad(head: RelevanceHeadParams, q: np.ndarray, c: np.ndarray, ego, target: np.ndarray, loss_cfg: LossConfig):
    r, cache = relevance_head_forward(head, q, c, ego, "plan")
    loss, g_r = gaussian_focal_loss(clamp_probs(r), target, loss_cfg.gf_alpha, loss_cfg.gf_beta)
    g_r = g_r * (clamp_probs(r) == r)
    return loss, relevance_head_backward(head, cache, g_r)


def train_relevance(model: ToyModel, samples: Sequence[FrameSample], cfg: TrainConfig, loss_cfg: LossConfig = LossConfig()) -> list[dict]:
    """Adam on the head parameters; the keep ratio warms up from 1 to cfg.tkr."""
    rng = np.random.default_rng(cfg.seed)
    theta = model.rel_head.flat()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2 = 0.9, 0.999
    log = []
    for it in range(cfg.rel_iters):
        ratio = training_keep_ratio(it, cfg.warmup, cfg.tkr)
        sched = default_schedules(ratio, model.cfg)
        batch = rng.choice(len(samples), size=min(cfg.rel_batch, len(samples)), replace=False)
        grad = np.zeros_like(theta)
        loss = 0.0
        for b in batch:
            s = samples[b]
            out = run_pipeline(s.inp, model, sched, "sparse_train", seed=cfg.seed * 100003 + it)
            for st in out.stage_features:
                t = s.rel_heatmap[st.original_index]
                l, g = relevance_loss_and_grad(model.rel_head, st.q, st.c, s.inp.ego_state, t, loss_cfg)
                loss += l
                grad += g
        grad /= len(batch)
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        step = m1 / (1 - b1 ** (it + 1)) / (np.sqrt(m2 / (1 - b2 ** (it + 1))) + 1e-8)
        theta = theta - cfg.rel_lr * step
        model.rel_head = model.rel_head.with_flat(theta)
        log.append({"iter": it, "keep_ratio": ratio, "loss": loss / len(batch)})
    return log


def relevance_auc(model: ToyModel, samples: Sequence[FrameSample], tkr: float) -> tuple[float, int, int]:
    scores, labels = [], []
    sched = default_schedules(tkr, model.cfg)
    for s in samples:
        out = run_pipeline(s.inp, model, sched, "sparse_eval")
        for st in out.stage_features:
            scores.append(st.scores)
            labels.append(s.rel_target[st.original_index] > 0)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    return roc_auc(scores, labels), int(labels.sum()), int((~labels).sum())


def detections_for(samples: Sequence[FrameSample], model: ToyModel, tkr: float, mode: Optional[str] = None):
    mode = mode or ("dense" if tkr >= 1.0 else "sparse_eval")
    sched = default_schedules(tkr, model.cfg)
    dets = []
    for s in samples:
        out = run_pipeline(s.inp, model, sched, mode)
        dets.extend(decode_detections(out, s.inp, model))
    return dets
