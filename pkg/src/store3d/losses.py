"""Detection set loss, relevance loss and auxiliary loss, each with an analytic gradient.

Sums use `math.fsum` so that losses do not depend on the order of their terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .assignment import Assignment, hungarian
from .errors import DomainError, MissingLabels, ShapeMismatch

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_rel: float = 1.0
    lambda_aux: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    gf_alpha: float = 2.0
    gf_beta: float = 4.0
    match_class_weight: float = 2.0
    match_l1_weight: float = 0.25

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be finite and non-negative")


@dataclass
class LossBreakdown:
    det_class: float
    det_l1: float
    rel: float
    aux: float
    total: float


def clamp_probs(p):
    return np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)


def _check_open_unit(p: np.ndarray) -> None:
    if np.any(p <= 0.0) or np.any(p >= 1.0) or not np.all(np.isfinite(p)):
        raise DomainError("predictions must lie strictly inside (0, 1); clamp first")


def _fsum(a: np.ndarray) -> float:
    return math.fsum(np.ravel(a).tolist())


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Mean of -alpha (1 - p_t)^gamma log p_t and its gradient w.r.t. p."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ShapeMismatch(f"preds {p.shape} vs targets {y.shape}")
    _check_open_unit(p)
    n = p.size
    if n == 0:
        return 0.0, np.zeros_like(p)
    pos = y > 0.5
    pt = np.where(pos, p, 1.0 - p)
    q = 1.0 - pt
    loss = -alpha * q**gamma * np.log(pt)
    # d/dpt of -(1-pt)^g log pt
    dq = gamma * q ** (gamma - 1.0) if gamma != 0 else np.zeros_like(q)
    dpt = alpha * (dq * np.log(pt) - q**gamma / pt)
    grad = np.where(pos, dpt, -dpt) / n
    return _fsum(loss) / n, grad


def gaussian_focal_loss(p, y, alpha: float = 2.0, beta: float = 4.0) -> tuple[float, np.ndarray]:
    """Heatmap focal loss with soft negatives, normalised by the positive count (min 1)."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ShapeMismatch(f"preds {p.shape} vs targets {y.shape}")
    _check_open_unit(p)
    pos = y == 1.0
    n_pos = max(1, int(pos.sum()))
    w_neg = (1.0 - y) ** beta
    lp = -((1.0 - p) ** alpha) * np.log(p)
    ln = -w_neg * p**alpha * np.log(1.0 - p)
    loss = np.where(pos, lp, ln)
    glp = alpha * (1.0 - p) ** (alpha - 1.0) * np.log(p) - (1.0 - p) ** alpha / p
    gln = -w_neg * (alpha * p ** (alpha - 1.0) * np.log(1.0 - p) - p**alpha / (1.0 - p))
    grad = np.where(pos, glp, gln) / n_pos
    return _fsum(loss) / n_pos, grad


def l1_box_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean absolute difference; the subgradient at equality is 0."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.size == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - gt
    return _fsum(np.abs(diff)) / diff.size, np.sign(diff) / diff.size


def match_cost(probs: np.ndarray, boxes: np.ndarray, gt_cls: Sequence[int], gt_boxes: np.ndarray, cfg: LossConfig) -> np.ndarray:
    gt_cls = np.asarray(gt_cls, dtype=int)
    cls_cost = 1.0 - probs[:, gt_cls]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).mean(axis=2)
    return cfg.match_class_weight * cls_cost + cfg.match_l1_weight * l1


@dataclass
class SetLoss:
    det_class: float
    det_l1: float
    assignment: Assignment  # (prediction row, gt index)
    grad_probs: np.ndarray
    grad_boxes: np.ndarray


def set_matching_loss(probs, boxes, gt_cls, gt_boxes, cfg: LossConfig) -> SetLoss:
    """Hungarian-matched focal + L1; unmatched predictions are pushed to background."""
    probs = clamp_probs(probs)
    boxes = np.asarray(boxes, dtype=float)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, boxes.shape[1])
    gt_cls = np.asarray(gt_cls, dtype=int)
    if len(probs) != len(boxes):
        raise ShapeMismatch("one box per prediction required")
    if len(gt_cls) != len(gt_boxes):
        raise ShapeMismatch("one class per GT box required")
    if len(gt_cls):
        asg = hungarian(match_cost(probs, boxes, gt_cls, gt_boxes, cfg))
    else:
        asg = Assignment([], 0.0)
    target = np.zeros_like(probs)
    rows = np.array(asg.rows, dtype=int)
    cols = np.array(asg.cols, dtype=int)
    if len(rows):
        target[rows, gt_cls[cols]] = 1.0
    cls_loss, g_p = focal_loss(probs, target, cfg.focal_alpha, cfg.focal_gamma)
    g_b = np.zeros_like(boxes)
    if len(rows):
        l1, g = l1_box_loss(boxes[rows], gt_boxes[cols])
        g_b[rows] = g
    else:
        l1 = 0.0
    return SetLoss(cls_loss, l1, asg, g_p, g_b)


def relevance_targets(
    ref_points: np.ndarray,
    assignment: Assignment,
    gt_centers: np.ndarray,
    gt_diagonals: Sequence[float],
    relevant: Optional[Sequence[bool]],
    kind: str = "plan",
) -> np.ndarray:
    """Per-query targets in [0, 1].

    plan: queries matched to a relevant GT get exp(-d^2 / (2 sigma^2)) with d
    the reference-point to GT-centre distance and sigma half the GT diagonal.
    det: matched queries get 1.
    """
    ref_points = np.asarray(ref_points, dtype=float)
    t = np.zeros(len(ref_points))
    if kind == "det":
        for r, _ in assignment.pairs:
            t[r] = 1.0
        return t
    if kind != "plan":
        raise ValueError("kind must be 'plan' or 'det'")
    if relevant is None:
        raise MissingLabels("plan targets need corridor labels")
    gt_centers = np.asarray(gt_centers, dtype=float).reshape(-1, 2)
    if len(relevant) != len(gt_centers):
        raise MissingLabels("one relevance label per GT required")
    for r, g in assignment.pairs:
        if relevant[g]:
            d2 = float(np.sum((ref_points[r, :2] - gt_centers[g]) ** 2))
            sigma = 0.5 * gt_diagonals[g]
            t[r] = math.exp(-d2 / (2.0 * sigma * sigma))
    return t


def relevance_heatmap(
    ref_points: np.ndarray,
    assignment: Assignment,
    gt_centers: np.ndarray,
    gt_diagonals: Sequence[float],
    relevant: Sequence[bool],
) -> np.ndarray:
    """Training heatmap for the Gaussian focal loss.

    Each relevant GT splats its Gaussian over every query, rescaled so the
    query it was matched to sits at the peak value 1 (and clipped at 1).  The
    loss treats peaks as positives and the rest as soft negatives whose
    penalty shrinks near a relevant agent.
    """
    ref = np.asarray(ref_points, dtype=float)[:, :2]
    gt_centers = np.asarray(gt_centers, dtype=float).reshape(-1, 2)
    t = np.zeros(len(ref))
    for r, g in assignment.pairs:
        if not relevant[g]:
            continue
        sigma2 = (0.5 * gt_diagonals[g]) ** 2
        d2 = np.sum((ref - gt_centers[g]) ** 2, axis=1)
        t = np.maximum(t, np.exp(np.minimum(0.0, -(d2 - d2[r]) / (2.0 * sigma2))))
        t[r] = 1.0
    return t


def aux_roi_loss(obj_probs, obj_targets, offsets, offset_targets, cfg: LossConfig):
    """Per-token objectness focal loss plus centre-offset L1 on positive tokens."""
    obj_probs = clamp_probs(obj_probs)
    obj_targets = np.asarray(obj_targets, dtype=float)
    cls, g_p = focal_loss(obj_probs, obj_targets, cfg.focal_alpha, cfg.focal_gamma)
    pos = obj_targets > 0.5
    g_off = np.zeros_like(offsets)
    if pos.any():
        l1, g = l1_box_loss(offsets[pos], offset_targets[pos])
        g_off[pos] = g
    else:
        l1 = 0.0
    return cls + l1, g_p, g_off


def joint_loss(det_class: float, det_l1: float, rel: float, aux: float, cfg: LossConfig, rel_embedding_grad=None) -> LossBreakdown:
    """Weighted sum of the four terms.

    The relevance term must not carry a gradient into the embeddings it
    scored; a caller passing one has broken the stop-gradient contract.
    """
    if rel_embedding_grad is not None:
        raise AssertionError("relevance loss must not propagate into token/query embeddings")
    total = det_class + det_l1 + cfg.lambda_rel * rel + cfg.lambda_aux * aux
    return LossBreakdown(det_class, det_l1, rel, aux, total)
