"""Finite-difference suites for every analytic gradient in the package."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossConfig, aux_roi_loss, clamp_probs, focal_loss, gaussian_focal_loss, joint_loss, l1_box_loss, set_matching_loss
from .numeric import GumbelTopkConfig, finite_diff_check, gumbel_topk, sigmoid
from .sparsity import RelevanceHeadParams, relevance_head_backward, relevance_head_forward, relevance_head_input_grad

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    passed: bool


def _soft_topk(rng: np.random.Generator) -> float:
    n, k = 12, 4
    w = rng.normal(size=n)
    cfg = GumbelTopkConfig(k, temperature=0.7, seed=int(rng.integers(1 << 30)), mode="soft")

    def f(s):
        res = gumbel_topk(s, cfg)
        return float(w @ res.soft_weights), res.backward(w)

    return max(finite_diff_check(f, rng.normal(size=n), STEP) for _ in range(3))


def _relevance_head(rng: np.random.Generator) -> float:
    d = 6
    head = RelevanceHeadParams.init(d, d, 5, rng, ego_dim=4)
    q, c = rng.normal(size=(7, d)), rng.normal(size=(7, d))
    ego = rng.normal(size=3)
    target = rng.uniform(size=7)
    target[2] = 1.0

    def f(theta):
        h = head.with_flat(theta)
        r, cache = relevance_head_forward(h, q, c, ego, "plan")
        loss, g_r = gaussian_focal_loss(clamp_probs(r), target)
        return loss, relevance_head_backward(h, cache, g_r)

    return finite_diff_check(f, head.flat(), STEP)


def _relevance_inputs(rng: np.random.Generator) -> float:
    """Undetached path from the relevance loss back into q and c."""
    d = 6
    head = RelevanceHeadParams.init(d, d, 5, rng, ego_dim=4)
    q0, c0 = rng.normal(size=(7, d)), rng.normal(size=(7, d))
    ego = rng.normal(size=3)
    target = rng.uniform(size=7)
    target[4] = 1.0

    def f(x):
        q, c = x[: q0.size].reshape(q0.shape), x[q0.size :].reshape(c0.shape)
        r, cache = relevance_head_forward(head, q, c, ego, "plan")
        loss, g_r = gaussian_focal_loss(clamp_probs(r), target)
        g_q, g_c = relevance_head_input_grad(head, cache, g_r, d)
        return loss, np.concatenate([g_q.ravel(), g_c.ravel()])

    return finite_diff_check(f, np.concatenate([q0.ravel(), c0.ravel()]), STEP)


def _focal(rng: np.random.Generator) -> float:
    y = (rng.uniform(size=20) < 0.3).astype(float)
    return finite_diff_check(lambda p: focal_loss(p, y, 0.25, 2.0), rng.uniform(0.05, 0.95, size=20), STEP)


def _gaussian_focal(rng: np.random.Generator) -> float:
    y = rng.uniform(size=20)
    y[[1, 7]] = 1.0
    return finite_diff_check(lambda p: gaussian_focal_loss(p, y, 2.0, 4.0), rng.uniform(0.05, 0.95, size=20), STEP)


def _l1(rng: np.random.Generator) -> float:
    gt = rng.normal(size=(5, 10))
    # stay away from the kink at equality
    pred = gt + rng.choice([-1.0, 1.0], size=gt.shape) * rng.uniform(0.01, 1.0, size=gt.shape)
    return finite_diff_check(lambda x: l1_box_loss(x.reshape(gt.shape), gt), pred.ravel(), STEP)


def _joint(rng: np.random.Generator) -> float:
    """Total loss over (detection logits, boxes, relevance logits, aux logits, aux offsets)."""
    cfg = LossConfig()
    nq, nc, nb, ng = 8, 3, 10, 3
    gt_cls = rng.integers(0, nc, size=ng)
    gt_boxes = rng.normal(size=(ng, nb))
    rel_t = rng.uniform(size=nq)
    rel_t[0] = 1.0
    aux_t = (rng.uniform(size=6) < 0.5).astype(float)
    off_t = rng.normal(size=(6, 2))
    sizes = [nq * nc, nq * nb, nq, 6, 12]
    cuts = np.cumsum(sizes)[:-1]

    def f(x):
        a, b, r, o, off = np.split(x, cuts)
        p = sigmoid(a.reshape(nq, nc))
        boxes = b.reshape(nq, nb)
        sl = set_matching_loss(p, boxes, gt_cls, gt_boxes, cfg)
        pr = sigmoid(r)
        rel, g_pr = gaussian_focal_loss(pr, rel_t, cfg.gf_alpha, cfg.gf_beta)
        po = sigmoid(o)
        aux, g_po, g_off = aux_roi_loss(po, aux_t, off.reshape(6, 2), off_t, cfg)
        total = joint_loss(sl.det_class, sl.det_l1, rel, aux, cfg).total
        grad = np.concatenate(
            [
                (sl.grad_probs * p * (1 - p)).ravel(),
                sl.grad_boxes.ravel(),
                cfg.lambda_rel * g_pr * pr * (1 - pr),
                cfg.lambda_aux * g_po * po * (1 - po),
                cfg.lambda_aux * g_off.ravel(),
            ]
        )
        return total, grad

    x0 = rng.normal(size=sum(sizes))
    return finite_diff_check(f, x0, STEP)


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "gumbel_topk_soft": _soft_topk,
    "relevance_head": _relevance_head,
    "relevance_inputs": _relevance_inputs,
    "focal": _focal,
    "gaussian_focal": _gaussian_focal,
    "l1": _l1,
    "joint_loss": _joint,
}


def run_suites(seed: int = 0, tolerance: float = TOLERANCE) -> list[SuiteResult]:
    out = []
    for name, fn in SUITES.items():
        err = fn(np.random.default_rng([seed, len(out)]))
        out.append(SuiteResult(name, err, bool(err < tolerance)))
    return out


@dataclass
class StopGradientResult:
    upstream_change: float  # largest |change| of any weight that produces q or c
    head_change: float  # the head itself must move
    input_grad_norm: float  # what the loss would send into q and c without the stop

    @property
    def passed(self) -> bool:
        return self.upstream_change == 0.0 and self.head_change > 0.0 and self.input_grad_norm > 0.0


def _upstream_arrays(model) -> list[np.ndarray]:
    """Every array in the model except the relevance head, copied."""
    out = []

    def walk(v):
        if isinstance(v, np.ndarray):
            out.append(v.copy())
        elif isinstance(v, (list, tuple)):
            for x in v:
                walk(x)
        elif dataclasses.is_dataclass(v) and not isinstance(v, type):
            for f in dataclasses.fields(v):
                if not isinstance(getattr(v, f.name), (int, float, str)):
                    walk(getattr(v, f.name))

    for f in dataclasses.fields(model):
        if f.name not in ("cfg", "rel_head"):
            walk(getattr(model, f.name))
    return out


def stop_gradient_check(seed: int = 0, iters: int = 3) -> StopGradientResult:
    """A few relevance-training steps on a small model; nothing upstream of the head may change."""
    from .corridor import RelevanceConfig, label_dataset
    from .data import SyntheticSpec, gen_synthetic
    from .pipeline import ModelConfig, build_model
    from .training import TrainConfig, assign_relevance_targets, cache_dense, make_samples, train_relevance

    cfg = ModelConfig(grid=(8, 8), query_grid=(8, 16), head_features=16, seed=seed)
    ds = gen_synthetic(SyntheticSpec(n_scenes=1, duration=3.0, seed=seed))
    model = build_model(cfg)
    samples = make_samples(ds, cfg, label_dataset(ds, RelevanceConfig()), seed)
    cache_dense(samples, model)
    assign_relevance_targets(samples, model)
    before = _upstream_arrays(model)
    head0 = model.rel_head.flat()
    train_relevance(model, samples, TrainConfig(rel_iters=iters, warmup=(0, iters), tkr=0.5, seed=seed))
    after = _upstream_arrays(model)
    upstream = max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(before, after))

    # the same loss with the stop lifted does depend on q and c
    from .pipeline import default_schedules, run_pipeline

    s = samples[0]
    out = run_pipeline(s.inp, model, default_schedules(0.5, cfg), "sparse_eval")
    run_stage = out.stage_features[0]
    r, cache = relevance_head_forward(model.rel_head, run_stage.q, run_stage.c, s.inp.ego_state, "plan")
    _, g_r = gaussian_focal_loss(clamp_probs(r), s.rel_heatmap[run_stage.original_index])
    g_q, g_c = relevance_head_input_grad(model.rel_head, cache, g_r, run_stage.q.shape[1])
    return StopGradientResult(upstream, float(np.max(np.abs(model.rel_head.flat() - head0))), float(np.linalg.norm(g_q) + np.linalg.norm(g_c)))
