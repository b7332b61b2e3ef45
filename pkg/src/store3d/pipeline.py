"""Toy token/query-sparse detector.

Each "view" is a bird's-eye strip of the scene rendered into a token grid, so
that the backbone, feature pyramid and deformable decoder operate on inputs
whose content is tied to the ground truth.  Backbone and decoder weights are
frozen random; only the detection heads and the relevance head are trained.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import CLASSES, Frame, attribute_for
from .errors import ShapeMismatch
from .geometry import OrientedBoxBEV, Point2, SE2Pose, transform_box, wrap_angle
from .numeric import (
    DeformParams,
    GumbelTopkConfig,
    MlpParams,
    count_macs,
    flop_stage,
    grouped_attention,
    layer_norm,
    mlp_forward,
    mm,
    positional_encoding,
    sigmoid,
    softmax,
)
from .sparsity import (
    QuerySet,
    RelevanceHeadParams,
    ScheduleConfig,
    SparsityTrace,
    StorageBuffer,
    TokenStream,
    init_queries,
    keep_count,
    propagate_queries,
    reactivate,
    relevance_head_forward,
    schedule_ratios,
    select_and_store,
    token_relevance,
    top_query_count,
)

MODES = ("dense", "sparse_eval", "sparse_train")
N_RAW = 18  # rendered features per token
N_BOX = 10  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw, vx, vy


@dataclass
class ModelConfig:
    views: int = 2
    grid: tuple[int, int] = (16, 16)  # rows (y), cols (x) per view
    cell: float = 3.75
    dim: int = 32
    heads: int = 4
    window: int = 4
    backbone_layers: int = 6
    global_layers: tuple[int, ...] = (2, 4, 6)
    fpn_levels: int = 3
    points: int = 4
    decoder_layers: int = 3
    query_grid: tuple[int, int] = (16, 32)  # anchors along y, x (one per token cell)
    n_propagated: int = 0
    classes: tuple[str, ...] = CLASSES
    render_noise: float = 0.02
    residual_scale: float = 0.25
    head_features: int = 128
    relevance_hidden: int = 32
    top_query_fraction: float = 0.25
    gumbel_temperature: float = 1.0
    score_threshold: float = 0.05
    max_detections: int = 64
    nms_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.grid
        if h % (1 << (self.fpn_levels - 1)) or w % (1 << (self.fpn_levels - 1)):
            raise ValueError("grid must be divisible by 2^(fpn_levels-1)")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if any(not 1 <= g <= self.backbone_layers for g in self.global_layers):
            raise ValueError("global_layers must lie in 1..backbone_layers")

    @property
    def n_tokens(self) -> int:
        return self.views * self.grid[0] * self.grid[1]

    @property
    def n_queries(self) -> int:
        return self.query_grid[0] * self.query_grid[1]

    @property
    def extent_x(self) -> float:
        return self.views * self.grid[1] * self.cell

    @property
    def extent_y(self) -> float:
        return self.grid[0] * self.cell


def default_schedules(tkr: float, cfg: ModelConfig) -> tuple[ScheduleConfig, ScheduleConfig]:
    """Backbone: prune at the layers preceding the later global blocks, reactivate at the last.

    Decoder: prune at the middle layers, reactivate at the last.
    """
    lb, ld = cfg.backbone_layers, cfg.decoder_layers
    glob = sorted(cfg.global_layers)
    prune_b = tuple(g - 1 for g in glob[1:] if g - 1 >= 1)
    bb = ScheduleConfig(tkr, prune_b, lb, glob[-1] if glob[-1] > max(prune_b, default=0) else None)
    prune_d = tuple(range(2, ld)) if ld > 2 else ()
    dd = ScheduleConfig(tkr, prune_d, ld, ld if prune_d else None)
    return bb, dd


# -- geometry of the pseudo-camera ------------------------------------------------


def token_centers(cfg: ModelConfig) -> np.ndarray:
    """(N, 2) ego-frame centres, index = view*H*W + row*W + col."""
    h, w = cfg.grid
    v, r, c = np.meshgrid(np.arange(cfg.views), np.arange(h), np.arange(w), indexing="ij")
    x = -cfg.extent_x / 2 + (v * w + c + 0.5) * cfg.cell
    y = -cfg.extent_y / 2 + (r + 0.5) * cfg.cell
    return np.stack([x.ravel(), y.ravel()], axis=1)


def project(cfg: ModelConfig, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame (x, y) to (view, normalised (u, v) within the view)."""
    pts = np.atleast_2d(pts)
    h, w = cfg.grid
    gx = (pts[:, 0] + cfg.extent_x / 2) / cfg.cell
    view = np.clip(np.floor(gx / w), 0, cfg.views - 1).astype(int)
    u = np.clip((gx - view * w) / w, 0.0, 1.0)
    v = np.clip((pts[:, 1] + cfg.extent_y / 2) / (h * cfg.cell), 0.0, 1.0)
    return view, np.stack([u, v], axis=1)


def anchors(cfg: ModelConfig) -> np.ndarray:
    ny, nx = cfg.query_grid
    xs = -cfg.extent_x / 2 + (np.arange(nx) + 0.5) * cfg.extent_x / nx
    ys = -cfg.extent_y / 2 + (np.arange(ny) + 0.5) * cfg.extent_y / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, 0.8)], axis=1)


# -- model ----------------------------------------------------------------------------


@dataclass
class Block:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp: MlpParams


@dataclass
class DetHeads:
    feat: MlpParams  # frozen random features of the final query
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_box: np.ndarray
    b_box: np.ndarray

    def copy(self) -> "DetHeads":
        return DetHeads(self.feat, self.w_cls.copy(), self.b_cls.copy(), self.w_box.copy(), self.b_box.copy())


@dataclass
class ToyModel:
    cfg: ModelConfig
    w_in: np.ndarray
    w_pe: np.ndarray
    backbone: list[Block]
    decoder: list[Block]
    dec_deform: list[DeformParams]
    rel_deform_tokens: DeformParams
    rel_deform_fpn: DeformParams
    init_mlp: MlpParams
    rel_head: RelevanceHeadParams
    det: DetHeads


def _block(d: int, rng: np.random.Generator) -> Block:
    s = 1.0 / math.sqrt(d)
    return Block(
        rng.normal(0, s, (d, d)),
        rng.normal(0, s, (d, d)),
        rng.normal(0, s, (d, d)),
        rng.normal(0, s, (d, d)),
        MlpParams.init([d, 4 * d, d], rng),
    )


def build_model(cfg: ModelConfig) -> ToyModel:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    n_cls = len(cfg.classes)
    w_in = rng.normal(0, 1.0 / math.sqrt(N_RAW), (N_RAW, d)) * 2.0
    w_pe = rng.normal(0, 1.0 / math.sqrt(48), (48, d)) * 0.5
    backbone = [_block(d, rng) for _ in range(cfg.backbone_layers)]
    decoder = [_block(d, rng) for _ in range(cfg.decoder_layers)]
    dec_deform = [DeformParams.init(d, cfg.fpn_levels, cfg.points, rng, offset_scale=0.5) for _ in range(cfg.decoder_layers)]
    for dp in dec_deform:
        # lean on the finest level so the query keeps its own cell in view
        dp.b_attn[: cfg.points] += 2.0
    rel_tok = DeformParams.init(d, 1, cfg.points, rng)
    rel_fpn = DeformParams.init(d, cfg.fpn_levels, cfg.points, rng)
    init_mlp = MlpParams.init([192, d, d], rng)
    rel_head = RelevanceHeadParams.init(d, d, cfg.relevance_hidden, np.random.default_rng(cfg.seed + 1))
    feat = MlpParams.init([d, cfg.head_features], rng, scale=2.0, final_activation=True)
    det = DetHeads(
        feat,
        np.zeros((cfg.head_features + d, n_cls)),
        np.full(n_cls, -3.0),
        np.zeros((cfg.head_features + d, N_BOX)),
        np.array([0, 0, 0.8, math.log(4.0), math.log(1.8), math.log(1.6), 0, 1, 0, 0], dtype=float),
    )
    return ToyModel(cfg, w_in, w_pe, backbone, decoder, dec_deform, rel_tok, rel_fpn, init_mlp, rel_head, det)


# -- rendering -------------------------------------------------------------------------


@dataclass
class FrameInput:
    frame_id: str
    raw: np.ndarray  # (N, N_RAW)
    ego_state: np.ndarray  # speed, yaw rate, acceleration
    ego_pose: SE2Pose
    gt_ego: list  # (GTBox, box in ego frame, velocity in ego frame)


def _frame_seed(frame_id: str, seed: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{frame_id}".encode()).digest()[:8], "little")


def render_frame(frame: Frame, cfg: ModelConfig, seed: int = 0) -> FrameInput:
    """Rasterise the frame's agents into per-token features (plus fixed-seed noise)."""
    inv = frame.ego_pose.inverse()
    centers = token_centers(cfg)
    raw = np.zeros((len(centers), N_RAW))
    best = np.zeros(len(centers))
    gt_ego = []
    for g in frame.gt_boxes:
        b = transform_box(inv, g.box)
        vel = inv.rotate(np.array(g.velocity, dtype=float))
        gt_ego.append((g, b, vel))
        dx = b.center.x - centers[:, 0]
        dy = b.center.y - centers[:, 1]
        s = max(0.5 * cfg.cell, 0.5 * min(b.length, b.width))
        pres = np.exp(-(dx * dx + dy * dy) / (2 * s * s))
        raw[:, 0] += pres
        take = pres > best
        best[take] = pres[take]
        attrs = np.zeros(N_RAW - 3)
        if g.class_name in cfg.classes:
            attrs[cfg.classes.index(g.class_name)] = 1.0
        n_cls = len(cfg.classes)
        attrs[n_cls : n_cls + 10] = [
            math.log(b.length),
            math.log(b.width),
            math.log(g.height),
            math.sin(b.yaw),
            math.cos(b.yaw),
            vel[0] / 10.0,
            vel[1] / 10.0,
            g.z,
            math.hypot(vel[0], vel[1]) / 10.0,
            0.0,
        ][: N_RAW - 3 - n_cls]
        rows = np.nonzero(take)[0]
        raw[rows, 1] = dx[rows] / cfg.cell * pres[rows]
        raw[rows, 2] = dy[rows] / cfg.cell * pres[rows]
        raw[rows, 3:-1] = pres[rows, None] * attrs[None, :-1]
    raw[:, -1] = 1.0
    rng = np.random.default_rng(_frame_seed(frame.frame_id, seed))
    raw[:, :-1] += cfg.render_noise * rng.normal(size=(len(centers), N_RAW - 1))
    return FrameInput(frame.frame_id, raw, np.array(frame.ego_state, dtype=float), frame.ego_pose, gt_ego)


# -- forward pieces ---------------------------------------------------------------------


def _attn_block(x: np.ndarray, blk: Block, groups: np.ndarray, heads: int, scale: float) -> np.ndarray:
    y = layer_norm(x)
    a = grouped_attention(mm(y, blk.wq, "proj"), mm(y, blk.wk, "proj"), mm(y, blk.wv, "proj"), groups, heads)
    x = x + scale * mm(a, blk.wo, "proj")
    h, _ = mlp_forward(blk.mlp, layer_norm(x))
    return x + scale * h


def _token_groups(cfg: ModelConfig, stream: TokenStream, windowed: bool) -> np.ndarray:
    if not windowed:
        return stream.view_id.copy()
    w = cfg.window
    n_wc = -(-cfg.grid[1] // w)
    n_wr = -(-cfg.grid[0] // w)
    return stream.view_id * (n_wr * n_wc) + (stream.row // w) * n_wc + stream.col // w


def _full_maps(cfg: ModelConfig, active: TokenStream, buffer: StorageBuffer) -> np.ndarray:
    """(V, H, W, D) map with active rows plus stale buffered rows."""
    h, w = cfg.grid
    out = np.zeros((cfg.views * h * w, active.embeddings.shape[1]))
    out[active.original_index] = active.embeddings
    for part in buffer.parts:
        out[part.original_index] = part.embeddings
    return out.reshape(cfg.views, h, w, -1)


def fpn(maps: np.ndarray, levels: int) -> list[np.ndarray]:
    """Level 0 plus 2x average-pooled levels; each (V, H_l, W_l, D)."""
    out = [maps]
    for _ in range(levels - 1):
        m = out[-1]
        v, h, w, d = m.shape
        out.append(m.reshape(v, h // 2, 2, w // 2, 2, d).mean(axis=(2, 4)))
    return out


def deformable_attention_batch(queries: np.ndarray, views: np.ndarray, refs_uv: np.ndarray, pyramid: Sequence[np.ndarray], params: DeformParams):
    """Vectorised deformable cross-attention for many queries.

    `pyramid[l]` has shape (V, H_l, W_l, C).  Returns contexts (Q, C) and
    footprints (Q, sum_l V*H_l*W_l) over concatenated level-major positions.
    """
    q = len(queries)
    if q == 0:
        return np.zeros((0, pyramid[0].shape[-1])), np.zeros((0, sum(p[..., 0].size for p in pyramid)))
    L, P = params.levels, params.points
    if len(pyramid) != L:
        raise ShapeMismatch(f"expected {L} levels, got {len(pyramid)}")
    off = (mm(queries, params.w_off, "deform_proj") + params.b_off).reshape(q, L, P, 2)
    a = softmax(mm(queries, params.w_attn, "deform_proj") + params.b_attn, axis=1).reshape(q, L, P)
    c = pyramid[0].shape[-1]
    ctx = np.zeros((q, c))
    sizes = [p[..., 0].size for p in pyramid]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    foot = np.zeros((q, int(sum(sizes))))
    qi = np.arange(q)
    for lvl, fmap in enumerate(pyramid):
        v_, h, w, _ = fmap.shape
        flat = fmap.reshape(v_ * h * w, c)
        for p in range(P):
            x = np.clip(refs_uv[:, 0] * w - 0.5 + off[:, lvl, p, 0], 0.0, w - 1.0)
            y = np.clip(refs_uv[:, 1] * h - 0.5 + off[:, lvl, p, 1], 0.0, h - 1.0)
            x0 = np.floor(x).astype(int)
            y0 = np.floor(y).astype(int)
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            fx, fy = x - x0, y - y0
            base = views * h * w
            for (yy, xx), wt in (
                ((y0, x0), (1 - fx) * (1 - fy)),
                ((y0, x1), fx * (1 - fy)),
                ((y1, x0), (1 - fx) * fy),
                ((y1, x1), fx * fy),
            ):
                idx = base + yy * w + xx
                coef = a[:, lvl, p] * wt
                ctx += coef[:, None] * flat[idx]
                np.add.at(foot, (qi, starts[lvl] + idx), coef)
        count_macs(q * P * 4 * c, "deform_sample")
    foot /= foot.sum(axis=1, keepdims=True)
    return ctx, foot


# -- pipeline ---------------------------------------------------------------------------


@dataclass
class StageFeatures:
    """Inputs of the relevance head at one query-pruning stage."""

    layer: int
    original_index: np.ndarray
    q: np.ndarray
    c: np.ndarray
    scores: np.ndarray


@dataclass
class PipelineOutput:
    frame_id: str
    cls_logits: np.ndarray  # (Q0, C) in original-index order
    boxes: np.ndarray  # (Q0, N_BOX)
    head_input: np.ndarray  # (Q0, F)
    queries: QuerySet  # final queries, original-index order
    trace: SparsityTrace
    relevance: list = field(default_factory=list)  # RelevanceScores per stage
    stage_features: list[StageFeatures] = field(default_factory=list)
    token_stage_scores: list = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.cls_logits)


def _gumbel(mode: str, cfg: ModelConfig, seed: int) -> GumbelTopkConfig:
    m = "straight_through_train" if mode == "sparse_train" else "hard_eval"
    return GumbelTopkConfig(1, cfg.gumbel_temperature, seed, m)


def head_features(model: ToyModel, q: np.ndarray) -> np.ndarray:
    f, _ = mlp_forward(model.det.feat, q, tag="head")
    return np.concatenate([f, q], axis=1)


def run_pipeline(
    inp: FrameInput,
    model: ToyModel,
    schedules: Optional[tuple[ScheduleConfig, ScheduleConfig]] = None,
    mode: str = "dense",
    seed: int = 0,
    queries: Optional[QuerySet] = None,
    keep_indices: bool = False,
) -> PipelineOutput:
    """One frame through backbone, pyramid, decoder and heads.

    ``dense`` runs with all routing code skipped.  The sparse modes apply the
    schedules; ``sparse_train`` draws Gumbel noise keyed by `seed`.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cfg = model.cfg
    routed = mode != "dense"
    if routed and schedules is None:
        raise ValueError("sparse modes need schedules")
    gcfg = _gumbel(mode, cfg, seed)
    h, w = cfg.grid
    n0 = cfg.n_tokens
    trace = SparsityTrace(n_tokens=n0)
    centers = token_centers(cfg)
    with flop_stage("io"):
        pe = positional_encoding(np.concatenate([centers, np.zeros((n0, 1))], axis=1), n_freq=8)
        x0 = mm(inp.raw, model.w_in, "embed") + mm(pe, model.w_pe, "embed")
        if queries is None:
            queries = init_queries(anchors(cfg), model.init_mlp)
    v, r, c = np.meshgrid(np.arange(cfg.views), np.arange(h), np.arange(w), indexing="ij")
    tokens = TokenStream(x0, np.arange(n0), v.ravel(), r.ravel(), c.ravel())
    q0 = queries
    n_q = len(queries)
    trace.n_queries = n_q

    # backbone
    buf = StorageBuffer("image")
    token_scores = []
    if routed:
        bsched, dsched = schedules
        ratios_b = schedule_ratios(bsched, "image")
        ratios_d = schedule_ratios(dsched, "query")
        if bsched.total_layers != cfg.backbone_layers or dsched.total_layers != cfg.decoder_layers:
            raise ValueError("schedule depth does not match the model")
    for l in range(1, cfg.backbone_layers + 1):
        if routed:
            if bsched.reactivation_layer == l:
                tokens, buf = reactivate(tokens, buf)
            elif l in bsched.pruning_layers:
                with flop_stage("routing"):
                    maps = _full_maps(cfg, tokens, buf)
                    vq, uv = project(cfg, q0.reference_points[:, :2])
                    ctx, foot = deformable_attention_batch(q0.embeddings, vq, uv, [maps], model.rel_deform_tokens)
                    rq, _ = relevance_head_forward(model.rel_head, q0.embeddings, ctx, inp.ego_state, "plan")
                k = top_query_count(n_q, cfg.top_query_fraction)
                top = np.lexsort((np.arange(n_q), -rq))[:k]
                r_img = token_relevance(foot[top])
                token_scores.append(r_img)
                tokens, buf, _ = select_and_store(
                    tokens, r_img[tokens.original_index], 1.0, GumbelTopkConfig(1, gcfg.temperature, gcfg.seed, gcfg.mode), buf, stage=l, keep=keep_count(ratios_b[l - 1], n0)
                )
            trace.record("image", l, tokens, buf, keep_count(ratios_b[l - 1], n0), keep_indices)
        else:
            trace.record("image", l, tokens, buf, n0, keep_indices)
        groups = _token_groups(cfg, tokens, l not in cfg.global_layers)
        with flop_stage("backbone"):
            tokens = tokens.with_embeddings(_attn_block(tokens.embeddings, model.backbone[l - 1], groups, cfg.heads, cfg.residual_scale))
    if len(buf):
        tokens, buf = reactivate(tokens, buf)
    maps = _full_maps(cfg, tokens, buf)
    pyramid = fpn(maps, cfg.fpn_levels)

    # decoder
    qbuf = StorageBuffer("query")
    relevance, stage_feats = [], []
    from .sparsity import RelevanceScores

    for l in range(1, cfg.decoder_layers + 1):
        if routed:
            if dsched.reactivation_layer == l:
                queries, qbuf = reactivate(queries, qbuf)
            elif l in dsched.pruning_layers:
                with flop_stage("routing"):
                    vq, uv = project(cfg, queries.reference_points[:, :2])
                    ctx, _ = deformable_attention_batch(queries.embeddings, vq, uv, pyramid, model.rel_deform_fpn)
                    rq, _ = relevance_head_forward(model.rel_head, queries.embeddings, ctx, inp.ego_state, "plan")
                relevance.append(RelevanceScores(rq, "plan"))
                stage_feats.append(StageFeatures(l, queries.original_index.copy(), queries.embeddings.copy(), ctx, rq))
                queries, qbuf, _ = select_and_store(
                    queries, rq, 1.0, GumbelTopkConfig(1, gcfg.temperature, gcfg.seed, gcfg.mode), qbuf, stage=100 + l, keep=keep_count(ratios_d[l - 1], n_q)
                )
            trace.record("query", l, queries, qbuf, keep_count(ratios_d[l - 1], n_q), keep_indices)
        else:
            trace.record("query", l, queries, qbuf, n_q, keep_indices)
        blk = model.decoder[l - 1]
        with flop_stage("decoder"):
            e = _attn_block_decoder(queries.embeddings, blk, model.dec_deform[l - 1], queries, pyramid, cfg)
        queries = queries.with_embeddings(e)
    if len(qbuf):
        queries, qbuf = reactivate(queries, qbuf)
    order = np.argsort(queries.original_index, kind="stable")
    queries = queries.take(order)
    with flop_stage("io"):
        feats = head_features(model, queries.embeddings)
        logits = mm(feats, model.det.w_cls, "head") + model.det.b_cls
        boxes = mm(feats, model.det.w_box, "head") + model.det.b_box
    return PipelineOutput(inp.frame_id, logits, boxes, feats, queries, trace, relevance, stage_feats, token_scores)


def _attn_block_decoder(e: np.ndarray, blk: Block, deform: DeformParams, queries: QuerySet, pyramid, cfg: ModelConfig) -> np.ndarray:
    y = layer_norm(e)
    groups = np.zeros(len(e), dtype=int)
    a = grouped_attention(mm(y, blk.wq, "proj"), mm(y, blk.wk, "proj"), mm(y, blk.wv, "proj"), groups, cfg.heads)
    e = e + cfg.residual_scale * mm(a, blk.wo, "proj")
    vq, uv = project(cfg, queries.reference_points[:, :2])
    ctx, _ = deformable_attention_batch(layer_norm(e), vq, uv, pyramid, deform)
    e = e + ctx
    hdn, _ = mlp_forward(blk.mlp, layer_norm(e))
    return e + cfg.residual_scale * hdn


# -- decoding -------------------------------------------------------------------------


def encode_box(box: OrientedBoxBEV, z: float, height: float, vel, anchor: np.ndarray, cell: float) -> np.ndarray:
    return np.array(
        [
            (box.center.x - anchor[0]) / cell,
            (box.center.y - anchor[1]) / cell,
            z,
            math.log(box.length),
            math.log(box.width),
            math.log(height),
            math.sin(box.yaw),
            math.cos(box.yaw),
            vel[0],
            vel[1],
        ]
    )


def decode_detections(out: PipelineOutput, inp: FrameInput, model: ToyModel):
    """World-frame detections after score thresholding and centre-distance NMS."""
    from .metrics import Detection

    cfg = model.cfg
    probs = out.probs
    refs = out.queries.reference_points
    cand = []
    for i in range(len(probs)):
        k = int(np.argmax(probs[i]))
        s = float(probs[i, k])
        if s >= cfg.score_threshold:
            cand.append((s, i, k))
    cand.sort(key=lambda t: (-t[0], t[1]))
    kept: list[tuple[float, int, int, float, float]] = []
    for s, i, k in cand:
        b = out.boxes[i]
        x = refs[i, 0] + b[0] * cfg.cell
        y = refs[i, 1] + b[1] * cfg.cell
        if any(kk == k and math.hypot(x - xx, y - yy) < cfg.nms_radius for _, _, kk, xx, yy in kept):
            continue
        kept.append((s, i, k, x, y))
        if len(kept) >= cfg.max_detections:
            break
    dets = []
    pose = inp.ego_pose
    for s, i, k, x, y in kept:
        b = out.boxes[i]
        yaw = math.atan2(b[6], b[7])
        dims = np.exp(np.clip(b[3:6], -3.0, 3.0))
        box = transform_box(pose, OrientedBoxBEV(Point2(x, y), yaw, float(dims[0]), float(dims[1])))
        vel = pose.rotate(np.array([b[8], b[9]]))
        cls = cfg.classes[k]
        dets.append(
            Detection(inp.frame_id, cls, box, min(1.0, max(0.0, s)), float(b[2]), float(dims[2]), (float(vel[0]), float(vel[1])), attribute_for(cls, float(np.hypot(*vel))))
        )
    return dets
