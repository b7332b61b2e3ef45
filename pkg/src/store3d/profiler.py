"""Analytic FLOP and buffer-memory model of the dense and sparse pipeline.

Counting convention: one multiply-accumulate is two FLOPs; biases,
normalisation and nonlinearities are ignored.  The formulas mirror the toy
kernels term by term, so on toy shapes they equal the instrumented counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

from .sparsity import ScheduleConfig, keep_count, layer_keep_ratio, mean_keep_ratio, schedule_ratios

COUNTING_CONVENTION = "1 MAC = 2 FLOPs; biases, norms and activations not counted"


@dataclass(frozen=True)
class PipelineShape:
    views: int
    tokens_per_view: tuple[float, ...]  # per pyramid level, finest first
    backbone_level: int  # pyramid level the backbone runs at
    dim: int
    heads: int
    window: int  # window side; a window holds window**2 tokens
    backbone_layers: int
    global_layers: tuple[int, ...]
    dec_dim: int
    decoder_layers: int
    queries: float
    points: int
    bytes_per_element: int = 4
    mlp_ratio: int = 4
    # routing: relevance head [q | c | e] -> hidden -> hidden -> 1, ego MLP in -> e -> e
    relevance_hidden: int = 0
    ego_in: int = 3
    ego_dim: int = 8
    # input embedding and output heads (toy only; zero leaves them out)
    raw_dim: int = 0
    token_pe_dim: int = 0
    query_pe_dim: int = 0
    head_features: int = 0
    n_classes: int = 0
    n_box: int = 0

    def __post_init__(self):
        counts = [self.views, self.dim, self.heads, self.window, self.backbone_layers, self.dec_dim, self.decoder_layers, self.points]
        if any(c <= 0 for c in counts) or self.queries <= 0 or not self.tokens_per_view or any(t <= 0 for t in self.tokens_per_view):
            raise ValueError("shape counts must be positive")
        if not 0 <= self.backbone_level < len(self.tokens_per_view):
            raise ValueError("backbone_level outside the pyramid")
        if any(not 1 <= g <= self.backbone_layers for g in self.global_layers):
            raise ValueError("global_layers must lie in 1..backbone_layers")

    @property
    def levels(self) -> int:
        return len(self.tokens_per_view)

    @property
    def backbone_tokens(self) -> float:
        return self.views * self.tokens_per_view[self.backbone_level]

    @property
    def decoder_keys(self) -> float:
        return self.views * sum(self.tokens_per_view)

    def scaled(self, tokens: float = 1.0, queries: float = 1.0) -> "PipelineShape":
        return replace(self, tokens_per_view=tuple(t * tokens for t in self.tokens_per_view), queries=self.queries * queries)


# -- per-block formulas ---------------------------------------------------------------


def attention_flops(n: float, d: int, heads: int = 1, window: Optional[float] = None, groups: int = 1, mlp_ratio: int = 4) -> float:
    """One transformer block over n tokens split into `groups` equal independent sets.

    Global: 8nd^2 projections + 4 n^2 d / groups scores and weighted sum
    + 16nd^2 MLP.  Windowed: the score term becomes 4 n w d with w the tokens
    per window (capped at the group size).  Heads split d and do not change
    the count.
    """
    del heads
    proj = 8 * n * d * d
    mlp = 4 * mlp_ratio * n * d * d
    per_group = n / groups
    span = per_group if window is None else min(window, per_group)
    return proj + 4 * n * span * d + mlp


def deformable_flops(q: float, d: int, levels: int, points: int) -> float:
    """Offsets and weights (3 L P d MACs per query) plus bilinear sampling (4 d MACs per sample)."""
    return 2 * q * levels * points * (3 * d + 4 * d)


def decoder_layer_flops(q: float, d: int, levels: int, points: int, mlp_ratio: int = 4) -> float:
    """Self-attention over q queries, deformable cross-attention, MLP.

    Deformable sampling reads a fixed number of locations, so the count does
    not depend on how many keys the pyramid holds.
    """
    return 8 * q * d * d + 4 * q * q * d + deformable_flops(q, d, levels, points) + 4 * mlp_ratio * q * d * d


def decoder_flops(q, token_pyramid: Sequence[float], d: int, points: int, levels: int, layers: int, mlp_ratio: int = 4) -> float:
    """Sum over layers; `q` is a count or a per-layer sequence of active queries."""
    del token_pyramid  # key count does not enter the cost of deformable sampling
    qs = [q] * layers if not isinstance(q, (list, tuple)) else list(q)
    if len(qs) != layers:
        raise ValueError("need one query count per decoder layer")
    return math.fsum(decoder_layer_flops(x, d, levels, points, mlp_ratio) for x in qs)


def relevance_head_flops(shape: PipelineShape, n: float, d_q: int, d_c: int) -> float:
    h = shape.relevance_hidden
    if h == 0:
        return 0.0
    ego = shape.ego_in * shape.ego_dim + shape.ego_dim * shape.ego_dim
    return 2 * (ego + n * ((d_q + d_c + shape.ego_dim) * h + h * h + h))


def buffer_bytes(entries: float, dim: int, bytes_per_element: int) -> float:
    return entries * dim * bytes_per_element


# -- pipeline ---------------------------------------------------------------------------


@dataclass
class FlopReport:
    stages: dict[str, float]  # per stage (io, backbone, routing, decoder)
    backbone_layers: list[float]
    decoder_layers: list[float]
    backbone: float
    decoder: float
    total: float
    dense_total: float
    ratio: float
    mkr: float
    mkr_query: float
    buffer_entries: float
    buffer_bytes: float
    token_counts: list[float]
    query_counts: list[float]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _backbone_layer(shape: PipelineShape, l: int, n: float) -> float:
    """Windowed/global block with active tokens spread evenly over views and windows."""
    n0 = shape.backbone_tokens
    if l in shape.global_layers:
        return attention_flops(n, shape.dim, shape.heads, None, shape.views, shape.mlp_ratio)
    w2 = shape.window * shape.window
    per_view0 = shape.tokens_per_view[shape.backbone_level]
    # occupancy of a window scales with the kept fraction
    occ = min(w2, per_view0) * n / n0
    return attention_flops(n, shape.dim, shape.heads, occ, 1, shape.mlp_ratio)


def _io_flops(shape: PipelineShape) -> float:
    n0, q0 = shape.backbone_tokens, shape.queries
    embed = n0 * (shape.raw_dim + shape.token_pe_dim) * shape.dim
    init_q = q0 * (shape.query_pe_dim * shape.dec_dim + shape.dec_dim * shape.dec_dim) if shape.query_pe_dim else 0
    f = shape.head_features
    heads = q0 * (shape.dec_dim * f + (f + shape.dec_dim) * (shape.n_classes + shape.n_box)) if (f or shape.n_classes) else 0
    return 2 * (embed + init_q + heads)


def _counts(schedule: Optional[ScheduleConfig], n0: float, layers: int, kind: str) -> tuple[list[float], list[float]]:
    if schedule is None:
        return [n0] * layers, [1.0] * layers
    if schedule.total_layers != layers:
        raise ValueError(f"{kind} schedule has {schedule.total_layers} layers, shape has {layers}")
    ratios = schedule_ratios(schedule, kind)
    if float(n0).is_integer():
        return [float(keep_count(r, int(n0))) for r in ratios], ratios
    return [r * n0 for r in ratios], ratios


def pipeline_flops(
    shape: PipelineShape,
    schedules: Optional[tuple[Optional[ScheduleConfig], Optional[ScheduleConfig]]] = None,
) -> FlopReport:
    """FLOPs of one frame under (backbone, decoder) schedules; None means dense.

    Routing cost is charged at each pruning layer: the image stage scores all
    initial queries against the backbone map, the query stage scores the
    currently active queries against the pyramid.
    """
    bsched, dsched = schedules if schedules is not None else (None, None)
    n0, q0 = shape.backbone_tokens, shape.queries
    tok, _ = _counts(bsched, n0, shape.backbone_layers, "image")
    qry, _ = _counts(dsched, q0, shape.decoder_layers, "query")
    bb = [_backbone_layer(shape, l, n) for l, n in enumerate(tok, start=1)]
    dec = [decoder_layer_flops(q, shape.dec_dim, shape.levels, shape.points, shape.mlp_ratio) for q in qry]
    routing = 0.0
    if bsched is not None:
        for l in bsched.pruning_layers:
            if bsched.reactivation_layer is not None and l >= bsched.reactivation_layer:
                continue
            routing += deformable_flops(q0, shape.dim, 1, shape.points) + relevance_head_flops(shape, q0, shape.dec_dim, shape.dim)
    if dsched is not None:
        for l in dsched.pruning_layers:
            if dsched.reactivation_layer is not None and l >= dsched.reactivation_layer:
                continue
            q_in = qry[l - 2] if l >= 2 else q0
            routing += deformable_flops(q_in, shape.dec_dim, shape.levels, shape.points) + relevance_head_flops(shape, q_in, shape.dec_dim, shape.dec_dim)
    io = _io_flops(shape)
    stages = {"io": io, "backbone": math.fsum(bb), "routing": routing, "decoder": math.fsum(dec)}
    total = math.fsum(stages.values())
    if bsched is None and dsched is None:
        dense_total = total
    else:
        dense_total = pipeline_flops(shape).total
    img_entries = n0 - min(tok)
    qry_entries = q0 - min(qry)
    bytes_ = buffer_bytes(img_entries, shape.dim, shape.bytes_per_element) + buffer_bytes(qry_entries, shape.dec_dim, shape.bytes_per_element)
    mkr = math.fsum(t / n0 for t in tok) / len(tok)
    mkr_q = math.fsum(q / q0 for q in qry) / len(qry)
    return FlopReport(
        stages,
        bb,
        dec,
        stages["backbone"],
        stages["decoder"],
        total,
        dense_total,
        total / dense_total,
        mkr,
        mkr_q,
        img_entries + qry_entries,
        bytes_,
        tok,
        qry,
        {"convention": COUNTING_CONVENTION, "bytes_per_element": shape.bytes_per_element},
    )


def sensitivity(shape: PipelineShape, step: float = 0.1) -> dict[str, dict[str, float]]:
    """Relative change of each stage's FLOPs per relative change of tokens or queries.

    Central difference at (1 +/- step); 1.0 means cost proportional to the axis.
    """
    out: dict[str, dict[str, float]] = {}
    base = pipeline_flops(shape)
    for axis in ("tokens", "queries"):
        hi = pipeline_flops(shape.scaled(**{axis: 1 + step}))
        lo = pipeline_flops(shape.scaled(**{axis: 1 - step}))
        out[axis] = {}
        for stage in ("backbone", "decoder"):
            f0 = getattr(base, stage)
            out[axis][stage] = (getattr(hi, stage) - getattr(lo, stage)) / (2 * step * f0) if f0 else 0.0
    return out


# -- shapes -----------------------------------------------------------------------------


def full_scale_shape(bytes_per_element: int = 4) -> PipelineShape:
    """Large dense operating point: ViT-L backbone, 6 views, 900 queries.

    320x800 images give pyramid levels at strides 4/8/16/32 of
    16000/4000/1000/250 tokens per view, 127,500 decoder keys in total;
    the backbone runs on the stride-16 level (1000 tokens per view).
    """
    return PipelineShape(
        views=6,
        tokens_per_view=(16000, 4000, 1000, 250),
        backbone_level=2,
        dim=1024,
        heads=16,
        window=16,
        backbone_layers=24,
        global_layers=tuple(range(3, 25, 3)),
        dec_dim=256,
        decoder_layers=6,
        queries=900,
        points=4,
        bytes_per_element=bytes_per_element,
        relevance_hidden=256,
    )


def toy_shape(cfg) -> PipelineShape:
    """Shape of the toy pipeline built from a `ModelConfig`."""
    from .pipeline import N_BOX, N_RAW

    h, w = cfg.grid
    levels = tuple((h >> i) * (w >> i) for i in range(cfg.fpn_levels))
    return PipelineShape(
        views=cfg.views,
        tokens_per_view=levels,
        backbone_level=0,
        dim=cfg.dim,
        heads=cfg.heads,
        window=cfg.window,
        backbone_layers=cfg.backbone_layers,
        global_layers=tuple(cfg.global_layers),
        dec_dim=cfg.dim,
        decoder_layers=cfg.decoder_layers,
        queries=cfg.n_queries,
        points=cfg.points,
        relevance_hidden=cfg.relevance_hidden,
        raw_dim=N_RAW,
        token_pe_dim=48,
        query_pe_dim=192,
        head_features=cfg.head_features,
        n_classes=len(cfg.classes),
        n_box=N_BOX,
    )


# -- published schedule table ----------------------------------------------------------

# (variant, TKR, MKR, {layer: LKR}) as printed for the 12-layer layout with
# pruning before global layers 6, 8, 10 and reactivation at 12.
SCHEDULE_TABLE = (
    ("1/2", 0.5, 0.76, {6: 0.63, 8: 0.53, 10: 0.50, 12: 1.00}),
    ("1/3", 0.3, 0.67, {6: 0.48, 8: 0.32, 10: 0.30, 12: 1.00}),
    ("1/10", 0.1, 0.58, {6: 0.33, 8: 0.16, 10: 0.10, 12: 1.00}),
)


def schedule_table_check(tol: float = 0.01, n0: Optional[int] = None) -> list[dict]:
    """Recompute MKR and LKR for each printed row and flag entries off by more than `tol`."""
    rows = []
    for name, tkr, mkr, lkrs in SCHEDULE_TABLE:
        cfg = ScheduleConfig(tkr, (6, 8, 10), 12, 12)
        ratios = schedule_ratios(cfg)
        mkr_c = mean_keep_ratio(cfg, n0) if n0 else math.fsum(ratios) / len(ratios)
        comp = {l: (ratios[l - 1] if l == 12 else layer_keep_ratio(tkr, l, 12)) for l in lkrs}
        flags = [f"LKR{l}" for l in lkrs if abs(comp[l] - lkrs[l]) > tol]
        if abs(mkr_c - mkr) > tol:
            flags.append("MKR")
        rows.append({"variant": name, "tkr": tkr, "mkr_printed": mkr, "mkr": mkr_c, "lkr_printed": lkrs, "lkr": comp, "mismatch": flags})
    return rows


def store_reactivate_schedule(tkr: float, shape: PipelineShape) -> tuple[ScheduleConfig, ScheduleConfig]:
    """Prune before each of the later half of the global layers, reactivate at the last one.

    The decoder prunes at its middle layers and reactivates at its last.
    """
    glob = sorted(shape.global_layers)
    prune_b = tuple(g - 1 for g in glob[len(glob) // 2 :] if g > 1)
    bb = ScheduleConfig(tkr, prune_b, shape.backbone_layers, glob[-1])
    ld = shape.decoder_layers
    prune_d = tuple(range(2, ld))
    dd = ScheduleConfig(tkr, prune_d, ld, ld if prune_d else None)
    return bb, dd
