"""Token/query streams with select-store-reactivate routing and relevance scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyTopK, IndexCollision, KTooLarge, ShapeMismatch
from .geometry import SE2Pose
from .numeric import (
    GumbelTopkConfig,
    MlpParams,
    TopkResult,
    gumbel_topk,
    mlp_backward,
    mlp_forward,
    mm,
    positional_encoding,
    sigmoid,
)

# guards floor(ratio * n) against products like 0.29 * 100 = 28.999999999999996
_FLOOR_EPS = 1e-9


# -- streams ---------------------------------------------------------------------


@dataclass
class TokenStream:
    embeddings: np.ndarray  # (N, D)
    original_index: np.ndarray  # (N,) int
    view_id: np.ndarray
    row: np.ndarray
    col: np.ndarray
    level: int = 0

    def __post_init__(self):
        n = len(self.embeddings)
        self.original_index = np.asarray(self.original_index, dtype=np.int64)
        for name in ("original_index", "view_id", "row", "col"):
            if len(getattr(self, name)) != n:
                raise ShapeMismatch(f"TokenStream.{name} has {len(getattr(self, name))} rows, expected {n}")
        if len(np.unique(self.original_index)) != n:
            raise IndexCollision("duplicate original indices in token stream")

    def __len__(self) -> int:
        return len(self.embeddings)

    def take(self, rows) -> "TokenStream":
        rows = np.asarray(rows, dtype=np.int64)
        return TokenStream(self.embeddings[rows], self.original_index[rows], self.view_id[rows], self.row[rows], self.col[rows], self.level)

    def with_embeddings(self, emb: np.ndarray) -> "TokenStream":
        return TokenStream(emb, self.original_index, self.view_id, self.row, self.col, self.level)

    @staticmethod
    def concat(parts: Sequence["TokenStream"]) -> "TokenStream":
        return TokenStream(
            np.concatenate([p.embeddings for p in parts]),
            np.concatenate([p.original_index for p in parts]),
            np.concatenate([p.view_id for p in parts]),
            np.concatenate([p.row for p in parts]),
            np.concatenate([p.col for p in parts]),
            parts[0].level,
        )


@dataclass
class QuerySet:
    embeddings: np.ndarray  # (Q, D)
    reference_points: np.ndarray  # (Q, 3) metres, ego frame
    origin: np.ndarray  # (Q,) "propagated" | "initialized"
    original_index: np.ndarray

    def __post_init__(self):
        q = len(self.embeddings)
        self.reference_points = np.asarray(self.reference_points, dtype=float).reshape(q, 3)
        self.origin = np.asarray(self.origin, dtype=object).reshape(q)
        self.original_index = np.asarray(self.original_index, dtype=np.int64).reshape(q)
        if len(np.unique(self.original_index)) != q:
            raise IndexCollision("duplicate original indices in query set")

    def __len__(self) -> int:
        return len(self.embeddings)

    def take(self, rows) -> "QuerySet":
        rows = np.asarray(rows, dtype=np.int64)
        return QuerySet(self.embeddings[rows], self.reference_points[rows], self.origin[rows], self.original_index[rows])

    def with_embeddings(self, emb: np.ndarray) -> "QuerySet":
        return QuerySet(emb, self.reference_points, self.origin, self.original_index)

    @staticmethod
    def concat(parts: Sequence["QuerySet"]) -> "QuerySet":
        parts = [p for p in parts if len(p)] or list(parts[:1])
        return QuerySet(
            np.concatenate([p.embeddings for p in parts]),
            np.concatenate([p.reference_points for p in parts]),
            np.concatenate([p.origin for p in parts]),
            np.concatenate([p.original_index for p in parts]),
        )

    @classmethod
    def empty(cls, d: int) -> "QuerySet":
        return cls(np.zeros((0, d)), np.zeros((0, 3)), np.zeros(0, dtype=object), np.zeros(0, dtype=np.int64))


@dataclass
class StorageBuffer:
    kind: str  # "image" | "query"
    parts: list = field(default_factory=list)
    stages: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(p) for p in self.parts)

    @property
    def original_index(self) -> np.ndarray:
        if not self.parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([p.original_index for p in self.parts])

    def entries(self):
        """(original_index, embedding, stage_written) per stored row."""
        for part, stage in zip(self.parts, self.stages):
            for i, e in zip(part.original_index, part.embeddings):
                yield int(i), e, stage

    def store(self, part, stage: int) -> None:
        if len(part) == 0:
            return
        if len(np.intersect1d(self.original_index, part.original_index)):
            raise IndexCollision("row already buffered")
        self.parts.append(part)
        self.stages.append(stage)

    def copy(self) -> "StorageBuffer":
        return StorageBuffer(self.kind, list(self.parts), list(self.stages))

    def nbytes(self, bytes_per_element: int = 8) -> int:
        return sum(p.embeddings.size for p in self.parts) * bytes_per_element


# -- schedules ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    tkr: float = 1.0
    pruning_layers: tuple[int, ...] = ()
    total_layers: int = 6
    reactivation_layer: Optional[int] = None
    warmup: tuple[int, int] = (0, 0)
    tkr_img: Optional[float] = None
    tkr_qry: Optional[float] = None

    def __post_init__(self):
        for name in ("tkr", "tkr_img", "tkr_qry"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        pl = list(self.pruning_layers)
        if pl != sorted(set(pl)):
            raise ValueError("pruning_layers must be strictly ascending")
        if pl and (pl[0] < 1 or pl[-1] > self.total_layers):
            raise ValueError("pruning layers must lie in 1..total_layers")
        if self.reactivation_layer is not None:
            if not 1 <= self.reactivation_layer <= self.total_layers:
                raise ValueError("reactivation_layer must lie in 1..total_layers")
            if pl and pl[-1] >= self.reactivation_layer:
                raise ValueError("pruning layers must precede the reactivation layer")
        if self.warmup[0] > self.warmup[1]:
            raise ValueError("warmup start must not exceed end")

    def stream_tkr(self, kind: str) -> float:
        if kind == "image" and self.tkr_img is not None:
            return self.tkr_img
        if kind == "query" and self.tkr_qry is not None:
            return self.tkr_qry
        return self.tkr


def layer_keep_ratio(tkr: float, l: int, total: int) -> float:
    """Quadratic decay from 1 at l = 0 to `tkr` at l = total."""
    if not 0 <= l <= total:
        raise ValueError(f"layer {l} outside 0..{total}")
    return tkr + (1.0 - tkr) * (1.0 - l / total) ** 2


def training_keep_ratio(it: int, warmup: tuple[int, int], tkr: float) -> float:
    start, end = warmup
    if start > end:
        raise ValueError("warmup start must not exceed end")
    if it <= start:
        return 1.0 if it < start or end > start else tkr
    if it >= end:
        return tkr
    return 1.0 + (tkr - 1.0) * (it - start) / (end - start)


def schedule_ratios(cfg: ScheduleConfig, kind: str = "image", tkr: Optional[float] = None) -> list[float]:
    """Keep ratio processed at each layer 1..L (index 0 is layer 1).

    1.0 before the first pruning layer; LKR of the latest pruning layer
    until the next one; 1.0 from the reactivation layer on.
    """
    t = cfg.stream_tkr(kind) if tkr is None else tkr
    out, cur = [], 1.0
    prune = set(cfg.pruning_layers)
    for l in range(1, cfg.total_layers + 1):
        if cfg.reactivation_layer is not None and l >= cfg.reactivation_layer:
            cur = 1.0
        elif l in prune:
            cur = layer_keep_ratio(t, l, cfg.total_layers)
        out.append(cur)
    return out


def keep_count(ratio: float, n0: int) -> int:
    return int(math.floor(ratio * n0 + _FLOOR_EPS))


def mean_keep_ratio(cfg: ScheduleConfig, n0: int, kind: str = "image") -> float:
    """Mean over layers of processed rows / initial rows (integer counts)."""
    counts = [keep_count(r, n0) for r in schedule_ratios(cfg, kind)]
    return math.fsum(c / n0 for c in counts) / len(counts)


# -- routing --------------------------------------------------------------------------


def select_and_store(
    stream,
    scores,
    keep_ratio: float,
    cfg: GumbelTopkConfig,
    buffer: StorageBuffer,
    stage: int = 0,
    keep: Optional[int] = None,
):
    """Keep the top rows, move the rest to `buffer`.

    Returns (active stream, buffer, TopkResult or None when nothing is pruned).
    The kept rows stay in their input order.
    """
    n = len(stream)
    scores = np.asarray(scores, dtype=float)
    if len(scores) != n:
        raise ShapeMismatch(f"{len(scores)} scores for {n} rows")
    k = keep_count(keep_ratio, n) if keep is None else int(keep)
    if k > n:
        raise KTooLarge(f"keep count {k} exceeds stream size {n}")
    if k < 1:
        raise EmptyTopK(f"keep count {k} < 1")
    if k == n:
        return stream, buffer, None
    res: TopkResult = gumbel_topk(scores, GumbelTopkConfig(k, cfg.temperature, cfg.seed, cfg.mode, stage))
    mask = np.zeros(n, dtype=bool)
    mask[res.indices] = True
    out = buffer.copy()
    out.store(stream.take(np.nonzero(~mask)[0]), stage)
    return stream.take(res.indices), out, res


def reactivate(active, buffer: StorageBuffer):
    """Merge buffered rows back (stale features) and sort by original index."""
    if not buffer.parts:
        return active, StorageBuffer(buffer.kind)
    if len(np.intersect1d(active.original_index, buffer.original_index)):
        raise IndexCollision("active and buffered rows share original indices")
    merged = type(active).concat([active] + list(buffer.parts))
    order = np.argsort(merged.original_index, kind="stable")
    return merged.take(order), StorageBuffer(buffer.kind)


# -- queries ----------------------------------------------------------------------------


def init_queries(anchors, init_mlp: MlpParams, start_index: int = 0, n_freq: int = 32) -> QuerySet:
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(anchors)):
        raise ShapeMismatch("anchors must be finite")
    emb, _ = mlp_forward(init_mlp, positional_encoding(anchors, n_freq))
    q = len(anchors)
    return QuerySet(emb, anchors, np.array(["initialized"] * q, dtype=object), np.arange(start_index, start_index + q))


def propagate_queries(prev_topk: Optional[QuerySet], ego_motion: SE2Pose, d: int = 0) -> QuerySet:
    """Carry queries into the current ego frame; `ego_motion` maps previous-ego to current-ego coordinates."""
    if prev_topk is None or len(prev_topk) == 0:
        return QuerySet.empty(d if prev_topk is None else prev_topk.embeddings.shape[1])
    pts = prev_topk.reference_points.copy()
    pts[:, :2] = ego_motion.apply(pts[:, :2])
    return QuerySet(prev_topk.embeddings.copy(), pts, np.array(["propagated"] * len(pts), dtype=object), prev_topk.original_index.copy())


# -- relevance head ---------------------------------------------------------------------


@dataclass
class RelevanceHeadParams:
    """r = sigmoid(u . phi([q | c | e])) with e = ego_mlp(ego state) when present."""

    phi: MlpParams
    u: np.ndarray
    ego_mlp: Optional[MlpParams] = None

    @classmethod
    def init(cls, d_q: int, d_c: int, hidden: int, rng: np.random.Generator, ego_dim: int = 8, ego_in: int = 3, with_ego: bool = True):
        e = MlpParams.init([ego_in, ego_dim, ego_dim], rng) if with_ego else None
        d_in = d_q + d_c + (ego_dim if with_ego else 0)
        phi = MlpParams.init([d_in, hidden, hidden], rng, final_activation=True)
        return cls(phi, rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden), e)

    def flat(self) -> np.ndarray:
        parts = [self.phi.flat(), self.u]
        if self.ego_mlp is not None:
            parts.append(self.ego_mlp.flat())
        return np.concatenate(parts)

    def with_flat(self, v: np.ndarray) -> "RelevanceHeadParams":
        n_phi = self.phi.flat().size
        phi = self.phi.with_flat(v[:n_phi])
        u = v[n_phi : n_phi + self.u.size].copy()
        ego = self.ego_mlp.with_flat(v[n_phi + self.u.size :]) if self.ego_mlp is not None else None
        return RelevanceHeadParams(phi, u, ego)

    def copy(self) -> "RelevanceHeadParams":
        return self.with_flat(self.flat().copy())


@dataclass
class RelevanceScores:
    scores: np.ndarray
    kind: str  # "plan" | "det"

    def __post_init__(self):
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("relevance scores must lie in [0, 1]")


def relevance_head_forward(head: RelevanceHeadParams, q: np.ndarray, c: np.ndarray, ego_state=None, kind: str = "plan"):
    """Scores for each row of [q | c] (ego embedding appended only for kind='plan')."""
    if len(q) != len(c):
        raise ShapeMismatch("one context row per query required")
    feats = [q, c]
    ego_cache = None
    use_ego = kind == "plan" and head.ego_mlp is not None
    if use_ego:
        if ego_state is None:
            ego_state = np.zeros(head.ego_mlp.in_dim)
        e, ego_cache = mlp_forward(head.ego_mlp, np.asarray(ego_state, dtype=float)[None, :], tag="rel_head")
        feats.append(np.repeat(e, len(q), axis=0))
    x = np.concatenate(feats, axis=1)
    if x.shape[1] != head.phi.in_dim:
        raise ShapeMismatch(f"relevance head expects {head.phi.in_dim} features, got {x.shape[1]}")
    h, cache = mlp_forward(head.phi, x, tag="rel_head")
    r = sigmoid(mm(h, head.u, "rel_head"))
    return r, (x, h, cache, ego_cache, r, use_ego, q.shape[1] + c.shape[1])


def relevance_head_backward(head: RelevanceHeadParams, fcache, g_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flattened head parameters only.

    No gradient is returned for q or c: the relevance loss must not reach the
    embeddings it scores.
    """
    x, h, cache, ego_cache, r, use_ego, d_qc = fcache
    g_logit = g_r * r * (1.0 - r)
    g_u = h.T @ g_logit
    g_h = np.outer(g_logit, head.u)
    gws, gbs, g_x = mlp_backward(head.phi, cache, g_h)
    parts = [np.concatenate([a.ravel() for pair in zip(gws, gbs) for a in pair]), g_u]
    if head.ego_mlp is not None:
        if use_ego:
            g_e = g_x[:, d_qc:].sum(axis=0, keepdims=True)
            ews, ebs, _ = mlp_backward(head.ego_mlp, ego_cache, g_e)
            parts.append(np.concatenate([a.ravel() for pair in zip(ews, ebs) for a in pair]))
        else:
            parts.append(np.zeros(head.ego_mlp.flat().size))
    return np.concatenate(parts)


def relevance_head_input_grad(head: RelevanceHeadParams, fcache, g_r: np.ndarray, d_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. q and c that the loss would send without the stop.

    Training never applies it; gradcheck uses it to show the scored inputs do
    influence the loss, so the zero update upstream is the stop's doing.
    """
    _, _, cache, _, r, _, d_qc = fcache
    g_logit = g_r * r * (1.0 - r)
    _, _, g_x = mlp_backward(head.phi, cache, np.outer(g_logit, head.u))
    return g_x[:, :d_q], g_x[:, d_q:d_qc]


def query_relevance(queries: QuerySet, contexts: np.ndarray, head: RelevanceHeadParams, ego_state=None, kind: str = "plan") -> RelevanceScores:
    r, _ = relevance_head_forward(head, queries.embeddings, contexts, ego_state, kind)
    return RelevanceScores(r, kind)


def top_query_count(q: int, fraction: float = 0.1) -> int:
    return max(1, int(math.ceil(fraction * q - _FLOOR_EPS)))


def token_relevance(footprints: np.ndarray) -> np.ndarray:
    """Mean of the (K, N) footprint rows of the top-K queries."""
    fp = np.atleast_2d(np.asarray(footprints, dtype=float))
    if fp.shape[0] == 0:
        raise EmptyTopK("no query footprints to aggregate")
    return fp.mean(axis=0)


# -- bookkeeping --------------------------------------------------------------------------


@dataclass
class StageRecord:
    stream: str  # "image" | "query"
    layer: int
    active: int
    buffered: int
    expected: int
    active_index: Optional[np.ndarray] = None
    buffered_index: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"stream": self.stream, "layer": self.layer, "active": self.active, "buffered": self.buffered, "expected": self.expected}


@dataclass
class SparsityTrace:
    stages: list[StageRecord] = field(default_factory=list)
    n_tokens: int = 0
    n_queries: int = 0

    def record(self, stream: str, layer: int, active, buffer: StorageBuffer, expected: int, keep_indices: bool = False):
        self.stages.append(
            StageRecord(
                stream,
                layer,
                len(active),
                len(buffer),
                expected,
                active.original_index.copy() if keep_indices else None,
                buffer.original_index.copy() if keep_indices else None,
            )
        )

    def processed_rows(self, stream: str) -> int:
        return sum(s.active for s in self.stages if s.stream == stream)

    def to_dict(self) -> dict:
        return {"n_tokens": self.n_tokens, "n_queries": self.n_queries, "stages": [s.to_dict() for s in self.stages]}
