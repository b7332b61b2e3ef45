"""Dense numeric kernels in float64.

Matrix products go through `mm` so an active `FlopCounter` can count
multiply-accumulates exactly.  Attention kernels take already-projected
queries/keys/values; projections belong to the calling block.
"""

from __future__ import annotations

import contextvars
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import KTooLarge, ShapeMismatch

# -- instrumentation ------------------------------------------------------------

_COUNTER: contextvars.ContextVar[Optional["FlopCounter"]] = contextvars.ContextVar("flop_counter", default=None)
_STAGE: contextvars.ContextVar[str] = contextvars.ContextVar("flop_stage", default="other")


class FlopCounter:
    """Counts multiply-accumulates issued by kernels inside a ``with`` block."""

    def __init__(self):
        self.macs = 0
        self.by_tag: dict[str, int] = {}
        self.by_stage: dict[str, int] = {}
        self._token = None

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def add(self, n: int, tag: str = "other") -> None:
        self.macs += int(n)
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(n)
        st = _STAGE.get()
        self.by_stage[st] = self.by_stage.get(st, 0) + int(n)

    def __enter__(self):
        self._token = _COUNTER.set(self)
        return self

    def __exit__(self, *exc):
        _COUNTER.reset(self._token)


class flop_stage:
    """Attribute MACs issued inside the block to a named pipeline stage."""

    def __init__(self, name: str):
        self.name = name
        self._token = None

    def __enter__(self):
        self._token = _STAGE.set(self.name)
        return self

    def __exit__(self, *exc):
        _STAGE.reset(self._token)


def count_macs(n: int, tag: str = "other") -> None:
    c = _COUNTER.get()
    if c is not None:
        c.add(n, tag)


def mm(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    count_macs(int(np.prod(a.shape[:-1])) * a.shape[-1] * (b.shape[1] if b.ndim > 1 else 1), tag)
    return a @ b


# -- elementwise ------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# -- MLP ------------------------------------------------------------------------------


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    final_activation: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0, final_activation: bool = False):
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            ws.append(rng.normal(0.0, scale / math.sqrt(a), size=(a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs, final_activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, v: np.ndarray) -> "MlpParams":
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(v[k : k + w.size].reshape(w.shape))
            k += w.size
            bs.append(v[k : k + b.size].reshape(b.shape))
            k += b.size
        return MlpParams(ws, bs, self.final_activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.final_activation)


def mlp_forward(p: MlpParams, x: np.ndarray, tag: str = "mlp"):
    """GELU between layers (and after the last one if `final_activation`)."""
    if x.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"MLP expects {p.in_dim} inputs, got {x.shape[-1]}")
    cache = []
    h = x
    n = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        pre = mm(h, w, tag) + b
        act = i < n - 1 or p.final_activation
        cache.append((h, pre, act))
        h = gelu(pre) if act else pre
    return h, cache


def mlp_backward(p: MlpParams, cache, gy: np.ndarray):
    """Returns (weight grads, bias grads, input grad)."""
    gws, gbs = [None] * len(p.weights), [None] * len(p.weights)
    g = gy
    for i in range(len(p.weights) - 1, -1, -1):
        h, pre, act = cache[i]
        if act:
            g = g * gelu_grad(pre)
        gws[i] = h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gbs[i] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ p.weights[i].T
    return gws, gbs, g


def positional_encoding(points: np.ndarray, n_freq: int = 32, extent: float = 60.0, temperature: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of (x, y, z): sin and cos at `n_freq` frequencies per axis."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 3:
        raise ShapeMismatch("positional_encoding expects (n, 3) points")
    freqs = temperature ** (-np.arange(n_freq) / n_freq)
    ang = (pts / extent)[:, :, None] * (2.0 * math.pi) * freqs[None, None, :] * 8.0
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)
    return enc.reshape(len(pts), 3 * 2 * n_freq)


# -- attention --------------------------------------------------------------------------


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int = 1):
    """Multi-head scaled dot-product attention; the trace is the head-averaged weight map."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatch("attention expects 2-D arrays")
    if k.shape[0] != v.shape[0] or q.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    d, dv = q.shape[1], v.shape[1]
    if heads < 1 or d % heads or dv % heads:
        raise ShapeMismatch(f"feature dims {d}/{dv} not divisible by {heads} heads")
    dh, dvh = d // heads, dv // heads
    out = np.empty((q.shape[0], dv))
    trace = np.zeros((q.shape[0], k.shape[0]))
    for h in range(heads):
        qs, ks, vs = q[:, h * dh : (h + 1) * dh], k[:, h * dh : (h + 1) * dh], v[:, h * dvh : (h + 1) * dvh]
        a = softmax(mm(qs, ks.T, "attn") / math.sqrt(dh))
        out[:, h * dvh : (h + 1) * dvh] = mm(a, vs, "attn")
        trace += a
    return out, trace / heads


def self_attention(x: np.ndarray, heads: int = 1) -> np.ndarray:
    return attention(x, x, x, heads)[0]


def grouped_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, groups: np.ndarray, heads: int = 1) -> np.ndarray:
    """Attention restricted to rows sharing a group id (rows of q, k, v aligned)."""
    groups = np.asarray(groups)
    out = np.empty((q.shape[0], v.shape[1]))
    for g in np.unique(groups):
        idx = np.nonzero(groups == g)[0]
        out[idx] = attention(q[idx], k[idx], v[idx], heads)[0]
    return out


def window_ids(rows: np.ndarray, cols: np.ndarray, window: int, width: int, view: Optional[np.ndarray] = None) -> np.ndarray:
    n_wc = -(-width // window)
    ids = (np.asarray(rows) // window) * n_wc + np.asarray(cols) // window
    if view is not None:
        n_wr = 1 << 20
        ids = np.asarray(view) * n_wr + ids
    return ids


def windowed_attention(tokens: np.ndarray, grid: tuple[int, int], window: int, heads: int = 1) -> np.ndarray:
    """Self-attention inside non-overlapping window x window blocks of a row-major grid.

    The grid is zero-padded to window multiples (padding rows act as keys) and
    the output is cropped back.
    """
    h, w = grid
    if tokens.shape[0] != h * w:
        raise ShapeMismatch(f"{tokens.shape[0]} tokens do not fill a {h}x{w} grid")
    if window < 1:
        raise ShapeMismatch("window must be positive")
    d = tokens.shape[1]
    hp, wp = -(-h // window) * window, -(-w // window) * window
    canvas = np.zeros((hp, wp, d))
    canvas[:h, :w] = tokens.reshape(h, w, d)
    out = np.empty_like(canvas)
    for r in range(0, hp, window):
        for c in range(0, wp, window):
            blk = canvas[r : r + window, c : c + window].reshape(-1, d)
            out[r : r + window, c : c + window] = self_attention(blk, heads).reshape(window, window, d)
    return out[:h, :w].reshape(h * w, d)


# -- sampling ---------------------------------------------------------------------------


def bilinear_weights(h: int, w: int, x: float, y: float) -> list[tuple[int, float]]:
    """(flat index, weight) of the up-to-4 neighbours of (x, y) with border clamping.

    Grid nodes sit at integer coordinates; x indexes columns, y rows.
    """
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    acc: dict[int, float] = {}
    for (r, c), wt in (
        ((y0, x0), (1 - fx) * (1 - fy)),
        ((y0, x1), fx * (1 - fy)),
        ((y1, x0), (1 - fx) * fy),
        ((y1, x1), fx * fy),
    ):
        acc[r * w + c] = acc.get(r * w + c, 0.0) + wt
    return list(acc.items())


def bilinear_sample(featmap: np.ndarray, xy: Sequence[float]) -> np.ndarray:
    """Sample an (h, w, C) feature map at continuous (x, y)."""
    h, w, c = featmap.shape
    flat = featmap.reshape(h * w, c)
    out = np.zeros(c)
    for idx, wt in bilinear_weights(h, w, float(xy[0]), float(xy[1])):
        out += wt * flat[idx]
    return out


@dataclass
class DeformParams:
    """Offset and attention-weight projections of a deformable cross-attention."""

    w_off: np.ndarray  # (D, levels*points*2), offsets in level pixels
    b_off: np.ndarray
    w_attn: np.ndarray  # (D, levels*points)
    b_attn: np.ndarray
    levels: int
    points: int

    def __post_init__(self):
        lp = self.levels * self.points
        if self.w_off.shape[1] != 2 * lp or self.w_attn.shape[1] != lp:
            raise ShapeMismatch("projection widths must match levels x points")
        if self.b_off.shape != (2 * lp,) or self.b_attn.shape != (lp,):
            raise ShapeMismatch("bias widths must match levels x points")

    @classmethod
    def init(cls, d: int, levels: int, points: int, rng: np.random.Generator, offset_scale: float = 1.0):
        lp = levels * points
        ang = 2 * math.pi * np.arange(points) / points
        ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * offset_scale
        b_off = np.tile(ring[None], (levels, 1, 1)).reshape(-1)
        return cls(
            rng.normal(0, 0.1 / math.sqrt(d), (d, 2 * lp)),
            b_off,
            rng.normal(0, 0.1 / math.sqrt(d), (d, lp)),
            np.zeros(lp),
            levels,
            points,
        )


def level_location(ref_uv: Sequence[float], h: int, w: int) -> tuple[float, float]:
    """Normalised (u, v) in [0, 1]^2 to pixel coordinates on an h x w level."""
    return ref_uv[0] * w - 0.5, ref_uv[1] * h - 0.5


def deformable_cross_attention(query: np.ndarray, ref_uv: Sequence[float], pyramid: Sequence[np.ndarray], params: DeformParams):
    """Context vector plus a footprint over the concatenated pyramid positions.

    The footprint scatters each sampling weight onto its bilinear neighbours;
    it sums to 1.
    """
    if len(pyramid) != params.levels:
        raise ShapeMismatch(f"expected {params.levels} pyramid levels, got {len(pyramid)}")
    d = query.shape[0]
    if params.w_off.shape[0] != d:
        raise ShapeMismatch("query width does not match projections")
    c = pyramid[0].shape[2]
    off = (mm(query[None], params.w_off, "deform_proj")[0] + params.b_off).reshape(params.levels, params.points, 2)
    a = softmax(mm(query[None], params.w_attn, "deform_proj")[0] + params.b_attn).reshape(params.levels, params.points)
    sizes = [f.shape[0] * f.shape[1] for f in pyramid]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    footprint = np.zeros(int(sum(sizes)))
    ctx = np.zeros(c)
    for lvl, fmap in enumerate(pyramid):
        h, w, cl = fmap.shape
        if cl != c:
            raise ShapeMismatch("pyramid levels must share the channel width")
        flat = fmap.reshape(h * w, c)
        x0, y0 = level_location(ref_uv, h, w)
        for p in range(params.points):
            nb = bilinear_weights(h, w, x0 + off[lvl, p, 0], y0 + off[lvl, p, 1])
            for idx, wt in nb:
                ctx += (a[lvl, p] * wt) * flat[idx]
                footprint[starts[lvl] + idx] += a[lvl, p] * wt
            count_macs(4 * c, "deform_sample")
    footprint /= footprint.sum()
    return ctx, footprint


# -- Gumbel top-k -------------------------------------------------------------------------

MODES = ("hard_eval", "straight_through_train", "soft")


@dataclass(frozen=True)
class GumbelTopkConfig:
    k: int
    temperature: float = 1.0
    seed: int = 0
    mode: str = "hard_eval"
    stage: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class TopkResult:
    indices: np.ndarray  # ascending
    soft_weights: np.ndarray
    backward: Callable[[np.ndarray], np.ndarray] = field(repr=False)


def gumbel_noise(n: int, seed: int, stage: int) -> np.ndarray:
    """Counter-based Gumbel noise: element i is the i-th draw of Philox keyed by (seed, stage)."""
    bitgen = np.random.Philox(key=np.array([seed & (2**64 - 1), stage & (2**64 - 1)], dtype=np.uint64))
    u = np.random.Generator(bitgen).random(n)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def _topk_desc(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties resolved towards lower index."""
    order = np.lexsort((np.arange(len(x)), -x))
    return np.sort(order[:k])


def _iterative_softmax(logits: np.ndarray, k: int):
    masked = logits.copy()
    rounds = []
    total = np.zeros_like(logits)
    for _ in range(k):
        p = softmax(masked)
        p[~np.isfinite(masked)] = 0.0
        rounds.append(p)
        total += p
        j = int(np.lexsort((np.arange(len(masked)), -masked))[0])
        masked[j] = -np.inf
    return total, rounds


def gumbel_topk(scores, cfg: GumbelTopkConfig) -> TopkResult:
    s = np.asarray(scores, dtype=float)
    if cfg.k > len(s):
        raise KTooLarge(f"k={cfg.k} exceeds {len(s)} scores")
    tau = cfg.temperature
    if cfg.mode == "hard_eval":
        z = s
    else:
        z = s + tau * gumbel_noise(len(s), cfg.seed, cfg.stage)
    idx = _topk_desc(z, cfg.k)
    soft, rounds = _iterative_softmax(z / tau, cfg.k)

    def backward(upstream: np.ndarray) -> np.ndarray:
        u = np.asarray(upstream, dtype=float)
        g = np.zeros_like(s)
        for p in rounds:
            g += p * u - p * float(p @ u)
        return g / tau

    return TopkResult(idx, soft, backward)


# -- gradient checking ---------------------------------------------------------------------


GRAD_FLOOR = 1e-6


def finite_diff_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], point, h: float = 1e-5, floor: float = GRAD_FLOOR) -> float:
    """Max over coordinates of |g - g_fd| / max(|g|, |g_fd|, floor) with central differences.

    The floor keeps round-off in near-zero components from dominating.
    """
    x = np.array(point, dtype=float)
    _, g = f(x)
    g = np.asarray(g, dtype=float).ravel()
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fd = (f(xp)[0] - f(xm)[0]) / (2.0 * h)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor)
        worst = max(worst, err)
    return worst


# -- weight files ---------------------------------------------------------------------------


def save_weights(path, arrays: dict[str, np.ndarray], header: Optional[dict] = None) -> None:
    """Flat little-endian float64 blob plus a JSON manifest of names and shapes."""
    path = Path(path)
    manifest, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in arrays:
            a = np.asarray(arrays[name], dtype="<f8", order="C")
            fh.write(a.tobytes())
            manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    path.with_suffix(".json").write_text(json.dumps({"meta": header, "dtype": "<f8", "arrays": manifest}, indent=1) + "\n")


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    out = {}
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        out[entry["name"]] = blob[entry["offset"] : entry["offset"] + n].reshape(tuple(entry["shape"])).copy()
    return out
