"""Optimal (Hungarian) and greedy bipartite matching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NonFiniteCost, ShapeMismatch


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float

    @property
    def rows(self) -> list[int]:
        return [r for r, _ in self.pairs]

    @property
    def cols(self) -> list[int]:
        return [c for _, c in self.pairs]


def _as_cost(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 2:
        raise ShapeMismatch(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise NonFiniteCost("cost matrix contains NaN or Inf")
    return c


def _hungarian_wide(c: np.ndarray) -> np.ndarray:
    """Shortest augmenting paths with potentials; requires rows <= cols.

    Returns, for every row, the assigned column.
    """
    n, m = c.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            # update potentials along the alternating tree
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of size min(rows, cols) for a rectangular matrix."""
    c = _as_cost(cost)
    n, m = c.shape
    if n == 0 or m == 0:
        return Assignment([], 0.0)
    if n <= m:
        cols = _hungarian_wide(c)
        pairs = [(i, int(j)) for i, j in enumerate(cols)]
    else:
        rows = _hungarian_wide(c.T)
        pairs = sorted((int(i), j) for j, i in enumerate(rows))
    return Assignment(pairs, math.fsum(c[i, j] for i, j in pairs))


def greedy_assignment(cost) -> Assignment:
    """Repeatedly take the globally cheapest remaining entry (baseline for comparisons)."""
    c = _as_cost(cost)
    n, m = c.shape
    order = np.argsort(c, axis=None, kind="stable")
    used_r, used_c, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), m)
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        pairs.append((i, j))
        if len(pairs) == min(n, m):
            break
    pairs.sort()
    return Assignment(pairs, math.fsum(c[i, j] for i, j in pairs))


def greedy_match(
    det_centers,
    det_scores: Sequence[float],
    gt_centers,
    threshold: float,
    det_classes: Optional[Sequence[str]] = None,
    gt_classes: Optional[Sequence[str]] = None,
) -> list[tuple[int, int, float]]:
    """Score-ordered nearest-centre matching.

    Detections are visited by descending score (ties: lower index first); each
    takes the nearest still-unmatched GT of its class whose centre distance is
    strictly below `threshold`.  Returns (det_index, gt_index, distance).
    """
    det_centers = np.asarray(det_centers, dtype=float).reshape(-1, 2)
    gt_centers = np.asarray(gt_centers, dtype=float).reshape(-1, 2)
    scores = np.asarray(det_scores, dtype=float)
    if len(scores) != len(det_centers):
        raise ShapeMismatch("one score per detection required")
    if len(det_centers) == 0 or len(gt_centers) == 0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    dist = np.linalg.norm(det_centers[:, None, :] - gt_centers[None, :, :], axis=2)
    if det_classes is not None and gt_classes is not None:
        same = np.asarray(det_classes, dtype=object)[:, None] == np.asarray(gt_classes, dtype=object)[None, :]
        dist = np.where(same, dist, np.inf)
    taken = np.zeros(len(gt_centers), dtype=bool)
    out = []
    for d in order:
        row = np.where(taken, np.inf, dist[d])
        g = int(np.argmin(row))
        if row[g] < threshold:
            taken[g] = True
            out.append((int(d), g, float(row[g])))
    return out
