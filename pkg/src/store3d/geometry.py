"""Convex BEV geometry: oriented boxes, hulls, polygon overlap and distance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput

# cross products below this fraction of (coordinate scale)^2 count as collinear
COLLINEAR_RTOL = 1e-12


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]; angles already in range come back unchanged."""
    if -math.pi < a <= math.pi:
        return float(a)
    w = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    elif w > math.pi:
        w -= 2.0 * math.pi
    return w


def angle_diff(a: float, b: float) -> float:
    """Shortest signed arc a - b in (-pi, pi]."""
    return wrap_angle(a - b)


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class OrientedBoxBEV:
    center: Point2
    yaw: float
    length: float
    width: float

    def __post_init__(self):
        cx, cy = self.center
        if not (math.isfinite(cx) and math.isfinite(cy) and math.isfinite(self.yaw)):
            raise DegenerateInput(f"non-finite box {self!r}")
        if not (self.length > 0 and self.width > 0):
            raise DegenerateInput(f"box dimensions must be positive, got {self.length}x{self.width}")
        object.__setattr__(self, "center", Point2(float(cx), float(cy)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def make(cls, x: float, y: float, yaw: float, length: float, width: float) -> "OrientedBoxBEV":
        return cls(Point2(x, y), yaw, length, width)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.length, self.width)


@dataclass(frozen=True)
class SE2Pose:
    translation: Point2
    rotation: float

    def __post_init__(self):
        tx, ty = self.translation
        object.__setattr__(self, "translation", Point2(float(tx), float(ty)))
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))

    @classmethod
    def identity(cls) -> "SE2Pose":
        return cls(Point2(0.0, 0.0), 0.0)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (n, 2) array of points."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.translation.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.translation.y
        return out

    def rotate(self, vecs: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        vecs = np.asarray(vecs, dtype=float)
        out = np.empty_like(vecs)
        out[..., 0] = c * vecs[..., 0] - s * vecs[..., 1]
        out[..., 1] = s * vecs[..., 0] + c * vecs[..., 1]
        return out

    def compose(self, other: "SE2Pose") -> "SE2Pose":
        """self ∘ other: apply `other` first, then `self`."""
        t = self.apply(np.array([other.translation]))[0]
        return SE2Pose(Point2(t[0], t[1]), self.rotation + other.rotation)

    def inverse(self) -> "SE2Pose":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return SE2Pose(Point2(-(c * tx + s * ty), -(-s * tx + c * ty)), -self.rotation)


def box_corners(box: OrientedBoxBEV) -> np.ndarray:
    """Return the 4 corners of `box` as a (4, 2) array in CCW order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    out = np.empty((4, 2))
    out[:, 0] = box.center.x + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = box.center.y + s * local[:, 0] + c * local[:, 1]
    return out


def transform_box(pose: SE2Pose, box: OrientedBoxBEV) -> OrientedBoxBEV:
    center = pose.apply(np.array([box.center]))[0]
    return OrientedBoxBEV(Point2(center[0], center[1]), box.yaw + pose.rotation, box.length, box.width)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


class ConvexPolygon:
    """Strictly convex polygon with CCW vertices, stored as an (n, 2) array."""

    __slots__ = ("vertices",)

    def __init__(self, vertices: Iterable[Sequence[float]], *, validate: bool = True):
        v = np.array(vertices, dtype=float).reshape(-1, 2)
        if validate:
            if len(v) < 3:
                raise DegenerateInput("polygon needs at least 3 vertices")
            if not np.all(np.isfinite(v)):
                raise DegenerateInput("non-finite polygon vertex")
            n = len(v)
            tol = _collinear_tol(v)
            for i in range(n):
                if _cross(v[i], v[(i + 1) % n], v[(i + 2) % n]) <= tol:
                    raise DegenerateInput("vertices are not strictly convex and CCW")
        v.setflags(write=False)
        self.vertices = v

    def __len__(self) -> int:
        return len(self.vertices)

    def __repr__(self) -> str:
        return f"ConvexPolygon({self.vertices.tolist()!r})"

    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def contains(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Boolean mask of points inside or on the boundary (within `tol` metres)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        a, b = self.edges()
        e = b - a
        elen = np.linalg.norm(e, axis=1)
        rel = pts[:, None, :] - a[None, :, :]
        signed = (e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]) / elen[None, :]
        return np.all(signed >= -tol, axis=1)

    def translated(self, dx: float, dy: float) -> "ConvexPolygon":
        return ConvexPolygon(self.vertices + np.array([dx, dy]), validate=False)


def _collinear_tol(pts: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(pts)))) if len(pts) else 1.0
    return COLLINEAR_RTOL * scale * scale


def _interior_mask(pts: np.ndarray, tol: float) -> np.ndarray:
    """Points strictly inside the polygon of directional extremes (Akl-Toussaint)."""
    dirs = np.array([[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], dtype=float)
    idx = np.argmax(pts @ dirs.T, axis=0)
    ring = pts[np.unique(idx)]
    if len(ring) < 3:
        return np.zeros(len(pts), dtype=bool)
    # order the extremes CCW around their centroid
    c = ring.mean(axis=0)
    ring = ring[np.argsort(np.arctan2(ring[:, 1] - c[1], ring[:, 0] - c[0]))]
    e = np.roll(ring, -1, axis=0) - ring
    rel = pts[:, None, :] - ring[None, :, :]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    return np.all(cross > 2.0 * tol + 1e-12 * np.linalg.norm(e, axis=1)[None, :], axis=1)


def convex_hull(points) -> ConvexPolygon:
    """Monotone-chain hull; collinear boundary points are dropped."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise DegenerateInput("non-finite point")
    pts = np.unique(pts, axis=0)  # lexicographic sort, duplicates removed
    if len(pts) < 3:
        raise DegenerateInput(f"need at least 3 distinct points, got {len(pts)}")
    tol = _collinear_tol(pts)
    if len(pts) > 16:
        pts = pts[~_interior_mask(pts, tol)]
    seq = [(float(x), float(y)) for x, y in pts]

    def half(seq):
        chain: list[tuple[float, float]] = []
        for px, py in seq:
            while len(chain) >= 2:
                (ox, oy), (ax, ay) = chain[-2], chain[-1]
                if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) > tol:
                    break
                chain.pop()
            chain.append((px, py))
        return chain

    lower = half(seq)
    upper = half(seq[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInput("points are collinear")
    return ConvexPolygon(hull, validate=False)


def box_polygon(box: OrientedBoxBEV) -> ConvexPolygon:
    return ConvexPolygon(box_corners(box), validate=False)


def _projections(verts: np.ndarray, axes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    proj = verts @ axes.T
    return proj.min(axis=0), proj.max(axis=0)


def polygons_overlap(p: ConvexPolygon, q: ConvexPolygon) -> bool:
    """Separating-axis test over both edge-normal sets; touching counts as overlap."""
    axes = []
    for poly in (p, q):
        a, b = poly.edges()
        e = b - a
        axes.append(np.stack([-e[:, 1], e[:, 0]], axis=1))
    axes = np.concatenate(axes)
    pmin, pmax = _projections(p.vertices, axes)
    qmin, qmax = _projections(q.vertices, axes)
    separated = (pmax < qmin) | (qmax < pmin)
    return not bool(np.any(separated))


def _point_segment_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each point to each segment, shape (len(pts), len(a))."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.einsum("pij,ij->pi", ap, ab) / denom[None, :]
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.linalg.norm(pts[:, None, :] - closest, axis=2)


def polygon_distance(p: ConvexPolygon, q: ConvexPolygon) -> float:
    """Minimum Euclidean distance between two convex polygons (0 on overlap)."""
    if polygons_overlap(p, q):
        return 0.0
    # disjoint edges: segment-segment distance is attained at an endpoint
    d_pq = _point_segment_dist(p.vertices, *q.edges())
    d_qp = _point_segment_dist(q.vertices, *p.edges())
    return float(min(d_pq.min(), d_qp.min()))
