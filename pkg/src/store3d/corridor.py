"""Future interaction corridors, relevance labels and d_min calibration.

A corridor is the convex hull of an agent's oriented footprints sampled over
``[t0, t0 + H]``.  Between annotated keyframes the centre is interpolated
linearly and the yaw along the shortest arc.  When the yaw changes inside a
sampling step, a few extra hull points are added so the hull is guaranteed to
contain the continuous sweep, not just the sampled boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import EmptyDistribution, InsufficientTrack
from .geometry import (
    ConvexPolygon,
    OrientedBoxBEV,
    Point2,
    angle_diff,
    box_corners,
    convex_hull,
    polygon_distance,
)

if TYPE_CHECKING:
    from .data import SceneDataset

_TIME_EPS = 1e-9
# sub-steps keep |yaw change| per step below this so the arc cover stays tight
_MAX_YAW_STEP = math.pi / 4


@dataclass
class AgentTrack:
    agent_id: str
    class_name: str
    times: np.ndarray
    boxes: list[OrientedBoxBEV]
    velocity: Optional[np.ndarray] = None  # (n, 2) m/s, world frame
    attribute: Optional[list[str]] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.boxes) < 1 or len(self.boxes) != len(self.times):
            raise InsufficientTrack(f"track {self.agent_id}: need one timestamp per box")
        if np.any(np.diff(self.times) <= 0):
            raise InsufficientTrack(f"track {self.agent_id}: timestamps must be strictly increasing")
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=float).reshape(len(self.times), 2)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def index_at(self, t: float) -> Optional[int]:
        i = int(np.searchsorted(self.times, t - _TIME_EPS))
        if i < len(self.times) and abs(self.times[i] - t) <= _TIME_EPS:
            return i
        return None

    def box_at(self, t: float) -> OrientedBoxBEV:
        """Interpolated footprint at time `t` (must lie within the track)."""
        if t < self.t_start - _TIME_EPS or t > self.t_end + _TIME_EPS:
            raise InsufficientTrack(f"track {self.agent_id} does not cover t={t:.3f}")
        i = self.index_at(t)
        if i is not None:
            return self.boxes[i]
        j = int(np.searchsorted(self.times, t))
        a, b = self.boxes[j - 1], self.boxes[j]
        s = (t - self.times[j - 1]) / (self.times[j] - self.times[j - 1])
        return OrientedBoxBEV(
            Point2(a.center.x + s * (b.center.x - a.center.x), a.center.y + s * (b.center.y - a.center.y)),
            a.yaw + s * angle_diff(b.yaw, a.yaw),
            a.length + s * (b.length - a.length),
            a.width + s * (b.width - a.width),
        )

    def velocity_at(self, t: float) -> tuple[float, float]:
        if self.velocity is None:
            return (0.0, 0.0)
        vx = float(np.interp(t, self.times, self.velocity[:, 0]))
        vy = float(np.interp(t, self.times, self.velocity[:, 1]))
        return (vx, vy)


@dataclass(frozen=True)
class RelevanceConfig:
    horizon_H: float = 5.0
    step_dt: float = 0.1
    d_min: float = 1.2
    percentile: float = 0.10
    # shortest usable horizon when a track ends early; below it the agent is uncovered
    min_horizon: float = 1.0

    def __post_init__(self):
        if not self.horizon_H > 0:
            raise ValueError("horizon_H must be positive")
        if not 0 < self.step_dt <= self.horizon_H:
            raise ValueError("step_dt must lie in (0, horizon_H]")
        if not self.d_min >= 0:
            raise ValueError("d_min must be non-negative")
        if not 0 < self.percentile <= 1:
            raise ValueError("percentile must lie in (0, 1]")


@dataclass
class RelevanceLabel:
    agent_id: str
    relevant: bool
    closest_distance_dC: float
    uncovered: bool = False


def covered_end(track: AgentTrack, t0: float, cfg: RelevanceConfig) -> float:
    """End of the usable horizon for `track` from `t0`; raises if too short."""
    if t0 < track.t_start - _TIME_EPS:
        raise InsufficientTrack(f"track {track.agent_id} starts after t0={t0:.3f}")
    want = t0 + cfg.horizon_H
    if track.t_end >= want - _TIME_EPS:
        return want
    if track.t_end - t0 >= min(cfg.min_horizon, cfg.horizon_H) - _TIME_EPS and track.t_end > t0:
        return track.t_end
    raise InsufficientTrack(
        f"track {track.agent_id} covers {max(0.0, track.t_end - t0):.2f}s of the {cfg.horizon_H:.2f}s horizon"
    )


def sample_times(track: AgentTrack, t0: float, t_end: float, dt: float) -> np.ndarray:
    n = int(math.floor((t_end - t0) / dt + _TIME_EPS))
    grid = t0 + dt * np.arange(n + 1)
    inner = track.times[(track.times > t0 + _TIME_EPS) & (track.times < t_end - _TIME_EPS)]
    ts = np.concatenate([grid, inner, [t_end]])
    ts = np.unique(np.round(ts, 12))
    return ts


def _arc_cover(a: OrientedBoxBEV, b: OrientedBoxBEV) -> list[np.ndarray]:
    """Extra points so that the hull contains every corner path between a and b."""
    dtheta = angle_diff(b.yaw, a.yaw)
    if dtheta == 0.0:
        return []
    hl, hw = (a.length + b.length) / 4.0, (a.width + b.width) / 4.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    ca = np.array(a.center)
    cb = np.array(b.center)
    out = []
    # arc endpoints plus the tangent intersection bound each corner's rotation
    for th, scale in ((a.yaw, 1.0), (b.yaw, 1.0), (a.yaw + dtheta / 2.0, 1.0 / math.cos(dtheta / 2.0))):
        c, s = math.cos(th), math.sin(th)
        rot = scale * (local @ np.array([[c, s], [-s, c]]))
        out.append(ca + rot)
        out.append(cb + rot)
    return out


def corridor_points(track: AgentTrack, t0: float, cfg: RelevanceConfig) -> np.ndarray:
    t_end = covered_end(track, t0, cfg)
    ts = list(sample_times(track, t0, t_end, cfg.step_dt))
    boxes = [track.box_at(t) for t in ts]
    pts = [box_corners(b) for b in boxes]
    for i in range(len(boxes) - 1):
        a, b = boxes[i], boxes[i + 1]
        dth = abs(angle_diff(b.yaw, a.yaw))
        if dth == 0.0:
            continue
        m = max(1, int(math.ceil(dth / _MAX_YAW_STEP)))
        sub = [a] + [track.box_at(ts[i] + (ts[i + 1] - ts[i]) * k / m) for k in range(1, m)] + [b]
        for k in range(m):
            pts.extend(_arc_cover(sub[k], sub[k + 1]))
            if k:
                pts.append(box_corners(sub[k]))
    return np.concatenate(pts)


def swept_corridor(track: AgentTrack, t0: float, cfg: RelevanceConfig) -> ConvexPolygon:
    return convex_hull(corridor_points(track, t0, cfg))


def relevance_label(
    agent: AgentTrack,
    ego: AgentTrack,
    t0: float,
    cfg: RelevanceConfig,
    ego_corridor: Optional[ConvexPolygon] = None,
) -> RelevanceLabel:
    if ego_corridor is None:
        ego_corridor = swept_corridor(ego, t0, cfg)
    d = polygon_distance(swept_corridor(agent, t0, cfg), ego_corridor)
    return RelevanceLabel(agent.agent_id, d <= cfg.d_min, d)


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest value (1-based)."""
    if len(values) == 0:
        raise EmptyDistribution("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile * len(ordered) - 1e-9))
    return ordered[min(rank, len(ordered)) - 1]


def empirical_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    ordered = sorted(values)
    n = len(ordered)
    cdf: list[tuple[float, float]] = []
    for i, v in enumerate(ordered, start=1):
        if cdf and cdf[-1][0] == v:
            cdf[-1] = (v, i / n)
        else:
            cdf.append((v, i / n))
    return cdf


@dataclass
class FrameLabels:
    scene_id: str
    frame_id: str
    labels: list[RelevanceLabel] = field(default_factory=list)

    def relevant_ids(self) -> set[str]:
        return {lab.agent_id for lab in self.labels if lab.relevant}


def _frame_distances(scene, frame, cfg: RelevanceConfig) -> list[tuple[str, float]]:
    """(agent_id, dC) for every agent in the frame; dC = inf when uncovered."""
    try:
        ego_poly = swept_corridor(scene.ego, frame.timestamp, cfg)
    except InsufficientTrack:
        return [(aid, math.inf) for aid in frame.agent_ids]
    out = []
    for aid in frame.agent_ids:
        try:
            poly = swept_corridor(scene.tracks[aid], frame.timestamp, cfg)
        except InsufficientTrack:
            out.append((aid, math.inf))
            continue
        out.append((aid, polygon_distance(poly, ego_poly)))
    return out


def _scene_distances(args):
    scene, cfg = args
    return [(frame.frame_id, _frame_distances(scene, frame, cfg)) for frame in scene.frames]


def dataset_distances(dataset: "SceneDataset", cfg: RelevanceConfig, workers: Optional[int] = None):
    """Per scene, per frame: list of (agent_id, dC).  Output order is deterministic."""
    from .data import parallel_map

    return parallel_map(_scene_distances, [(s, cfg) for s in dataset.scenes], workers)


def calibrate_dmin(
    dataset: "SceneDataset", cfg: RelevanceConfig, workers: Optional[int] = None
) -> tuple[float, list[tuple[float, float]]]:
    dists = [
        d
        for scene in dataset_distances(dataset, cfg, workers)
        for _, frame in scene
        for _, d in frame
        if math.isfinite(d)
    ]
    if not dists:
        raise EmptyDistribution("no (frame, agent) pair covers the horizon")
    return nearest_rank(dists, cfg.percentile), empirical_cdf(dists)


def labels_from_distances(distances, d_min: float, scene_ids: Sequence[str]) -> list[FrameLabels]:
    out = []
    for scene_id, scene in zip(scene_ids, distances):
        for frame_id, pairs in scene:
            labs = [
                RelevanceLabel(aid, math.isfinite(d) and d <= d_min, d, uncovered=not math.isfinite(d))
                for aid, d in pairs
            ]
            out.append(FrameLabels(scene_id, frame_id, labs))
    return out


def label_dataset(dataset: "SceneDataset", cfg: RelevanceConfig, workers: Optional[int] = None) -> list[FrameLabels]:
    dists = dataset_distances(dataset, cfg, workers)
    return labels_from_distances(dists, cfg.d_min, [s.scene_id for s in dataset.scenes])


def labels_to_records(labels: Sequence[FrameLabels]) -> list[dict]:
    return [
        {
            "scene_id": fl.scene_id,
            "frame_id": fl.frame_id,
            "labels": [
                {"agent_id": lab.agent_id, "relevant": lab.relevant, "dC": lab.closest_distance_dC, "uncovered": lab.uncovered}
                for lab in fl.labels
            ],
        }
        for fl in labels
    ]


def labels_from_records(records) -> list[FrameLabels]:
    out = []
    for r in records:
        labs = [
            RelevanceLabel(x["agent_id"], bool(x["relevant"]), math.inf if x["dC"] is None else float(x["dC"]), bool(x.get("uncovered", False)))
            for x in r["labels"]
        ]
        out.append(FrameLabels(r["scene_id"], r["frame_id"], labs))
    return out
