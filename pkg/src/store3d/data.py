"""Scene datasets and the synthetic kinematic scene generator.

Everything is stored in a world frame.  Each frame carries the ego pose
(ego -> world) and the ground-truth boxes of the agents annotated in it.
Scenes default to 20 s sampled at 2 Hz, mirroring 0.5 s keyframes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .corridor import AgentTrack
from .errors import DataError
from .geometry import OrientedBoxBEV, Point2, SE2Pose, wrap_angle
from .io import dumps, read_json

CLASSES = ("car", "truck", "bus", "pedestrian", "bicycle")

# length, width, height in metres
CLASS_DIMS = {
    "car": (4.6, 1.9, 1.7),
    "truck": (7.0, 2.5, 3.0),
    "bus": (11.0, 2.9, 3.4),
    "pedestrian": (0.7, 0.7, 1.75),
    "bicycle": (1.8, 0.6, 1.3),
}

EGO_DIMS = (4.08, 1.73)


def parallel_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """Order-preserving map; ``STORE3D_THREADS`` caps the worker count."""
    if workers is None:
        workers = int(os.environ.get("STORE3D_THREADS", "1") or 1)
    workers = max(1, min(workers, len(items) or 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def attribute_for(class_name: str, speed: float) -> str:
    if class_name == "pedestrian":
        return "pedestrian.moving" if speed > 0.3 else "pedestrian.standing"
    if class_name == "bicycle":
        return "cycle.with_rider" if speed > 0.3 else "cycle.without_rider"
    return "vehicle.moving" if speed > 0.5 else "vehicle.parked"


@dataclass
class GTBox:
    agent_id: str
    class_name: str
    box: OrientedBoxBEV
    z: float
    height: float
    velocity: tuple[float, float] = (0.0, 0.0)
    attribute: str = "none"


@dataclass
class Frame:
    frame_id: str
    timestamp: float
    ego_pose: SE2Pose
    gt_boxes: list[GTBox] = field(default_factory=list)
    ego_state: tuple[float, float, float] = (0.0, 0.0, 0.0)  # speed, yaw rate, acceleration

    @property
    def agent_ids(self) -> list[str]:
        return [g.agent_id for g in self.gt_boxes]


@dataclass
class Scene:
    scene_id: str
    ego: AgentTrack
    tracks: dict[str, AgentTrack]
    frames: list[Frame]

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"scene {self.scene_id}: frame timestamps must increase")
        if len(set(self.tracks)) != len(self.tracks):
            raise DataError(f"scene {self.scene_id}: duplicate agent ids")


@dataclass
class SceneDataset:
    scenes: list[Scene]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metadata.setdefault("classes", list(CLASSES))
        self.metadata.setdefault("ego_length", EGO_DIMS[0])
        self.metadata.setdefault("ego_width", EGO_DIMS[1])

    @property
    def classes(self) -> list[str]:
        return list(self.metadata["classes"])

    def iter_frames(self) -> Iterator[tuple[Scene, Frame]]:
        for scene in self.scenes:
            for frame in scene.frames:
                yield scene, frame

    def frame_index(self) -> dict[str, tuple[Scene, Frame]]:
        return {f.frame_id: (s, f) for s, f in self.iter_frames()}

    def n_frames(self) -> int:
        return sum(len(s.frames) for s in self.scenes)

    # -- serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "scenes": [_scene_to_dict(s) for s in self.scenes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDataset":
        try:
            return cls([_scene_from_dict(s) for s in d["scenes"]], dict(d.get("metadata", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed dataset: {exc}") from exc

    def save(self, path, header: Optional[dict] = None) -> None:
        d = self.to_dict()
        if header is not None:
            d = {"meta": header, **d}
        with open(path, "w") as fh:
            fh.write(dumps(d) + "\n")

    @classmethod
    def load(cls, path) -> "SceneDataset":
        return cls.from_dict(read_json(path))


def _box_to_list(b: OrientedBoxBEV) -> list[float]:
    return [b.center.x, b.center.y, b.yaw, b.length, b.width]


def _box_from_list(v) -> OrientedBoxBEV:
    return OrientedBoxBEV(Point2(v[0], v[1]), v[2], v[3], v[4])


def _track_to_dict(t: AgentTrack) -> dict:
    d = {
        "agent_id": t.agent_id,
        "class_name": t.class_name,
        "times": t.times.tolist(),
        "boxes": [_box_to_list(b) for b in t.boxes],
    }
    if t.velocity is not None:
        d["velocity"] = t.velocity.tolist()
    if t.attribute is not None:
        d["attribute"] = list(t.attribute)
    return d


def _track_from_dict(d: dict) -> AgentTrack:
    return AgentTrack(
        d["agent_id"],
        d["class_name"],
        np.array(d["times"], dtype=float),
        [_box_from_list(b) for b in d["boxes"]],
        np.array(d["velocity"], dtype=float) if "velocity" in d else None,
        d.get("attribute"),
    )


def _scene_to_dict(s: Scene) -> dict:
    return {
        "scene_id": s.scene_id,
        "ego": _track_to_dict(s.ego),
        "tracks": [_track_to_dict(t) for t in s.tracks.values()],
        "frames": [
            {
                "frame_id": f.frame_id,
                "timestamp": f.timestamp,
                "ego_pose": [f.ego_pose.translation.x, f.ego_pose.translation.y, f.ego_pose.rotation],
                "ego_state": list(f.ego_state),
                "gt_boxes": [
                    {
                        "agent_id": g.agent_id,
                        "class": g.class_name,
                        "box": _box_to_list(g.box),
                        "z": g.z,
                        "h": g.height,
                        "velocity": list(g.velocity),
                        "attribute": g.attribute,
                    }
                    for g in f.gt_boxes
                ],
            }
            for f in s.frames
        ],
    }


def _scene_from_dict(d: dict) -> Scene:
    frames = []
    for f in d["frames"]:
        px, py, pr = f["ego_pose"]
        gts = [
            GTBox(g["agent_id"], g["class"], _box_from_list(g["box"]), g["z"], g["h"], tuple(g["velocity"]), g["attribute"])
            for g in f["gt_boxes"]
        ]
        frames.append(Frame(f["frame_id"], f["timestamp"], SE2Pose(Point2(px, py), pr), gts, tuple(f.get("ego_state", (0, 0, 0)))))
    tracks = [_track_from_dict(t) for t in d["tracks"]]
    return Scene(d["scene_id"], _track_from_dict(d["ego"]), {t.agent_id: t for t in tracks}, frames)


# -- synthetic generation ---------------------------------------------------


@dataclass
class SyntheticSpec:
    """Counts and kinematic ranges for `gen_synthetic`.

    ``counts`` maps an agent behaviour to the number of agents per scene:
    lead, follower, oncoming, adjacent, parked, sidewalk_ped, crossing_ped,
    cross_traffic, turning, stop_and_go.
    """

    n_scenes: int = 4
    duration: float = 20.0
    rate_hz: float = 2.0
    counts: dict = field(
        default_factory=lambda: {
            "lead": 1,
            "follower": 0,
            "oncoming": 5,
            "adjacent": 2,
            "parked": 12,
            "sidewalk_ped": 10,
            "crossing_ped": 1,
            "cross_traffic": 2,
            "turning": 3,
            "stop_and_go": 1,
        }
    )
    ego_speed: tuple[float, float] = (4.0, 12.0)
    ego_yaw_rate: tuple[float, float] = (-0.04, 0.04)
    curved_fraction: float = 0.5
    vehicle_speed: tuple[float, float] = (3.0, 12.0)
    ped_speed: tuple[float, float] = (0.6, 1.6)
    lane_width: float = 3.5
    visible_range: float = 60.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class _Path:
    """Constant-curvature reference path driven by the ego."""

    def __init__(self, x0: float, y0: float, h0: float, curvature: float):
        self.x0, self.y0, self.h0, self.k = x0, y0, h0, curvature

    def at(self, s, d=0.0):
        s = np.asarray(s, dtype=float)
        if abs(self.k) < 1e-9:
            x = self.x0 + s * math.cos(self.h0)
            y = self.y0 + s * math.sin(self.h0)
            h = np.full_like(s, self.h0)
        else:
            h = self.h0 + self.k * s
            x = self.x0 + (np.sin(h) - math.sin(self.h0)) / self.k
            y = self.y0 - (np.cos(h) - math.cos(self.h0)) / self.k
        x = x - np.sin(h) * d
        y = y + np.cos(h) * d
        return x, y, h


def _ctrv(x0, y0, h0, v, w, t):
    if abs(w) < 1e-9:
        return x0 + v * t * math.cos(h0), y0 + v * t * math.sin(h0), np.full_like(t, h0)
    h = h0 + w * t
    return x0 + v / w * (np.sin(h) - math.sin(h0)), y0 - v / w * (np.cos(h) - math.cos(h0)), h


def _stop_and_go_distance(t, v, period, rng_phase):
    """Arc length of a vehicle alternating between cruising at v and standing."""
    phase = (t + rng_phase) % period
    n = np.floor((t + rng_phase) / period)
    half = period / 2.0
    base = n * v * half + np.minimum(phase, half) * v
    start = math.floor(rng_phase / period) * v * half + min(rng_phase % period, half) * v
    return base - start


def gen_synthetic(spec: SyntheticSpec) -> SceneDataset:
    """Deterministic per-seed kinematic scenes around a moving ego."""
    rng = np.random.default_rng(spec.seed)
    scenes = [_gen_scene(spec, rng, i) for i in range(spec.n_scenes)]
    return SceneDataset(scenes, {"classes": list(CLASSES), "ego_length": EGO_DIMS[0], "ego_width": EGO_DIMS[1], "generator": spec.to_dict()})


def _gen_scene(spec: SyntheticSpec, rng: np.random.Generator, idx: int) -> Scene:
    sid = f"scene-{spec.seed:04d}-{idx:03d}"
    n = int(round(spec.duration * spec.rate_hz)) + 1
    times = np.arange(n) / spec.rate_hz
    v_e = rng.uniform(*spec.ego_speed)
    curved = rng.uniform() < spec.curved_fraction
    k = rng.uniform(*spec.ego_yaw_rate) / v_e if curved else 0.0
    h0 = rng.uniform(-math.pi, math.pi)
    path = _Path(rng.uniform(-100, 100), rng.uniform(-100, 100), h0, k)
    lw = spec.lane_width

    def ego_pos(t):
        return path.at(v_e * t)

    # motion functions: t -> (x, y, heading); heading follows travel direction
    agents: list[tuple[str, Callable]] = []
    counts = spec.counts

    def lane_agent(s0, d, v, reverse=False):
        sign = -1.0 if reverse else 1.0

        def f(t):
            x, y, h = path.at(s0 + sign * v * t, d)
            return x, y, h + (math.pi if reverse else 0.0)

        return f

    def add(kind, cls, fn):
        agents.append((cls, fn))

    vs = spec.vehicle_speed
    for _ in range(counts.get("lead", 0)):
        add("lead", "car", lane_agent(rng.uniform(10, 40), 0.0, max(0.5, v_e + rng.uniform(-2, 1))))
    for _ in range(counts.get("follower", 0)):
        add("follower", "car", lane_agent(-rng.uniform(10, 30), 0.0, v_e + rng.uniform(-1, 0.5)))
    for _ in range(counts.get("oncoming", 0)):
        cls = rng.choice(["car", "car", "truck", "bus"])
        add("oncoming", cls, lane_agent(rng.uniform(20, 160), lw, rng.uniform(*vs), reverse=True))
    for _ in range(counts.get("adjacent", 0)):
        cls = rng.choice(["car", "car", "truck"])
        add("adjacent", cls, lane_agent(rng.uniform(-30, 60), -lw, v_e + rng.uniform(-3, 3)))
    for _ in range(counts.get("parked", 0)):
        side = rng.choice([-1.0, 1.0])
        cls = rng.choice(["car", "car", "car", "truck"])
        d = side * (lw + lw / 2 + rng.uniform(0.6, 2.5)) if side > 0 else side * (lw / 2 + lw / 2 + rng.uniform(1.5, 3.0))
        add("parked", cls, lane_agent(rng.uniform(-40, 140), d, 0.0))
    for _ in range(counts.get("sidewalk_ped", 0)):
        side = rng.choice([-1.0, 1.0])
        d = side * rng.uniform(7.5, 11.0) + (lw / 2 if side > 0 else 0.0)
        add("sidewalk_ped", "pedestrian", lane_agent(rng.uniform(-30, 120), d, rng.uniform(*spec.ped_speed), reverse=bool(rng.uniform() < 0.5)))
    for _ in range(counts.get("crossing_ped", 0)):
        s_c = rng.uniform(5, 120)
        side = rng.choice([-1.0, 1.0])
        d0 = side * rng.uniform(6, 12)
        vp = rng.uniform(*spec.ped_speed)
        cls = "pedestrian" if rng.uniform() < 0.7 else "bicycle"
        if cls == "bicycle":
            vp *= 3.0
        t_start = rng.uniform(0, spec.duration)

        def crossing(t, s_c=s_c, d0=d0, vp=vp, side=side, t_start=t_start):
            d = d0 - side * vp * np.clip(t - t_start, 0.0, None)
            x, y, h = path.at(np.full_like(np.asarray(t, dtype=float), s_c), d)
            return x, y, h - side * math.pi / 2

        add("crossing_ped", cls, crossing)
    for _ in range(counts.get("cross_traffic", 0)):
        s_i = rng.uniform(40, 160)
        side = rng.choice([-1.0, 1.0])
        d0 = side * rng.uniform(40, 90)
        vc = rng.uniform(*vs)

        def cross(t, s_i=s_i, d0=d0, vc=vc, side=side):
            d = d0 - side * vc * np.asarray(t, dtype=float)
            x, y, h = path.at(np.full_like(np.asarray(t, dtype=float), s_i), d)
            return x, y, h - side * math.pi / 2

        add("cross_traffic", rng.choice(["car", "truck"]), cross)
    for _ in range(counts.get("turning", 0)):
        ex, ey, eh = ego_pos(np.array([0.0]))
        r = rng.uniform(25, 60)
        a = rng.uniform(-math.pi, math.pi)
        x0, y0 = ex[0] + r * math.cos(a), ey[0] + r * math.sin(a)
        hh = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(2.0, 8.0)
        w = rng.uniform(-0.25, 0.25)
        add("turning", rng.choice(["car", "bicycle"]), lambda t, x0=x0, y0=y0, hh=hh, v=v, w=w: _ctrv(x0, y0, hh, v, w, np.asarray(t, dtype=float)))
    for _ in range(counts.get("stop_and_go", 0)):
        s0 = rng.uniform(-10, 50)
        v = rng.uniform(*vs)
        period = rng.uniform(4, 10)
        ph = rng.uniform(0, period)

        def sg(t, s0=s0, v=v, period=period, ph=ph):
            s = s0 + _stop_and_go_distance(np.asarray(t, dtype=float), v, period, ph)
            return path.at(s, -lw)

        add("stop_and_go", "car", sg)

    ex, ey, eh = ego_pos(times)
    ego_boxes = [OrientedBoxBEV(Point2(x, y), h, *EGO_DIMS) for x, y, h in zip(ex, ey, eh)]
    ego_vel = _finite_velocity(ego_pos, times)
    ego = AgentTrack("ego", "car", times, ego_boxes, ego_vel)

    tracks: dict[str, AgentTrack] = {}
    dims: dict[str, tuple[float, float, float]] = {}
    for j, (cls, fn) in enumerate(agents):
        aid = f"{sid}-a{j:03d}"
        base = CLASS_DIMS[str(cls)]
        dim = tuple(b * rng.uniform(0.9, 1.1) for b in base)
        x, y, h = fn(times)
        x, y, h = np.broadcast_to(x, times.shape), np.broadcast_to(y, times.shape), np.broadcast_to(h, times.shape)
        vel = _finite_velocity(fn, times)
        boxes = [OrientedBoxBEV(Point2(a, b), c, dim[0], dim[1]) for a, b, c in zip(x, y, h)]
        attrs = [attribute_for(str(cls), float(np.hypot(*v))) for v in vel]
        tracks[aid] = AgentTrack(aid, str(cls), times, boxes, vel, attrs)
        dims[aid] = dim

    frames = []
    ego_speed = np.hypot(ego_vel[:, 0], ego_vel[:, 1])
    accel = np.gradient(ego_speed, times)
    for i, t in enumerate(times):
        pose = SE2Pose(Point2(ex[i], ey[i]), eh[i])
        gts = []
        for aid, tr in tracks.items():
            b = tr.boxes[i]
            if math.hypot(b.center.x - ex[i], b.center.y - ey[i]) > spec.visible_range:
                continue
            l, w, hgt = dims[aid]
            gts.append(GTBox(aid, tr.class_name, b, hgt / 2.0, hgt, (float(tr.velocity[i, 0]), float(tr.velocity[i, 1])), tr.attribute[i]))
        frames.append(Frame(f"{sid}-f{i:03d}", float(t), pose, gts, (float(ego_speed[i]), float(v_e * k), float(accel[i]))))
    return Scene(sid, ego, tracks, frames)


def crossing_scenario(seed: int = 0, duration: float = 10.0, rate_hz: float = 2.0, ego_speed: float = 8.0, ped_speed: float = 1.4) -> SceneDataset:
    """One scene: ego driving straight, a pedestrian stepping across its lane.

    The pedestrian reaches the ego's path at the same moment the ego does,
    a couple of seconds after t = 0, so the pair is on a collision course.
    """
    rng = np.random.default_rng(seed)
    sid = f"crossing-{seed:04d}"
    times = np.arange(int(round(duration * rate_hz)) + 1) / rate_hz
    h0 = rng.uniform(-math.pi, math.pi)
    path = _Path(rng.uniform(-50, 50), rng.uniform(-50, 50), h0, 0.0)
    t_meet = rng.uniform(1.5, 3.5)
    side = rng.choice([-1.0, 1.0])

    def ego_fn(t):
        return path.at(ego_speed * np.asarray(t, dtype=float))

    def ped_fn(t):
        t = np.asarray(t, dtype=float)
        x, y, h = path.at(np.full_like(t, ego_speed * t_meet), side * ped_speed * (t_meet - t))
        return x, y, h - side * math.pi / 2

    ego_boxes = [OrientedBoxBEV(Point2(x, y), h, *EGO_DIMS) for x, y, h in zip(*ego_fn(times))]
    ego = AgentTrack("ego", "car", times, ego_boxes, _finite_velocity(ego_fn, times))
    aid = f"{sid}-a000"
    l, w, hgt = CLASS_DIMS["pedestrian"]
    vel = _finite_velocity(ped_fn, times)
    x, y, h = (np.broadcast_to(v, times.shape) for v in ped_fn(times))
    boxes = [OrientedBoxBEV(Point2(a, b), c, l, w) for a, b, c in zip(x, y, h)]
    attrs = [attribute_for("pedestrian", float(np.hypot(*v))) for v in vel]
    ped = AgentTrack(aid, "pedestrian", times, boxes, vel, attrs)
    frames = []
    for i, t in enumerate(times):
        e = ego_boxes[i]
        gt = GTBox(aid, "pedestrian", boxes[i], hgt / 2.0, hgt, (float(vel[i, 0]), float(vel[i, 1])), attrs[i])
        frames.append(Frame(f"{sid}-f{i:03d}", float(t), SE2Pose(e.center, e.yaw), [gt], (ego_speed, 0.0, 0.0)))
    scene = Scene(sid, ego, {aid: ped}, frames)
    return SceneDataset([scene], {"classes": list(CLASSES), "ego_length": EGO_DIMS[0], "ego_width": EGO_DIMS[1]})


def _finite_velocity(fn, times, h=1e-3):
    xp, yp, _ = fn(times + h)
    xm, ym, _ = fn(times - h)
    vx = np.broadcast_to((np.asarray(xp) - np.asarray(xm)) / (2 * h), times.shape)
    vy = np.broadcast_to((np.asarray(yp) - np.asarray(ym)) / (2 * h), times.shape)
    return np.stack([vx, vy], axis=1)


def frame_to_ego(frame: Frame, boxes_world: Sequence[OrientedBoxBEV]) -> list[OrientedBoxBEV]:
    from .geometry import transform_box

    inv = frame.ego_pose.inverse()
    return [transform_box(inv, b) for b in boxes_world]


def ego_relative_yaw(frame: Frame, yaw_world: float) -> float:
    return wrap_angle(yaw_world - frame.ego_pose.rotation)
