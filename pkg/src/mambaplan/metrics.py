"""Predictive driver model scoring: NC, DAC, EP, TTC, C and their aggregate.

Geometric checks run on 10 Hz linear interpolation between the 2 Hz
waypoints (headings interpolated on the circle). Collision tests use a
separating-axis test on oriented boxes; ``shapely`` provides the independent
dense-sampling oracles used by the test suite.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .planner import N_WAYPOINTS, WAYPOINT_DT, Trajectory, wrap_angle

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# geometry


@dataclass
class OrientedBox:
    x: float
    y: float
    heading: float
    length: float
    width: float

    def corners(self):
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        c, s = np.cos(self.heading), np.sin(self.heading)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def _interval(corners, axis):
    d = corners @ axis
    return d.min(), d.max()


def boxes_intersect(a, b):
    """Separating-axis test for two oriented boxes; touching counts as hit."""
    ca, cb = a.corners(), b.corners()
    # quick reject on circumscribed circles
    ra = 0.5 * np.hypot(a.length, a.width)
    rb = 0.5 * np.hypot(b.length, b.width)
    if np.hypot(a.x - b.x, a.y - b.y) > ra + rb:
        return False
    for box in (a, b):
        h = box.heading
        for ang in (h, h + np.pi / 2.0):
            axis = np.array([np.cos(ang), np.sin(ang)])
            lo1, hi1 = _interval(ca, axis)
            lo2, hi2 = _interval(cb, axis)
            if hi1 < lo2 or hi2 < lo1:
                return False
    return True


def boxes_intersect_oracle(a, b):
    """Independent polygon-intersection oracle (shapely)."""
    from shapely.geometry import Polygon

    return bool(Polygon(a.corners()).intersects(Polygon(b.corners())))


@dataclass
class DrivableMask:
    grid: np.ndarray  # (H, W) bool; row -> x index, col -> y index
    origin: np.ndarray  # world (x, y) of cell (0, 0) corner
    resolution: float  # m per cell
    yaw: float = 0.0  # grid orientation in the world frame

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.resolution <= 0:
            raise ValueError("DrivableMask resolution must be positive")

    def contains(self, points):
        """True per point iff it falls in a drivable cell; off-grid is False."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c, s = np.cos(-self.yaw), np.sin(-self.yaw)
        rel = pts - self.origin
        local = rel @ np.array([[c, -s], [s, c]]).T
        idx = np.floor(local / self.resolution).astype(int)
        ok = (
            (idx[:, 0] >= 0)
            & (idx[:, 0] < self.grid.shape[0])
            & (idx[:, 1] >= 0)
            & (idx[:, 1] < self.grid.shape[1])
        )
        out = np.zeros(len(pts), dtype=bool)
        out[ok] = self.grid[idx[ok, 0], idx[ok, 1]]
        return out


@dataclass
class AgentTrack:
    """Oriented boxes at each of the 8 trajectory steps (0.5 s .. 4.0 s)."""

    boxes: list

    def __post_init__(self):
        if len(self.boxes) != N_WAYPOINTS:
            raise ValueError(f"AgentTrack must span {N_WAYPOINTS} steps, got {len(self.boxes)}")

    def poses(self):
        return np.array([[b.x, b.y, b.heading] for b in self.boxes])

    @property
    def length(self):
        return self.boxes[0].length

    @property
    def width(self):
        return self.boxes[0].width


@dataclass
class ScenarioLog:
    plan: Trajectory
    agents: list
    drivable: DrivableMask
    centerline: np.ndarray  # (K, 2) route polyline
    ego_length: float = 4.5
    ego_width: float = 2.0
    scenario_id: str = ""

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        if self.centerline.ndim != 2 or self.centerline.shape[0] < 2:
            raise ValueError("route centerline needs at least 2 points")
        if _polyline_cumlen(self.centerline)[-1] <= 0:
            raise ValueError("route centerline must have positive arc length")


@dataclass
class MetricThresholds:
    accel_max: float = 4.0  # m/s^2
    jerk_max: float = 8.0  # m/s^3
    ttc_horizon: float = 1.0  # s
    ttc_dt: float = 0.1  # s propagation substep
    progress_speed_cap: float = 15.0  # m/s
    check_hz: int = 10


# ---------------------------------------------------------------------------
# pose interpolation


def _interp_angle(a, b, frac):
    return wrap_angle(a + wrap_angle(b - a) * frac)


def interp_poses(poses, hz):
    """Linearly interpolate (K, 3) poses sampled at 2 Hz up to ``hz``.

    Returns poses at times t1 .. tK with step 1/hz; refining hz produces a
    superset of the coarser sample times.
    """
    poses = np.asarray(poses, dtype=float)
    k = len(poses)
    n_seg = k - 1
    per = int(round(WAYPOINT_DT * hz))
    out = [poses[0]]
    for i in range(n_seg):
        for j in range(1, per + 1):
            f = j / per
            p = poses[i] * (1 - f) + poses[i + 1] * f
            p[2] = _interp_angle(poses[i][2], poses[i + 1][2], f)
            out.append(p)
    return np.array(out)


def _ego_boxes(log, hz):
    poses = interp_poses(log.plan.points, hz)
    return [OrientedBox(p[0], p[1], p[2], log.ego_length, log.ego_width) for p in poses]


def _agent_boxes(track, hz):
    poses = interp_poses(track.poses(), hz)
    return [OrientedBox(p[0], p[1], p[2], track.length, track.width) for p in poses]


# ---------------------------------------------------------------------------
# subscores


def no_collision(log, thresholds=None, intersect=boxes_intersect):
    thr = thresholds or MetricThresholds()
    ego = _ego_boxes(log, thr.check_hz)
    for track in log.agents:
        agent = _agent_boxes(track, thr.check_hz)
        for e, a in zip(ego, agent):
            if intersect(e, a):
                return 0
    return 1


def no_collision_dense_oracle(log, hz=100):
    """Dense time sampling with the polygon-intersection oracle."""
    return no_collision(log, MetricThresholds(check_hz=hz), intersect=boxes_intersect_oracle)


def drivable_area_compliance(log, thresholds=None):
    thr = thresholds or MetricThresholds()
    for box in _ego_boxes(log, thr.check_hz):
        if not log.drivable.contains(box.corners()).all():
            return 0
    return 1


def dac_edge_sampling_oracle(log, hz=10, step=0.05):
    """Sample the full box outline every ``step`` meters instead of corners."""
    for box in _ego_boxes(log, hz):
        corners = box.corners()
        for i in range(4):
            a, b = corners[i], corners[(i + 1) % 4]
            n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
            pts = a[None, :] + (b - a)[None, :] * np.linspace(0, 1, n)[:, None]
            if not log.drivable.contains(pts).all():
                return 0
    return 1


def _polyline_cumlen(line):
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_arclength(line, point):
    """Arc-length coordinate of the closest point on a polyline."""
    line = np.asarray(line, dtype=float)
    p = np.asarray(point, dtype=float)
    a, b = line[:-1], line[1:]
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    denom[denom == 0] = 1.0
    t = np.clip(((p - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
    proj = a + ab * t[:, None]
    d2 = ((proj - p) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    cum = _polyline_cumlen(line)
    return float(cum[i] + t[i] * np.linalg.norm(ab[i]))


def ego_progress(log, thresholds=None):
    thr = thresholds or MetricThresholds()
    s_first = project_arclength(log.centerline, log.plan.points[0, :2])
    s_last = project_arclength(log.centerline, log.plan.points[-1, :2])
    progress = s_last - s_first
    total = _polyline_cumlen(log.centerline)[-1]
    horizon = N_WAYPOINTS * WAYPOINT_DT
    achievable = min(thr.progress_speed_cap * horizon, total - s_first)
    if achievable <= 1e-9:
        return 1.0
    return float(np.clip(progress / achievable, 0.0, 1.0))


def _track_velocities(poses, dt=WAYPOINT_DT):
    v = np.diff(poses[:, :2], axis=0) / dt
    return np.vstack([v, v[-1:]])  # hold last velocity


def time_to_collision(log, thresholds=None, intersect=boxes_intersect, dt=None):
    """1 iff constant-velocity propagation over the horizon stays clear at
    every trajectory step; a colliding scenario scores 0 by dominance."""
    thr = thresholds or MetricThresholds()
    if no_collision(log, thr, intersect=intersect) == 0:
        return 0
    dt = dt or thr.ttc_dt
    ego_poses = log.plan.points
    ego_v = _track_velocities(ego_poses)
    agent_data = []
    for track in log.agents:
        poses = track.poses()
        agent_data.append((poses, _track_velocities(poses), track.length, track.width))
    taus = np.arange(dt, thr.ttc_horizon + 1e-9, dt)
    for k in range(N_WAYPOINTS):
        for tau in taus:
            ex = ego_poses[k, 0] + ego_v[k, 0] * tau
            ey = ego_poses[k, 1] + ego_v[k, 1] * tau
            ebox = OrientedBox(ex, ey, ego_poses[k, 2], log.ego_length, log.ego_width)
            for poses, vel, length, width in agent_data:
                abox = OrientedBox(
                    poses[k, 0] + vel[k, 0] * tau,
                    poses[k, 1] + vel[k, 1] * tau,
                    poses[k, 2],
                    length,
                    width,
                )
                if intersect(ebox, abox):
                    return 0
    return 1


def time_to_collision_dense_oracle(log, thresholds=None):
    thr = thresholds or MetricThresholds()
    return time_to_collision(log, thr, intersect=boxes_intersect_oracle, dt=0.01)


def comfort(log, thresholds=None):
    thr = thresholds or MetricThresholds()
    xy = log.plan.points[:, :2]
    v = np.diff(xy, axis=0) / WAYPOINT_DT
    a = np.diff(v, axis=0) / WAYPOINT_DT
    j = np.diff(a, axis=0) / WAYPOINT_DT
    amax = np.linalg.norm(a, axis=1).max() if len(a) else 0.0
    jmax = np.linalg.norm(j, axis=1).max() if len(j) else 0.0
    return 1 if (amax <= thr.accel_max and jmax <= thr.jerk_max) else 0


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class SubScores:
    nc: int
    dac: int
    ep: float
    ttc: int
    c: int

    def __post_init__(self):
        for name in ("nc", "dac", "ttc", "c"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"SubScores.{name} must be 0 or 1")
        if not 0.0 <= self.ep <= 1.0:
            raise ValueError(f"SubScores.ep must be in [0, 1], got {self.ep}")


def pdms(s):
    """NC x DAC x (5 EP + 5 TTC + 2 C) / 12."""
    return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.c) / 12.0


def score_scenario(log, thresholds=None):
    thr = thresholds or MetricThresholds()
    return SubScores(
        nc=no_collision(log, thr),
        dac=drivable_area_compliance(log, thr),
        ep=ego_progress(log, thr),
        ttc=time_to_collision(log, thr),
        c=comfort(log, thr),
    )


def aggregate(subscores, ids=None):
    """Per-scenario PDMS plus means; subscore means are averaged
    independently (mean-of-PDMS differs from PDMS-of-means in general)."""
    if ids is None:
        ids = [str(i) for i in range(len(subscores))]
    per = []
    for sid, s in sorted(zip(ids, subscores), key=lambda kv: kv[0]):
        per.append(
            {"id": sid, "nc": s.nc, "dac": s.dac, "ep": s.ep, "ttc": s.ttc, "c": s.c,
             "pdms": pdms(s)}
        )
    n = max(len(per), 1)
    return {
        "version": REPORT_VERSION,
        "per_scenario": per,
        "mean_pdms": sum(r["pdms"] for r in per) / n,
        "mean_subscores": {
            key: sum(r[key] for r in per) / n for key in ("nc", "dac", "ep", "ttc", "c")
        },
    }


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


def evaluate_model(ckpt, samples, thresholds=None, out_path=None):
    """Run inference, score each scenario against its log, emit a report."""
    from .training import infer_batch

    plans = infer_batch(ckpt, samples)
    subs = [score_scenario(s.log(plan=p), thresholds) for s, p in zip(samples, plans)]
    report = aggregate(subs, ids=[s.scenario_id for s in samples])
    if out_path is not None:
        write_report(report, out_path)
    return report


def score_ground_truth(samples, thresholds=None, out_path=None):
    subs = [score_scenario(s.log(), thresholds) for s in samples]
    report = aggregate(subs, ids=[s.scenario_id for s in samples])
    if out_path is not None:
        write_report(report, out_path)
    return report


# ---------------------------------------------------------------------------
# rigid-frame helpers (used by invariance tests)


def _transform_pts(pts, dx, dy, theta):
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(pts, dtype=float) @ rot.T + np.array([dx, dy])


def transform_log(log, dx, dy, theta):
    """Apply one rigid transform to every piece of scenario geometry."""
    pts = log.plan.points.copy()
    pts[:, :2] = _transform_pts(pts[:, :2], dx, dy, theta)
    pts[:, 2] = wrap_angle(pts[:, 2] + theta)
    agents = []
    for track in log.agents:
        boxes = []
        for b in track.boxes:
            x, y = _transform_pts([[b.x, b.y]], dx, dy, theta)[0]
            boxes.append(OrientedBox(x, y, float(wrap_angle(b.heading + theta)), b.length, b.width))
        agents.append(AgentTrack(boxes))
    mask = DrivableMask(
        grid=log.drivable.grid.copy(),
        origin=_transform_pts([log.drivable.origin], dx, dy, theta)[0],
        resolution=log.drivable.resolution,
        yaw=float(log.drivable.yaw + theta),
    )
    return ScenarioLog(
        plan=Trajectory(pts),
        agents=agents,
        drivable=mask,
        centerline=_transform_pts(log.centerline, dx, dy, theta),
        ego_length=log.ego_length,
        ego_width=log.ego_width,
        scenario_id=log.scenario_id,
    )
