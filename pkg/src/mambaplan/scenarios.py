"""Synthetic driving scenarios: routes, agents, rasters, and set storage.

Every generated scenario is self-validating: the ground-truth trajectory is
run through the scoring stack and must come back collision-free, on the
drivable corridor, comfortable, and with high route progress, otherwise the
generator retries with a perturbed draw.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from .containers import ContainerError, read_container, write_container
from .metrics import (
    AgentTrack,
    DrivableMask,
    MetricThresholds,
    OrientedBox,
    ScenarioLog,
    score_scenario,
)
from .planner import COMMANDS, N_WAYPOINTS, WAYPOINT_DT, EgoStatus, Trajectory, wrap_angle

KINDS = (
    "straight-follow",
    "yield-to-crossing-agent",
    "lane-change",
    "left-turn",
    "right-turn",
    "stop-at-line",
)

SET_VERSION = 1
CORRIDOR_HALFWIDTH = 5.25  # m of drivable surface either side of the route
MASK_RESOLUTION = 0.5  # m per drivable-mask cell
EGO_LENGTH = 4.5
EGO_WIDTH = 2.0
MIN_GT_PROGRESS = 0.9

_COMMAND_BY_KIND = {
    "left-turn": "turn-left",
    "right-turn": "turn-right",
    "lane-change": "lane-change",
}


class GenerationError(RuntimeError):
    """Raised when no valid scenario is found within the retry budget."""


@dataclass
class ScenarioSpec:
    seed: int
    kind: str
    image_shape: tuple = (3, 64, 256)
    bev_shape: tuple = (1, 64, 64)
    bev_extent: float = 64.0  # m covered by the BEV raster
    retries: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; valid: {', '.join(KINDS)}")
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.bev_shape = tuple(int(v) for v in self.bev_shape)


@dataclass
class ScenarioSample:
    scenario_id: str
    kind: str
    seed: int
    camera: np.ndarray
    bev: np.ndarray
    ego: EgoStatus
    gt: Trajectory
    agents: list
    drivable: DrivableMask
    centerline: np.ndarray
    ego_length: float = EGO_LENGTH
    ego_width: float = EGO_WIDTH

    def log(self, plan=None):
        return ScenarioLog(
            plan=plan if plan is not None else self.gt,
            agents=self.agents,
            drivable=self.drivable,
            centerline=self.centerline,
            ego_length=self.ego_length,
            ego_width=self.ego_width,
            scenario_id=self.scenario_id,
        )


# ---------------------------------------------------------------------------
# route geometry


def _resample(points, ds=0.25):
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(0.0, cum[-1], ds)
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    return np.column_stack([x, y]), s


def _path_headings(path):
    d = np.diff(path, axis=0)
    h = np.arctan2(d[:, 1], d[:, 0])
    h = np.concatenate([h, h[-1:]])
    return np.unwrap(h)


def _build_route(kind, rng):
    """Dense (N, 2) route polyline in the ego frame; tangent +x at origin."""
    length = 70.0
    if kind in ("straight-follow", "yield-to-crossing-agent", "stop-at-line"):
        x = np.arange(0.0, length, 0.25)
        raw = np.column_stack([x, np.zeros_like(x)])
    elif kind == "lane-change":
        offset = 3.5 * (1.0 if rng.random() < 0.5 else -1.0)
        x0, span = 6.0 + 4.0 * rng.random(), 20.0 + 6.0 * rng.random()
        x = np.arange(0.0, length, 0.25)
        u = np.clip((x - x0) / span, 0.0, 1.0)
        y = offset * (3 * u**2 - 2 * u**3)
        raw = np.column_stack([x, y])
    else:  # left-turn / right-turn
        sign = 1.0 if kind == "left-turn" else -1.0
        lead_in = 4.0 + 3.0 * rng.random()
        radius = 8.0 + 3.0 * rng.random()
        s = np.arange(0.0, length, 0.25)
        pts = []
        arc_len = radius * np.pi / 2.0
        for si in s:
            if si < lead_in:
                pts.append((si, 0.0))
            elif si < lead_in + arc_len:
                phi = (si - lead_in) / radius
                pts.append((lead_in + radius * np.sin(phi), sign * radius * (1 - np.cos(phi))))
            else:
                tail = si - lead_in - arc_len
                pts.append((lead_in + radius, sign * (radius + tail)))
        raw = np.asarray(pts)
    path, _ = _resample(raw)
    return path


def _pose_at(path, cum, headings, s):
    s = np.clip(s, 0.0, cum[-1])
    return (
        float(np.interp(s, cum, path[:, 0])),
        float(np.interp(s, cum, path[:, 1])),
        float(np.interp(s, cum, headings)),
    )


def _cos_ramp(t, t0, t1, v0, v1):
    u = np.clip((t - t0) / max(t1 - t0, 1e-9), 0.0, 1.0)
    return v0 + (v1 - v0) * (1.0 - np.cos(np.pi * u)) / 2.0


def _speed_profile(kind, rng):
    """Speed as a function of time on [0, 4] s, with accel within comfort."""
    if kind in ("straight-follow", "lane-change"):
        v0 = 4.5 + 2.0 * rng.random()
        v1 = v0 + (rng.random() - 0.5)
        return lambda t: _cos_ramp(t, 0.0, 4.0, v0, v1)
    if kind in ("left-turn", "right-turn"):
        # lateral accel v^2 / R stays under the comfort bound at these speeds
        v0 = 3.5 + 1.5 * rng.random()
        return lambda t: np.full_like(np.asarray(t, dtype=float), v0)
    if kind == "yield-to-crossing-agent":
        v0 = 4.5 + 1.5 * rng.random()
        vmin = 0.6 + 0.4 * rng.random()
        v1 = 2.0 + 1.0 * rng.random()

        def profile(t):
            t = np.asarray(t, dtype=float)
            down = _cos_ramp(t, 0.0, 2.0, v0, vmin)
            up = _cos_ramp(t, 3.0, 4.0, vmin, v1)
            return np.where(t < 2.0, down, np.where(t < 3.0, vmin, up))

        return profile
    # stop-at-line
    v0 = 4.5 + 1.5 * rng.random()
    t_stop = 3.2
    return lambda t: np.where(np.asarray(t, dtype=float) < t_stop, _cos_ramp(t, 0.0, t_stop, v0, 0.0), 0.0)


def _integrate_profile(profile, times):
    grid = np.arange(0.0, times[-1] + 1e-9, 0.01)
    v = np.asarray(profile(grid), dtype=float)
    s = np.concatenate([[0.0], np.cumsum((v[1:] + v[:-1]) / 2.0 * np.diff(grid))])
    return np.interp(times, grid, s)


# ---------------------------------------------------------------------------
# agents


def _car_track(pose_fn):
    """Track from a pose function of time, sampled at the waypoint times."""
    boxes = []
    for k in range(N_WAYPOINTS):
        x, y, h, length, width = pose_fn((k + 1) * WAYPOINT_DT)
        boxes.append(OrientedBox(x, y, h, length, width))
    return AgentTrack(boxes)


def _make_agents(kind, rng, path, cum, headings, ego_s):
    v0 = float(ego_s[0] / WAYPOINT_DT) if ego_s[0] > 0 else 4.0
    agents = []
    if kind == "straight-follow":
        gap = 13.0 + 1.5 * v0 + 4.0 * rng.random()
        speed = v0
        agents.append(_car_track(lambda t: (gap + speed * t, 0.0, 0.0, 4.0, 1.8)))
    elif kind == "yield-to-crossing-agent":
        x_cross = 14.0 + 3.0 * rng.random()
        y_start = -6.0 - 2.0 * rng.random()
        u = 3.5 + 1.0 * rng.random()
        agents.append(
            _car_track(lambda t: (x_cross, y_start + u * t, np.pi / 2.0, 4.0, 1.8))
        )
    elif kind == "lane-change":
        gap = 15.0 + 1.3 * v0 + 3.0 * rng.random()
        speed = 1.5
        agents.append(_car_track(lambda t: (gap + speed * t, 0.0, 0.0, 4.0, 1.8)))
    elif kind == "stop-at-line":
        x_far = 18.0 + 3.0 * rng.random()
        u = 2.5 + rng.random()
        agents.append(
            _car_track(lambda t: (x_far, 8.0 - u * t, -np.pi / 2.0, 4.0, 1.8))
        )
    else:  # turns: a parked car well off the route
        s_ref = min(10.0, cum[-1] / 2.0)
        x, y, h = _pose_at(path, cum, headings, s_ref)
        n = np.array([-np.sin(h), np.cos(h)])
        side = 1.0 if kind == "right-turn" else -1.0
        px, py = np.array([x, y]) + side * 9.0 * n
        agents.append(_car_track(lambda t: (px, py, h, 4.0, 1.8)))
    return agents


# ---------------------------------------------------------------------------
# drivable mask


def _build_mask(path):
    margin = CORRIDOR_HALFWIDTH + 2.0
    lo = path.min(axis=0) - margin
    hi = path.max(axis=0) + margin
    res = MASK_RESOLUTION
    nx = int(np.ceil((hi[0] - lo[0]) / res))
    ny = int(np.ceil((hi[1] - lo[1]) / res))
    xs = lo[0] + (np.arange(nx) + 0.5) * res
    ys = lo[1] + (np.arange(ny) + 0.5) * res
    grid = np.zeros((nx, ny), dtype=bool)
    for i in range(0, nx, 32):
        block = xs[i : i + 32]
        cx = np.repeat(block, ny)
        cy = np.tile(ys, len(block))
        d2 = ((cx[:, None] - path[:, 0][None, :]) ** 2 + (cy[:, None] - path[:, 1][None, :]) ** 2).min(axis=1)
        grid[i : i + 32] = (np.sqrt(d2) <= CORRIDOR_HALFWIDTH).reshape(len(block), ny)
    return DrivableMask(grid=grid, origin=lo, resolution=res, yaw=0.0)


def _dist_to_path(points, path):
    pts = np.atleast_2d(points)
    d2 = ((pts[:, 0][:, None] - path[:, 0][None, :]) ** 2 + (pts[:, 1][:, None] - path[:, 1][None, :]) ** 2).min(axis=1)
    return np.sqrt(d2)


# ---------------------------------------------------------------------------
# rasters


def render_bev(shape, path, agents, extent):
    """Top-down raster: road edges 0.5, agents 1.0, drivable interior 0."""
    _, h, w = shape
    img = np.zeros((1, h, w))
    x_max, x_min = extent * 0.75, -extent * 0.25
    y_min = -extent / 2.0
    cx = x_max - (np.arange(h) + 0.5) * extent / h
    cy = y_min + (np.arange(w) + 0.5) * extent / w
    gx = np.repeat(cx, w)
    gy = np.tile(cy, h)
    dist = _dist_to_path(np.column_stack([gx, gy]), path).reshape(h, w)
    band = extent / h * 0.9
    img[0][np.abs(dist - CORRIDOR_HALFWIDTH) <= band] = 0.5
    for track in agents:
        b = track.boxes[0]
        c, s = np.cos(-b.heading), np.sin(-b.heading)
        rx = c * (gx - b.x) - s * (gy - b.y)
        ry = s * (gx - b.x) + c * (gy - b.y)
        inside = (np.abs(rx) <= b.length / 2.0) & (np.abs(ry) <= b.width / 2.0)
        img[0][inside.reshape(h, w)] = 1.0
    return img


def render_camera(shape, path, agents):
    """Schematic forward view: bearing maps to column, distance to row.

    Objects further left (larger y) land at smaller column indices; nearer
    objects sit lower in the frame and render larger.
    """
    _, h, w = shape
    img = np.zeros((3, h, w))
    horizon = h // 3
    fov = 1.0  # rad half-angle
    img[2, :horizon, :] = 0.2
    img[:, horizon:, :] = 0.08

    def project(x, y):
        if x < 0.5:
            return None
        bearing = np.arctan2(y, x)
        if abs(bearing) >= fov:
            return None
        d = np.hypot(x, y)
        col = int(round((0.5 - bearing / (2.0 * fov)) * (w - 1)))
        row = horizon + int(round((h - 1 - horizon) * (8.0 / (d + 8.0))))
        return row, col, d

    headings = _path_headings(path)
    for sign, chan, val in ((0.0, 1, 0.9), (1.0, 1, 0.5), (-1.0, 1, 0.5)):
        for i in range(0, len(path), 2):
            n = np.array([-np.sin(headings[i]), np.cos(headings[i])])
            p = path[i] + sign * CORRIDOR_HALFWIDTH * n
            hit = project(p[0], p[1])
            if hit is None:
                continue
            r, c, d = hit
            half = max(0, int(round(2.0 / (d + 1.0))))
            img[chan, r, max(0, c - half) : c + half + 1] = val
    for track in agents:
        b = track.boxes[0]
        hit = project(b.x, b.y)
        if hit is None:
            continue
        r, c, d = hit
        half_w = max(1, int(round(b.width / d * w / (2.0 * fov) / 2.0)))
        half_h = max(1, int(round(1.6 / d * (h - horizon) / 2.0)))
        r0, r1 = max(0, r - 2 * half_h), min(h, r + 1)
        c0, c1 = max(0, c - half_w), min(w, c + half_w + 1)
        img[0, r0:r1, c0:c1] = 1.0
        img[2, r0:r1, c0:c1] = 0.5
    return img


# ---------------------------------------------------------------------------
# generation


def _attempt(spec, rng):
    path = _build_route(spec.kind, rng)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    headings = _path_headings(path)
    profile = _speed_profile(spec.kind, rng)
    times = np.array([(k + 1) * WAYPOINT_DT for k in range(N_WAYPOINTS)])
    ego_s = _integrate_profile(profile, times)
    pts = np.array([_pose_at(path, cum, headings, s) for s in ego_s])
    pts[:, 2] = wrap_angle(pts[:, 2])
    gt = Trajectory(pts)

    v0 = float(profile(np.array([0.0]))[0])
    a0 = float((profile(np.array([0.02]))[0] - v0) / 0.02)
    cmd = np.zeros(len(COMMANDS))
    cmd[COMMANDS.index(_COMMAND_BY_KIND.get(spec.kind, "follow"))] = 1.0
    ego = EgoStatus(velocity=(v0, 0.0), acceleration=(a0, 0.0), command=cmd)

    agents = _make_agents(spec.kind, rng, path, cum, headings, ego_s)

    # route ends just past the ground truth so full progress is achievable
    s_end = min(ego_s[-1] + 0.5, cum[-1])
    n_line = max(int(s_end / 0.5) + 1, 2)
    line_s = np.linspace(0.0, s_end, n_line)
    centerline = np.column_stack(
        [np.interp(line_s, cum, path[:, 0]), np.interp(line_s, cum, path[:, 1])]
    )

    keep = path[cum <= s_end + CORRIDOR_HALFWIDTH]
    drivable = _build_mask(keep)
    sample = ScenarioSample(
        scenario_id=f"{spec.kind}-{spec.seed:08d}",
        kind=spec.kind,
        seed=spec.seed,
        camera=render_camera(spec.image_shape, keep, agents),
        bev=render_bev(spec.bev_shape, keep, agents, spec.bev_extent),
        ego=ego,
        gt=gt,
        agents=agents,
        drivable=drivable,
        centerline=centerline,
    )
    return sample


def generate_scenario(spec):
    """Build one scenario; ground truth must pass the scorer or we retry."""
    thr = MetricThresholds()
    last = None
    for attempt in range(spec.retries):
        rng = np.random.default_rng((spec.seed, attempt))
        sample = _attempt(spec, rng)
        scores = score_scenario(sample.log(), thr)
        last = (sample, scores)
        if (
            scores.nc == scores.dac == scores.ttc == scores.c == 1
            and scores.ep >= MIN_GT_PROGRESS
        ):
            return sample
    raise GenerationError(
        f"no valid {spec.kind!r} scenario for seed {spec.seed} in {spec.retries} tries; "
        f"last scores nc={last[1].nc} dac={last[1].dac} ep={last[1].ep:.3f} "
        f"ttc={last[1].ttc} c={last[1].c}"
    )


def generate_set(seed, count, kinds=KINDS, image_shape=(3, 64, 256), bev_shape=(1, 64, 64)):
    """Deterministic scenario list cycling through ``kinds`` round-robin."""
    kinds = tuple(kinds)
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown scenario kind {k!r}; valid: {', '.join(KINDS)}")
    out = []
    for i in range(count):
        spec = ScenarioSpec(
            seed=seed * 100_003 + i,
            kind=kinds[i % len(kinds)],
            image_shape=image_shape,
            bev_shape=bev_shape,
        )
        out.append(generate_scenario(spec))
    return out


def kind_counts(samples):
    counts = {}
    for s in samples:
        counts[s.kind] = counts.get(s.kind, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# storage


def _agents_array(agents):
    return np.array(
        [[[b.x, b.y, b.heading, b.length, b.width] for b in t.boxes] for t in agents]
    ).reshape(len(agents), N_WAYPOINTS, 5)


def _agents_from_array(arr):
    return [
        AgentTrack([OrientedBox(*row) for row in track]) for track in np.asarray(arr)
    ]


def write_set(dirpath, samples):
    """Persist a scenario set as a manifest plus one container per sample."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        arrays = {
            "camera": s.camera,
            "bev": s.bev,
            "ego_velocity": s.ego.velocity,
            "ego_acceleration": s.ego.acceleration,
            "ego_command": s.ego.command,
            "gt": s.gt.points,
            "agents": _agents_array(s.agents),
            "mask": s.drivable.grid.astype(float),
            "centerline": s.centerline,
        }
        meta = {
            "kind": "scenario",
            "id": s.scenario_id,
            "scenario_kind": s.kind,
            "seed": int(s.seed),
            "mask_origin": [float(v) for v in s.drivable.origin],
            "mask_resolution": float(s.drivable.resolution),
            "mask_yaw": float(s.drivable.yaw),
            "ego_length": float(s.ego_length),
            "ego_width": float(s.ego_width),
        }
        write_container(dirpath / stem, arrays, meta=meta)
        entries.append({"id": s.scenario_id, "kind": s.kind, "seed": int(s.seed), "stem": stem})
    manifest = {"version": SET_VERSION, "count": len(samples), "samples": entries}
    (dirpath / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def read_set(dirpath):
    dirpath = Path(dirpath)
    manifest_path = dirpath / "manifest.json"
    if not manifest_path.exists():
        raise ContainerError(f"no manifest.json in {dirpath}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != SET_VERSION:
        raise ContainerError(f"unsupported scenario set version {manifest.get('version')!r}")
    samples = []
    for entry in manifest["samples"]:
        try:
            arrays, meta = read_container(dirpath / entry["stem"])
        except ContainerError as e:
            raise ContainerError(f"sample {entry['id']!r}: {e}") from e
        if meta.get("kind") != "scenario":
            raise ContainerError(f"sample {entry['id']!r} is not a scenario container")
        samples.append(
            ScenarioSample(
                scenario_id=meta["id"],
                kind=meta["scenario_kind"],
                seed=int(meta["seed"]),
                camera=arrays["camera"],
                bev=arrays["bev"],
                ego=EgoStatus(
                    velocity=arrays["ego_velocity"],
                    acceleration=arrays["ego_acceleration"],
                    command=arrays["ego_command"],
                ),
                gt=Trajectory(arrays["gt"]),
                agents=_agents_from_array(arrays["agents"]),
                drivable=DrivableMask(
                    grid=arrays["mask"] > 0.5,
                    origin=np.asarray(meta["mask_origin"]),
                    resolution=meta["mask_resolution"],
                    yaw=meta["mask_yaw"],
                ),
                centerline=arrays["centerline"],
                ego_length=meta["ego_length"],
                ego_width=meta["ego_width"],
            )
        )
    if len(samples) != manifest["count"]:
        raise ContainerError(
            f"manifest count {manifest['count']} does not match {len(samples)} samples"
        )
    return samples
