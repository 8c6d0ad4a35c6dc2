"""Deterministic synthetic top-down driving world.

Generates short driving episodes on procedurally built roads: ego-centric
top-down renderings, world-frame ego poses, future-waypoint supervision,
per-frame commands and kinematic status, and exact obstacle/drivable-area
oracles. Everything is a pure function of (config, seed), so identical
inputs give bit-identical episodes.

Rendering camera convention (used by all pixel<->world mappings):
    row = anchor_row - x_forward / meters_per_pixel
    col = anchor_col - y_left   / meters_per_pixel
with (x_forward, y_left) in the ego frame at the rendered timestep and the
anchor fixed at (0.75*H, W/2). World coordinates are x-east, y-north,
heading counter-clockwise from +x.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import LineString, Polygon

from .errors import ConfigurationError, FormatError

_EPISODE_MAGIC = b"PWMEP1"
_EPISODE_VERSION = 1
_MANIFEST_VERSION = 1

# Palette (RGB). Obstacle colors cycle per obstacle index.
_GRASS = np.array([88, 120, 68], dtype=np.float64)
_ROAD = np.array([90, 90, 94], dtype=np.float64)
_DASH = np.array([230, 230, 230], dtype=np.float64)
_EDGE = np.array([185, 175, 70], dtype=np.float64)
_EGO = np.array([240, 240, 255], dtype=np.float64)
_OBSTACLE_PALETTE = np.array(
    [
        [202, 62, 54],
        [66, 96, 196],
        [214, 160, 46],
        [150, 64, 160],
        [62, 170, 168],
        [226, 118, 40],
    ],
    dtype=np.float64,
)

_DASH_PERIOD = 4.0      # meters between dash starts
_DASH_LENGTH = 1.8
_DASH_WIDTH = 0.5
_EDGE_WIDTH = 0.35
_EDGE_INSET = 0.45      # edge line center sits this far inside the road border
_SPECKLE_CELL = 1.5     # meters; world-anchored texture cell
_GRASS_SPECKLE = 8.0
_ROAD_SPECKLE = 4.0
_STATION_STEP = 0.5     # centerline sampling resolution (meters)

_MAX_COMFORT_LAT_ACC = 2.0   # caps turn speed so ground truth stays comfortable
_EGO_ACCEL_LIMIT = 1.2       # m/s^2 longitudinal tracking limit

SCENARIOS = ("straight", "turn", "following", "crossing")


class Command(enum.IntEnum):
    """Navigation command attached to each frame."""

    STRAIGHT = 0
    LEFT = 1
    RIGHT = 2


@dataclass(frozen=True)
class EgoStatus:
    """Ego kinematic state at one frame."""

    speed: float           # m/s
    acceleration: float    # m/s^2
    yaw_rate: float        # rad/s


@dataclass(frozen=True)
class Trajectory:
    """m future waypoints in the ego frame (x forward, y left), meters."""

    waypoints: np.ndarray  # (m, 2)
    dt: float              # seconds between waypoints

    def __post_init__(self):
        wp = np.asarray(self.waypoints)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 1:
            raise ValueError(f"waypoints must be (m, 2) with m >= 1, got {wp.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(wp)):
            raise ValueError("waypoints contain non-finite values")
        object.__setattr__(self, "waypoints", wp)

    @property
    def m(self) -> int:
        return self.waypoints.shape[0]


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic world generator."""

    frame_height: int = 64
    frame_width: int = 112
    horizon_frames: int = 40
    frame_rate: float = 4.0
    lane_width: float = 3.5          # road half-width, meters
    meters_per_pixel: float = 0.5
    obstacle_count: int = 6
    speed_range: tuple[float, float] = (2.0, 6.0)
    seed: int = 0
    scenario_mix: tuple[float, float, float, float] = (0.4, 0.3, 0.2, 0.1)
    ego_length: float = 4.2
    ego_width: float = 1.8
    waypoint_count: int = 8
    waypoint_dt: float = 0.5

    def validate(self) -> None:
        if self.frame_height % 8 or self.frame_width % 8:
            raise ConfigurationError(
                f"frame_height/frame_width must be divisible by 8, got "
                f"{self.frame_height}x{self.frame_width}"
            )
        if self.horizon_frames < 2:
            raise ConfigurationError(f"horizon_frames must be >= 2, got {self.horizon_frames}")
        if self.frame_rate <= 0:
            raise ConfigurationError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.meters_per_pixel <= 0:
            raise ConfigurationError(
                f"meters_per_pixel must be positive, got {self.meters_per_pixel}"
            )
        if self.lane_width <= 0:
            raise ConfigurationError(f"lane_width must be positive, got {self.lane_width}")
        if self.obstacle_count < 0:
            raise ConfigurationError(f"obstacle_count must be >= 0, got {self.obstacle_count}")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"speed_range must satisfy 0 < min <= max, got {self.speed_range}")
        mix = np.asarray(self.scenario_mix, dtype=np.float64)
        if mix.shape != (4,) or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
            raise ConfigurationError(f"scenario_mix must be 4 non-negative fractions summing to 1, got {self.scenario_mix}")
        if self.waypoint_count < 1:
            raise ConfigurationError(f"waypoint_count must be >= 1, got {self.waypoint_count}")
        if self.waypoint_dt <= 0:
            raise ConfigurationError(f"waypoint_dt must be positive, got {self.waypoint_dt}")

    @property
    def anchor(self) -> tuple[int, int]:
        """Fixed ego pixel anchor (row, col)."""
        return (int(self.frame_height * 0.75), self.frame_width // 2)

    @property
    def sim_frames(self) -> int:
        """Simulated pose/obstacle horizon: rendered frames plus waypoint tail."""
        tail = int(np.ceil(self.frame_rate * self.waypoint_count * self.waypoint_dt))
        return self.horizon_frames + tail + 1

    def to_dict(self) -> dict:
        return {
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "horizon_frames": self.horizon_frames,
            "frame_rate": self.frame_rate,
            "lane_width": self.lane_width,
            "meters_per_pixel": self.meters_per_pixel,
            "obstacle_count": self.obstacle_count,
            "speed_range": list(self.speed_range),
            "seed": self.seed,
            "scenario_mix": list(self.scenario_mix),
            "ego_length": self.ego_length,
            "ego_width": self.ego_width,
            "waypoint_count": self.waypoint_count,
            "waypoint_dt": self.waypoint_dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        kwargs = dict(d)
        for key in ("speed_range", "scenario_mix"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class RoadGeometry:
    """Route centerline (dense polyline) plus half-width."""

    centerline: np.ndarray   # (S, 2) world frame
    headings: np.ndarray     # (S,) tangent heading per sample
    stations: np.ndarray     # (S,) cumulative arclength
    half_width: float

    def polygon(self) -> Polygon:
        # Every ~2m is plenty for the drivable-area test.
        line = LineString(self.centerline[:: max(1, int(2.0 / _STATION_STEP))])
        return line.buffer(self.half_width, quad_segs=8)


@dataclass(frozen=True)
class WorldState:
    """Inputs of one rendered frame."""

    ego_pose: np.ndarray     # (3,) x, y, heading
    obstacles: np.ndarray    # (n, 5) cx, cy, length, width, heading (world frame)
    road: RoadGeometry
    config: WorldConfig


@dataclass
class Episode:
    """One synthetic driving clip plus its oracles.

    ``ego_poses`` and ``obstacles`` extend ``sim_frames`` past the rendered
    clip so the waypoint/collision horizon is covered at every frame.
    """

    config: WorldConfig
    scenario: str
    frames: np.ndarray        # (N, H, W, 3) uint8
    ego_poses: np.ndarray     # (N_sim, 3) float32
    waypoints_gt: np.ndarray  # (N, m, 2) float32, ego frame per frame
    commands: np.ndarray      # (N,) int64 of Command values
    ego_status: np.ndarray    # (N, 3) float32: speed, accel, yaw_rate
    obstacles: np.ndarray     # (N_sim, n_obs, 5) float32
    road_polygon: np.ndarray  # (P, 2) float32 exterior ring
    road: RoadGeometry | None = field(default=None, repr=False, compare=False)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def waypoints_at(self, t: int) -> Trajectory:
        return Trajectory(self.waypoints_gt[t].astype(np.float64), self.config.waypoint_dt)

    def status_at(self, t: int) -> EgoStatus:
        s = self.ego_status[t]
        return EgoStatus(float(s[0]), float(s[1]), float(s[2]))

    def command_at(self, t: int) -> Command:
        return Command(int(self.commands[t]))

    def drivable_polygon(self) -> Polygon:
        return Polygon(self.road_polygon.astype(np.float64))


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def world_to_ego(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Map world-frame points (n, 2) into the ego frame of ``pose``."""
    rel = np.asarray(points, dtype=np.float64) - pose[:2]
    return rel @ rotation(float(pose[2]))  # == R(-h) @ rel, row-vector form


def ego_to_world(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ rotation(float(pose[2])).T + pose[:2]


def box_corners(box: np.ndarray) -> np.ndarray:
    """Corners (4, 2) of an oriented box (cx, cy, length, width, heading)."""
    cx, cy, length, width, heading = (float(v) for v in box)
    half = np.array(
        [
            [length / 2, width / 2],
            [length / 2, -width / 2],
            [-length / 2, -width / 2],
            [-length / 2, width / 2],
        ]
    )
    return half @ rotation(heading).T + np.array([cx, cy])


def boxes_intersect(box_a: np.ndarray, box_b: np.ndarray) -> bool:
    """Exact oriented-box intersection via separating axes.

    Closed-set convention: boxes sharing only an edge or a corner count as
    intersecting (no strict inequality admits a separating axis).
    """
    ca = box_corners(np.asarray(box_a, dtype=np.float64))
    cb = box_corners(np.asarray(box_b, dtype=np.float64))
    for corners in (ca, cb):
        for i in range(2):  # two unique edge normals per rectangle
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            norm = np.linalg.norm(axis)
            if norm == 0.0:
                continue
            axis = axis / norm
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def sat_margin(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """Largest axis gap (positive: separated) across the SAT axes.

    Negative values mean overlap on every axis; magnitude is the smallest
    per-axis overlap. Used by tests to skip near-tangent pairs.
    """
    ca = box_corners(np.asarray(box_a, dtype=np.float64))
    cb = box_corners(np.asarray(box_b, dtype=np.float64))
    margin = -np.inf
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            axis = axis / np.linalg.norm(axis)
            pa = ca @ axis
            pb = cb @ axis
            gap = max(pb.min() - pa.max(), pa.min() - pb.max())
            margin = max(margin, gap)
    return float(margin)


# ---------------------------------------------------------------------------
# path construction
# ---------------------------------------------------------------------------

def _sample_arc(center, radius, theta0, theta1, step):
    n = max(2, int(abs(theta1 - theta0) * radius / step) + 1)
    thetas = np.linspace(theta0, theta1, n)
    return center + radius * np.stack([np.cos(thetas), np.sin(thetas)], axis=1)


def _polyline_stations(points: np.ndarray):
    deltas = np.diff(points, axis=0)
    seg = np.hypot(deltas[:, 0], deltas[:, 1])
    stations = np.concatenate([[0.0], np.cumsum(seg)])
    headings = np.arctan2(deltas[:, 1], deltas[:, 0])
    headings = np.concatenate([headings, headings[-1:]])
    return stations, headings


def _build_path(scenario: str, rng: np.random.Generator, total_length: float, cruise: float):
    """Centerline polyline in path frame (starts at origin heading +x)."""
    if scenario == "turn":
        d0 = rng.uniform(9.0, 15.0)
        radius = max(10.0, cruise * cruise / _MAX_COMFORT_LAT_ACC) + rng.uniform(0.0, 3.0)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        lead_in = np.stack([np.linspace(0, d0, int(d0 / _STATION_STEP) + 1), np.zeros(int(d0 / _STATION_STEP) + 1)], axis=1)
        center = np.array([d0, sign * radius])
        theta0 = -sign * np.pi / 2
        theta1 = theta0 + sign * np.pi / 2
        arc = _sample_arc(center, radius, theta0, theta1, _STATION_STEP)[1:]
        exit_heading = sign * np.pi / 2
        exit_dir = np.array([np.cos(exit_heading), np.sin(exit_heading)])
        remaining = max(total_length - d0 - radius * np.pi / 2, 20.0)
        n_exit = int(remaining / _STATION_STEP) + 1
        tail = arc[-1] + exit_dir * np.linspace(_STATION_STEP, remaining, n_exit)[:, None]
        points = np.concatenate([lead_in, arc, tail], axis=0)
    else:
        n = int(total_length / _STATION_STEP) + 1
        points = np.stack([np.linspace(0.0, total_length, n), np.zeros(n)], axis=1)
    return points


def _speed_profile(scenario, rng, stations, headings, cruise, n_steps, dt_f, lead=None):
    """Frame-by-frame station/speed integration with accel-limited tracking.

    ``lead``: (station_of_lead_at_step, lead_speed) for the following scenario.
    Returns per-step ego stations and speeds (length n_steps).
    """
    # Per-station curvature -> lateral comfort speed cap.
    dh = np.diff(np.unwrap(headings))
    ds = np.maximum(np.diff(stations), 1e-9)
    curvature = np.concatenate([dh / ds, [0.0]])
    v_cap = np.where(
        np.abs(curvature) > 1e-6,
        np.sqrt(_MAX_COMFORT_LAT_ACC / np.maximum(np.abs(curvature), 1e-6)),
        np.inf,
    )
    # Widen each cap backwards so the ego brakes before the arc.
    taper = int(8.0 / _STATION_STEP)
    v_target = np.minimum(cruise, v_cap)
    for _ in range(taper):
        v_target[:-1] = np.minimum(v_target[:-1], v_target[1:] + _EGO_ACCEL_LIMIT * _STATION_STEP / max(cruise, 1.0))

    s = 12.0  # start with road behind the ego
    v = min(cruise, float(np.interp(s, stations, v_target)))
    out_s, out_v = [], []
    for k in range(n_steps):
        target = float(np.interp(s, stations, v_target))
        if lead is not None:
            lead_s, lead_v = lead
            gap = lead_s[k] - s
            if gap < 12.0:
                target = min(target, lead_v)
        v = float(np.clip(target, v - _EGO_ACCEL_LIMIT * dt_f, v + _EGO_ACCEL_LIMIT * dt_f))
        s = s + v * dt_f
        out_s.append(s)
        out_v.append(v)
    return np.array(out_s), np.array(out_v)


def _pose_at_stations(road: RoadGeometry, query: np.ndarray) -> np.ndarray:
    x = np.interp(query, road.stations, road.centerline[:, 0])
    y = np.interp(query, road.stations, road.centerline[:, 1])
    h = np.interp(query, road.stations, np.unwrap(road.headings))
    return np.stack([x, y, h], axis=1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _speckle(world_xy: np.ndarray) -> np.ndarray:
    """World-anchored texture in [-1, 1]; pure function of position."""
    cells = np.floor(world_xy / _SPECKLE_CELL).astype(np.int64)
    ix = cells[..., 0].astype(np.uint32)
    iy = cells[..., 1].astype(np.uint32)
    h = ix * np.uint32(0x9E3779B1) ^ iy * np.uint32(0x85EBCA6B)
    h ^= h >> np.uint32(13)
    h *= np.uint32(0xC2B2AE35)
    h ^= h >> np.uint32(16)
    return (h.astype(np.float64) / 4294967295.0) * 2.0 - 1.0


def _pixel_grid(config: WorldConfig):
    """Ego-frame coordinates (x forward, y left) of every pixel center."""
    rows = np.arange(config.frame_height)
    cols = np.arange(config.frame_width)
    ar, ac = config.anchor
    x = (ar - rows)[:, None] * config.meters_per_pixel * np.ones((1, config.frame_width))
    y = np.ones((config.frame_height, 1)) * (ac - cols)[None, :] * config.meters_per_pixel
    return x, y


def _paint_box(img, px_x, px_y, box_ego, color):
    """Fill pixels whose centers fall inside an ego-frame oriented box."""
    cx, cy, length, width, heading = (float(v) for v in box_ego)
    mpp = (px_x[0, 0] - px_x[1, 0])  # row step in meters
    # Bounding window in pixel indices keeps the fill cheap.
    reach = 0.5 * np.hypot(length, width)
    r0 = int(np.floor((px_x[0, 0] - (cx + reach)) / mpp))
    r1 = int(np.ceil((px_x[0, 0] - (cx - reach)) / mpp)) + 1
    c0 = int(np.floor((px_y[0, 0] - (cy + reach)) / mpp))
    c1 = int(np.ceil((px_y[0, 0] - (cy - reach)) / mpp)) + 1
    r0, r1 = max(r0, 0), min(r1, img.shape[0])
    c0, c1 = max(c0, 0), min(c1, img.shape[1])
    if r0 >= r1 or c0 >= c1:
        return
    dx = px_x[r0:r1, c0:c1] - cx
    dy = px_y[r0:r1, c0:c1] - cy
    c, s = np.cos(heading), np.sin(heading)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
    img[r0:r1, c0:c1][inside] = color


def _dist_to_polyline(px, py, polyline):
    """Min distance from each pixel center to a polyline, vectorized."""
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    a = polyline[:-1]
    b = polyline[1:]
    ab = b - a
    ab_len2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab_len2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(pts[:, None, :] - closest, axis=2).min(axis=1)
    return d.reshape(px.shape)


def render_frame(state: WorldState) -> np.ndarray:
    """Render one ego-centric top-down frame. Pure and deterministic."""
    cfg = state.config
    px_x, px_y = _pixel_grid(cfg)
    pose = np.asarray(state.ego_pose, dtype=np.float64)

    # World coordinates of every pixel center (for world-anchored texture).
    rot = rotation(float(pose[2]))
    flat = np.stack([px_x.ravel(), px_y.ravel()], axis=1)
    world = flat @ rot.T + pose[:2]
    speckle = _speckle(world).reshape(px_x.shape)

    # Road membership from distance to the centerline; identical to the
    # buffered drivable polygon up to arc discretization.
    center_ego = world_to_ego(state.road.centerline, pose)
    keep = (
        (center_ego[:, 0] > px_x.min() - 4 * cfg.lane_width)
        & (center_ego[:, 0] < px_x.max() + 4 * cfg.lane_width)
        & (np.abs(center_ego[:, 1]) < np.abs(px_y).max() + 4 * cfg.lane_width)
    )
    # Keep a contiguous chunk so the polyline stays connected.
    idx = np.nonzero(keep)[0]
    if idx.size >= 2:
        visible = state.road.centerline[idx.min(): idx.max() + 1]
    else:
        visible = state.road.centerline
    visible_ego = world_to_ego(visible[:: max(1, int(1.0 / _STATION_STEP))], pose)
    dist = _dist_to_polyline(px_x, px_y, visible_ego)
    on_road = dist <= cfg.lane_width

    img = np.empty((cfg.frame_height, cfg.frame_width, 3), dtype=np.float64)
    img[:] = _GRASS + (speckle * _GRASS_SPECKLE)[..., None]
    img[on_road] = (_ROAD + (speckle * _ROAD_SPECKLE)[..., None])[on_road]

    # Station range visible around the ego drives dash/edge stamping.
    road = state.road
    s_ego = float(road.stations[np.argmin(np.linalg.norm(road.centerline - pose[:2], axis=1))])
    s_lo = max(0.0, s_ego - (cfg.frame_height - cfg.anchor[0] + 4) * cfg.meters_per_pixel)
    s_hi = min(float(road.stations[-1]), s_ego + (cfg.anchor[0] + 4) * cfg.meters_per_pixel)

    # Edge lines: short overlapping boxes along both road borders.
    step = 2.0
    stations = np.arange(s_lo, s_hi, step)
    if stations.size:
        centers = _pose_at_stations(road, stations + step / 2)
        offset = cfg.lane_width - _EDGE_INSET
        for side in (+1.0, -1.0):
            normals = np.stack([-np.sin(centers[:, 2]), np.cos(centers[:, 2])], axis=1)
            pts = centers[:, :2] + side * offset * normals
            pts_ego = world_to_ego(pts, pose)
            h_ego = centers[:, 2] - pose[2]
            for (ex, ey), hh in zip(pts_ego, h_ego):
                _paint_box(img, px_x, px_y, (ex, ey, step + 0.3, _EDGE_WIDTH, hh), _EDGE)

    # Center dashes, anchored to stations so they flow past the ego.
    first = np.floor(s_lo / _DASH_PERIOD) * _DASH_PERIOD
    for s0 in np.arange(first, s_hi + _DASH_PERIOD, _DASH_PERIOD):
        sc = s0 + _DASH_LENGTH / 2
        if sc < 0 or sc > road.stations[-1]:
            continue
        c = _pose_at_stations(road, np.array([sc]))[0]
        p_ego = world_to_ego(c[None, :2], pose)[0]
        _paint_box(img, px_x, px_y, (p_ego[0], p_ego[1], _DASH_LENGTH, _DASH_WIDTH, c[2] - pose[2]), _DASH)

    # Obstacles, then the ego box on top at its fixed anchor.
    for i, box in enumerate(np.asarray(state.obstacles, dtype=np.float64)):
        center_ego = world_to_ego(box[None, :2], pose)[0]
        color = _OBSTACLE_PALETTE[i % len(_OBSTACLE_PALETTE)]
        _paint_box(img, px_x, px_y, (center_ego[0], center_ego[1], box[2], box[3], box[4] - pose[2]), color)
    _paint_box(img, px_x, px_y, (0.0, 0.0, cfg.ego_length, cfg.ego_width, 0.0), _EGO)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# episode generation
# ---------------------------------------------------------------------------

def future_waypoints(ego_poses: np.ndarray, t: int, m: int, dt: float, frame_rate: float) -> Trajectory:
    """Future poses resampled every ``dt`` seconds, in the ego frame at ``t``.

    Sample times that fall between frames are linearly interpolated; when
    ``dt * frame_rate`` is an integer the stored poses are used exactly.
    """
    poses = np.asarray(ego_poses, dtype=np.float64)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    last = t + m * dt * frame_rate
    if t < 0 or last > poses.shape[0] - 1 + 1e-9:
        raise IndexError(
            f"poses cover frames [0, {poses.shape[0] - 1}], need up to {last:.3f} from t={t}"
        )
    steps = t + np.arange(1, m + 1) * dt * frame_rate
    i0 = np.minimum(np.floor(steps + 1e-9).astype(int), poses.shape[0] - 1)
    i1 = np.minimum(i0 + 1, poses.shape[0] - 1)
    frac = np.clip(steps - i0, 0.0, 1.0)
    xy = poses[i0, :2] * (1 - frac)[:, None] + poses[i1, :2] * frac[:, None]
    rel = world_to_ego(xy, poses[t])
    return Trajectory(rel, dt)


def _obstacle_tracks(scenario, rng, road, cfg, ego_stations, dt_f, n_steps, lead=None, crosser=None):
    """Per-frame obstacle boxes (n_steps, n_obs, 5) in the world frame."""
    boxes = []
    # Moving actors first.
    if lead is not None:
        lead_s, _ = lead
        centers = _pose_at_stations(road, lead_s)
        dims = (4.3, 1.9)
        track = np.stack(
            [centers[:, 0], centers[:, 1], np.full(n_steps, dims[0]), np.full(n_steps, dims[1]), centers[:, 2]],
            axis=1,
        )
        boxes.append(track)
    if crosser is not None:
        s_x, t_cross, v_cross, sign = crosser
        c = _pose_at_stations(road, np.array([s_x]))[0]
        normal = np.array([-np.sin(c[2]), np.cos(c[2])])
        heading = np.arctan2(-sign * normal[1], -sign * normal[0])
        times = np.arange(n_steps) * dt_f
        offsets = sign * (t_cross - times) * v_cross
        centers = c[:2][None, :] + offsets[:, None] * normal[None, :]
        track = np.stack(
            [centers[:, 0], centers[:, 1], np.full(n_steps, 4.0), np.full(n_steps, 1.8), np.full(n_steps, heading)],
            axis=1,
        )
        boxes.append(track)

    # Parked vehicles along the roadside fill the remaining budget.
    n_parked = max(0, cfg.obstacle_count - len(boxes))
    if n_parked:
        lo_s = 18.0
        hi_s = min(float(road.stations[-1]) - 10.0, float(ego_stations[-1]) + 20.0)
        stations = np.sort(rng.uniform(lo_s, hi_s, size=n_parked))
        # Enforce spacing and keep the crossing corridor clear.
        for i in range(1, n_parked):
            stations[i] = max(stations[i], stations[i - 1] + 8.0)
        for i in range(n_parked):
            if crosser is not None and abs(stations[i] - crosser[0]) < 7.0:
                stations[i] += 9.0
        centers = _pose_at_stations(road, stations)
        sides = np.where(rng.random(n_parked) < 0.5, 1.0, -1.0)
        lateral = rng.uniform(2.4, 3.05, size=n_parked) * sides
        normals = np.stack([-np.sin(centers[:, 2]), np.cos(centers[:, 2])], axis=1)
        pos = centers[:, :2] + lateral[:, None] * normals
        lengths = rng.uniform(3.8, 4.6, size=n_parked)
        widths = rng.uniform(1.7, 2.0, size=n_parked)
        static = np.stack([pos[:, 0], pos[:, 1], lengths, widths, centers[:, 2]], axis=1)
        boxes.append(np.broadcast_to(static[None, :, :], (n_steps, n_parked, 5)).copy())

    if not boxes:
        return np.zeros((n_steps, 0, 5), dtype=np.float64)
    boxes = [b if b.ndim == 3 else b[:, None, :] for b in boxes]
    return np.concatenate(boxes, axis=1)


def generate_episode(config: WorldConfig, seed: int) -> Episode:
    """Build one episode; pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng((int(config.seed), int(seed)))

    scenario = rng.choice(SCENARIOS, p=np.asarray(config.scenario_mix, dtype=np.float64))
    scenario = str(scenario)
    cruise = float(rng.uniform(*config.speed_range))
    n_steps = config.sim_frames
    dt_f = 1.0 / config.frame_rate
    total_len = cruise * n_steps * dt_f + 80.0

    path = _build_path(scenario, rng, total_len, cruise)
    # Random world placement; the ego-centric render is invariant to it but
    # world-frame oracles should not live at the origin forever.
    theta0 = float(rng.uniform(-np.pi, np.pi))
    offset = rng.uniform(-200.0, 200.0, size=2)
    path_world = path @ rotation(theta0).T + offset
    stations, headings = _polyline_stations(path_world)
    road = RoadGeometry(path_world, headings, stations, config.lane_width)

    lead = None
    crosser = None
    if scenario == "following":
        v_lead = cruise * float(rng.uniform(0.55, 0.8))
        gap0 = float(rng.uniform(14.0, 20.0))
        lead_s = 12.0 + gap0 + v_lead * np.arange(n_steps) * dt_f
        lead = (lead_s, v_lead)
    elif scenario == "crossing":
        t_reach = float(rng.uniform(3.0, 6.0))
        s_x = 12.0 + cruise * t_reach
        gap = float(rng.uniform(2.5, 3.5)) * (1.0 if rng.random() < 0.5 else -1.0)
        v_cross = float(rng.uniform(3.0, 5.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        crosser = (s_x, t_reach + gap, v_cross, sign)

    ego_s, ego_v = _speed_profile(scenario, rng, stations, headings, cruise, n_steps, dt_f, lead=lead)
    poses64 = _pose_at_stations(road, ego_s)
    obstacles64 = _obstacle_tracks(scenario, rng, road, config, ego_s, dt_f, n_steps, lead=lead, crosser=crosser)

    ego_poses = poses64.astype(np.float32)
    obstacles = obstacles64.astype(np.float32)

    n = config.horizon_frames
    frames = np.empty((n, config.frame_height, config.frame_width, 3), dtype=np.uint8)
    for t in range(n):
        state = WorldState(poses64[t], obstacles64[t], road, config)
        frames[t] = render_frame(state)

    # Waypoint supervision recomputed from the float32 poses so that
    # recomputation in tests is bit-identical.
    m = config.waypoint_count
    waypoints = np.empty((n, m, 2), dtype=np.float32)
    for t in range(n):
        traj = future_waypoints(ego_poses, t, m, config.waypoint_dt, config.frame_rate)
        waypoints[t] = traj.waypoints.astype(np.float32)

    # Per-frame kinematic status from the integrated profile.
    speed = ego_v
    accel = np.gradient(speed, dt_f)
    yaw = np.unwrap(poses64[:, 2])
    yaw_rate = np.gradient(yaw, dt_f)
    status = np.stack([speed[:n], accel[:n], yaw_rate[:n]], axis=1).astype(np.float32)

    # Commands from mean upcoming curvature over a ~2 s lookahead.
    commands = np.zeros(n, dtype=np.int64)
    dh = np.diff(np.unwrap(headings))
    ds = np.maximum(np.diff(stations), 1e-9)
    curvature = np.concatenate([dh / ds, [0.0]])
    for t in range(n):
        s0, s1 = ego_s[t], ego_s[t] + max(ego_v[t], 1.0) * 2.0
        sel = (stations >= s0) & (stations <= s1)
        kappa = float(curvature[sel].mean()) if sel.any() else 0.0
        if kappa > 0.02:
            commands[t] = Command.LEFT
        elif kappa < -0.02:
            commands[t] = Command.RIGHT

    ring = np.asarray(road.polygon().exterior.coords, dtype=np.float32)

    return Episode(
        config=config,
        scenario=scenario,
        frames=frames,
        ego_poses=ego_poses,
        waypoints_gt=waypoints,
        commands=commands,
        ego_status=status,
        obstacles=obstacles,
        road_polygon=ring,
        road=road,
    )


def collision_oracle(trajectory: Trajectory, episode: Episode, t: int) -> np.ndarray:
    """Per-waypoint collision flags for an ego-frame trajectory at frame ``t``.

    The ego footprint is placed at each waypoint (heading from the local
    trajectory direction) and tested exactly against the obstacle boxes at
    the corresponding future time; obstacle states between frames are
    linearly interpolated.
    """
    cfg = episode.config
    if t < 0 or t >= episode.n_frames:
        raise IndexError(f"t={t} outside rendered frames [0, {episode.n_frames - 1}]")
    pose = episode.ego_poses[t].astype(np.float64)
    wps = trajectory.waypoints
    world = ego_to_world(wps, pose)
    prev = np.concatenate([[[0.0, 0.0]], wps[:-1]], axis=0)
    deltas = wps - prev
    headings_rel = np.where(
        np.hypot(deltas[:, 0], deltas[:, 1]) > 1e-6,
        np.arctan2(deltas[:, 1], deltas[:, 0]),
        0.0,
    )
    headings = headings_rel + pose[2]

    n_sim = episode.obstacles.shape[0]
    out = np.zeros(trajectory.m, dtype=bool)
    for k in range(trajectory.m):
        step = t + (k + 1) * trajectory.dt * cfg.frame_rate
        if step > n_sim - 1 + 1e-9:
            raise IndexError(
                f"waypoint {k + 1} at frame offset {step:.2f} exceeds simulated horizon {n_sim - 1}"
            )
        i0 = min(int(np.floor(step + 1e-9)), n_sim - 1)
        i1 = min(i0 + 1, n_sim - 1)
        frac = float(np.clip(step - i0, 0.0, 1.0))
        boxes = episode.obstacles[i0].astype(np.float64) * (1 - frac) + episode.obstacles[i1].astype(np.float64) * frac
        ego_box = (world[k, 0], world[k, 1], cfg.ego_length, cfg.ego_width, headings[k])
        for box in boxes:
            if boxes_intersect(ego_box, box):
                out[k] = True
                break
    return out


# ---------------------------------------------------------------------------
# dataset serialization
# ---------------------------------------------------------------------------

def _pack_array(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    out = struct.pack("<H", len(name)) + name.encode("ascii")
    out += struct.pack("<B", data.ndim)
    out += struct.pack(f"<{data.ndim}I", *data.shape)
    return out + data.tobytes()


def _unpack_array(buf: bytes, off: int):
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off: off + name_len].decode("ascii")
    off += name_len
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    off += 4 * count
    return name, arr.copy(), off


def episode_to_bytes(episode: Episode) -> bytes:
    """Serialize one episode: 64-byte header, raw frames, named f32 arrays."""
    n, h, w, _ = episode.frames.shape
    arrays = [
        ("ego_poses", episode.ego_poses),
        ("waypoints_gt", episode.waypoints_gt),
        ("ego_status", episode.ego_status),
        ("commands", episode.commands.astype(np.float32)),
        ("obstacles", episode.obstacles),
        ("road_polygon", episode.road_polygon),
    ]
    header = struct.pack(
        "<6sHIIIIB", _EPISODE_MAGIC, _EPISODE_VERSION, h, w, n, len(arrays), 1
    )
    header += b"\x00" * (64 - len(header))
    body = episode.frames.tobytes()
    for name, arr in arrays:
        body += _pack_array(name, arr)
    return header + body


def episode_from_bytes(buf: bytes, config: WorldConfig, episode_id: str = "?") -> Episode:
    if len(buf) < 64 or buf[:6] != _EPISODE_MAGIC:
        raise FormatError(f"episode {episode_id}: bad magic, not a {_EPISODE_MAGIC.decode()} blob")
    magic, version, h, w, n, n_arrays, dtype_code = struct.unpack_from("<6sHIIIIB", buf, 0)
    if version != _EPISODE_VERSION:
        raise FormatError(f"episode {episode_id}: unsupported version {version}")
    if dtype_code != 1:
        raise FormatError(f"episode {episode_id}: unknown frame dtype code {dtype_code}")
    off = 64
    frame_bytes = n * h * w * 3
    if len(buf) < off + frame_bytes:
        raise FormatError(f"episode {episode_id}: truncated frame payload")
    frames = np.frombuffer(buf, dtype=np.uint8, count=frame_bytes, offset=off).reshape(n, h, w, 3).copy()
    off += frame_bytes
    arrays = {}
    try:
        for _ in range(n_arrays):
            name, arr, off = _unpack_array(buf, off)
            arrays[name] = arr
    except (struct.error, ValueError) as exc:
        raise FormatError(f"episode {episode_id}: truncated array section ({exc})") from exc
    required = {"ego_poses", "waypoints_gt", "ego_status", "commands", "obstacles", "road_polygon"}
    missing = required - arrays.keys()
    if missing:
        raise FormatError(f"episode {episode_id}: missing arrays {sorted(missing)}")
    return Episode(
        config=config,
        scenario="?",
        frames=frames,
        ego_poses=arrays["ego_poses"],
        waypoints_gt=arrays["waypoints_gt"],
        commands=arrays["commands"].astype(np.int64),
        ego_status=arrays["ego_status"],
        obstacles=arrays["obstacles"],
        road_polygon=arrays["road_polygon"],
    )


def write_dataset(episodes: list[Episode], path, config: WorldConfig | None = None) -> None:
    """Write episodes plus a manifest; the round trip is bit-exact."""
    from pathlib import Path

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    config = config or episodes[0].config
    entries = []
    for i, ep in enumerate(episodes):
        blob = episode_to_bytes(ep)
        episode_id = f"ep{i:05d}"
        (root / f"{episode_id}.bin").write_bytes(blob)
        entries.append(
            {
                "id": episode_id,
                "scenario": ep.scenario,
                "frames": int(ep.n_frames),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "config": config.to_dict(),
        "episode_count": len(entries),
        "episodes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> tuple[list[Episode], WorldConfig]:
    """Load a dataset directory, verifying the manifest and checksums."""
    from pathlib import Path

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != _MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('format_version')}")
    entries = manifest["episodes"]
    if len(entries) != manifest["episode_count"]:
        raise FormatError(
            f"manifest episode count {manifest['episode_count']} != listed {len(entries)}"
        )
    config = WorldConfig.from_dict(manifest["config"])
    episodes = []
    for entry in entries:
        blob_path = root / f"{entry['id']}.bin"
        if not blob_path.exists():
            raise FormatError(f"missing episode blob for {entry['id']}")
        blob = blob_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise FormatError(f"checksum mismatch for episode {entry['id']}")
        ep = episode_from_bytes(blob, config, episode_id=entry["id"])
        if ep.n_frames != entry["frames"]:
            raise FormatError(
                f"episode {entry['id']}: manifest says {entry['frames']} frames, blob has {ep.n_frames}"
            )
        ep.scenario = entry.get("scenario", "?")
        episodes.append(ep)
    return episodes, config


def dataset_checksum(path) -> str:
    """Stable digest over the manifest's per-episode checksums."""
    from pathlib import Path

    manifest = json.loads((Path(path) / "manifest.json").read_text())
    h = hashlib.sha256()
    for entry in manifest["episodes"]:
        h.update(entry["sha256"].encode())
    return h.hexdigest()


def downsample(frames: np.ndarray) -> np.ndarray:
    """2x2 box-average downsample, uint8 in and out (deterministic)."""
    f = frames.astype(np.float64)
    if f.ndim == 3:
        f = f[None]
        squeeze = True
    else:
        squeeze = False
    n, h, w, c = f.shape
    f = f.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    out = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return out[0] if squeeze else out
