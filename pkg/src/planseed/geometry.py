"""2D obstacle worlds: analytic signed distances, sampled ESDF grids, and depth-scan rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

# Observation defaults: a 256-ray scan stands in for a 256x256 depth image.
DEFAULT_N_RAYS = 256
DEFAULT_FOV = np.pi / 2


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


@dataclass(frozen=True)
class Circle:
    center: Tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"circle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float]
    hi: Tuple[float, float]

    def __post_init__(self):
        if not (self.lo[0] < self.hi[0] and self.lo[1] < self.hi[1]):
            raise ValueError(f"box min must be < max componentwise: {self.lo} vs {self.hi}")


Obstacle = Union[Circle, Box]


@dataclass(frozen=True)
class Rect:
    lo: Tuple[float, float]
    hi: Tuple[float, float]

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(*self.extent))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


WORKSPACE = Rect((-1.0, -1.0), (1.0, 1.0))


class World:
    """Immutable obstacle world over an axis-aligned workspace rectangle.

    Queries are pure; the obstacle arrays computed at construction are shared
    read-only across threads.
    """

    def __init__(self, obstacles: Sequence[Obstacle], bounds: Rect = WORKSPACE):
        self.obstacles: Tuple[Obstacle, ...] = tuple(obstacles)
        self.bounds = bounds
        circles = [o for o in self.obstacles if isinstance(o, Circle)]
        boxes = [o for o in self.obstacles if isinstance(o, Box)]
        # Flat arrays for the numba collision kernels.
        self.circle_arr = (
            np.array([[c.center[0], c.center[1], c.radius] for c in circles], dtype=np.float64)
            if circles else np.zeros((0, 3))
        )
        self.box_arr = (
            np.array([[b.lo[0], b.lo[1], b.hi[0], b.hi[1]] for b in boxes], dtype=np.float64)
            if boxes else np.zeros((0, 4))
        )
        for o in self.obstacles:
            lo, hi = _obstacle_bbox(o)
            if not (bounds.contains(lo) and bounds.contains(hi)):
                raise ValueError(f"obstacle {o} outside workspace bounds {bounds}")

    @property
    def sdf_cap(self) -> float:
        """Distance reported in an empty world; keeps optimizer gradients bounded."""
        return self.bounds.diagonal

    def obstacle_bbox(self) -> Rect:
        """Tight bounding box of all obstacles."""
        if not self.obstacles:
            raise ValueError("empty world has no obstacle bounding box")
        los, his = zip(*(_obstacle_bbox(o) for o in self.obstacles))
        lo = np.min(np.array(los), axis=0)
        hi = np.max(np.array(his), axis=0)
        return Rect((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))

    @property
    def scene_center(self) -> np.ndarray:
        return self.obstacle_bbox().center

    @property
    def scene_radius(self) -> float:
        """Half-diagonal of the tight obstacle bounding box."""
        return 0.5 * self.obstacle_bbox().diagonal


def _obstacle_bbox(o: Obstacle) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(o, Circle):
        c = np.array(o.center)
        return c - o.radius, c + o.radius
    return np.array(o.lo), np.array(o.hi)


# ----------------------------------------------------------------------------
# Signed distance queries
# ----------------------------------------------------------------------------

def sdf_points(world: World, pts: np.ndarray) -> np.ndarray:
    """Exact signed distance from each point (N,2) to the nearest obstacle surface.

    Negative inside an obstacle; capped at the workspace diagonal for empty worlds.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    d = np.full(pts.shape[0], world.sdf_cap)
    if world.circle_arr.shape[0]:
        c = world.circle_arr
        dc = np.hypot(pts[:, None, 0] - c[None, :, 0], pts[:, None, 1] - c[None, :, 1]) - c[None, :, 2]
        d = np.minimum(d, dc.min(axis=1))
    if world.box_arr.shape[0]:
        b = world.box_arr
        cx = 0.5 * (b[:, 0] + b[:, 2])
        cy = 0.5 * (b[:, 1] + b[:, 3])
        hx = 0.5 * (b[:, 2] - b[:, 0])
        hy = 0.5 * (b[:, 3] - b[:, 1])
        qx = np.abs(pts[:, None, 0] - cx[None, :]) - hx[None, :]
        qy = np.abs(pts[:, None, 1] - cy[None, :]) - hy[None, :]
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        d = np.minimum(d, (outside + inside).min(axis=1))
    return d


def sdf_point(world: World, p) -> float:
    return float(sdf_points(world, np.asarray(p, dtype=np.float64)[None, :])[0])


def point_inside(world: World, p) -> bool:
    """Membership oracle independent of the distance formulas."""
    x, y = float(p[0]), float(p[1])
    for o in world.obstacles:
        if isinstance(o, Circle):
            if (x - o.center[0]) ** 2 + (y - o.center[1]) ** 2 < o.radius ** 2:
                return True
        else:
            if o.lo[0] < x < o.hi[0] and o.lo[1] < y < o.hi[1]:
                return True
    return False


# ----------------------------------------------------------------------------
# ESDF grid
# ----------------------------------------------------------------------------

@dataclass
class SdfGrid:
    """Sampled signed-distance field. Node (i, j) sits at origin + (i*h, j*h).

    Immutable after construction; values are exact analytic distances at nodes,
    so |value - sdf_point| = 0 <= h*sqrt(2) everywhere.
    """

    origin: np.ndarray
    h: float
    nx: int
    ny: int
    values: np.ndarray

    @property
    def extent_hi(self) -> np.ndarray:
        return self.origin + self.h * np.array([self.nx - 1, self.ny - 1])


def build_esdf(world: World, cell_size: float) -> SdfGrid:
    """Sample the analytic SDF on a regular grid covering the workspace bounds."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    ext = world.bounds.extent
    if cell_size > min(ext):
        raise ValueError(f"cell_size {cell_size} larger than workspace extent {ext}")
    nx = int(np.ceil(ext[0] / cell_size)) + 1
    ny = int(np.ceil(ext[1] / cell_size)) + 1
    origin = np.array(world.bounds.lo, dtype=np.float64)
    xs = origin[0] + cell_size * np.arange(nx)
    ys = origin[1] + cell_size * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    values = sdf_points(world, pts).reshape(nx, ny)
    return SdfGrid(origin=origin, h=float(cell_size), nx=nx, ny=ny, values=values)


def sample_esdf(grid: SdfGrid, p) -> Tuple[float, np.ndarray]:
    """Bilinearly interpolated distance and its exact in-cell gradient at p.

    Points outside the grid extent are clamped to it; at the extent boundary the
    edge cell's patch applies, which amounts to a one-sided derivative.
    """
    d, g, _ = sample_esdf_many(grid, np.asarray(p, dtype=np.float64)[None, :])
    return float(d[0]), g[0]


def sample_esdf_many(grid: SdfGrid, pts: np.ndarray):
    """Vectorized sample_esdf; returns (dists (N,), grads (N,2), clamped (N,) bool)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    u = (pts - grid.origin) / grid.h
    clamped = (u[:, 0] < 0) | (u[:, 0] > grid.nx - 1) | (u[:, 1] < 0) | (u[:, 1] > grid.ny - 1)
    i = np.clip(np.floor(u[:, 0]).astype(np.int64), 0, grid.nx - 2)
    j = np.clip(np.floor(u[:, 1]).astype(np.int64), 0, grid.ny - 2)
    tx = np.clip(u[:, 0] - i, 0.0, 1.0)
    ty = np.clip(u[:, 1] - j, 0.0, 1.0)
    v = grid.values
    v00 = v[i, j]
    v10 = v[i + 1, j]
    v01 = v[i, j + 1]
    v11 = v[i + 1, j + 1]
    d = v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty) + v01 * (1 - tx) * ty + v11 * tx * ty
    gx = ((v10 - v00) * (1 - ty) + (v11 - v01) * ty) / grid.h
    gy = ((v01 - v00) * (1 - tx) + (v11 - v10) * tx) / grid.h
    return d, np.column_stack([gx, gy]), clamped


# ----------------------------------------------------------------------------
# Depth sensing
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorPose:
    position: Tuple[float, float]
    heading: float
    fov: float = DEFAULT_FOV
    n_rays: int = DEFAULT_N_RAYS
    max_range: float = 2.0 * WORKSPACE.diagonal

    def __post_init__(self):
        if not (0 < self.fov <= np.pi):
            raise ValueError(f"fov must be in (0, pi], got {self.fov}")
        if self.n_rays < 2:
            raise ValueError("need at least 2 rays")

    def ray_angles(self) -> np.ndarray:
        return self.heading + np.linspace(-self.fov / 2, self.fov / 2, self.n_rays)


@dataclass(frozen=True)
class DepthScan:
    pose: SensorPose
    depths: np.ndarray  # (n_rays,), max_range where nothing was hit

    def hit_points(self) -> np.ndarray:
        """World-frame intersection points of rays that hit something, (M,2)."""
        hit = self.depths < self.pose.max_range - 1e-9
        ang = self.pose.ray_angles()[hit]
        d = self.depths[hit]
        p = np.asarray(self.pose.position)
        return p + np.column_stack([d * np.cos(ang), d * np.sin(ang)])


def _ray_hits(world: World, origin: np.ndarray, angles: np.ndarray, max_range: float) -> np.ndarray:
    """First positive intersection distance per ray; max_range where none."""
    n = angles.shape[0]
    dx = np.cos(angles)
    dy = np.sin(angles)
    t_best = np.full(n, max_range)
    if world.circle_arr.shape[0]:
        c = world.circle_arr
        mx = c[None, :, 0] - origin[0]
        my = c[None, :, 1] - origin[1]
        # |o + t d - c|^2 = r^2 with |d| = 1
        b = dx[:, None] * mx + dy[:, None] * my
        cc = mx * mx + my * my - c[None, :, 2] ** 2
        disc = b * b - cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = b - sq
        t2 = b + sq
        t1 = np.where(ok & (t1 > 1e-12), t1, np.inf)
        t2 = np.where(ok & (t2 > 1e-12), t2, np.inf)
        t_best = np.minimum(t_best, np.minimum(t1, t2).min(axis=1))
    if world.box_arr.shape[0]:
        b = world.box_arr
        with np.errstate(divide="ignore", invalid="ignore"):
            tx1 = (b[None, :, 0] - origin[0]) / dx[:, None]
            tx2 = (b[None, :, 2] - origin[0]) / dx[:, None]
            ty1 = (b[None, :, 1] - origin[1]) / dy[:, None]
            ty2 = (b[None, :, 3] - origin[1]) / dy[:, None]
        # Degenerate directions: the ray is parallel to a slab; inside -> (-inf, inf)
        par_x = np.abs(dx)[:, None] < 1e-300
        in_x = (origin[0] >= b[None, :, 0]) & (origin[0] <= b[None, :, 2])
        tx_lo = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(tx1, tx2))
        tx_hi = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(tx1, tx2))
        par_y = np.abs(dy)[:, None] < 1e-300
        in_y = (origin[1] >= b[None, :, 1]) & (origin[1] <= b[None, :, 3])
        ty_lo = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(ty1, ty2))
        ty_hi = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(ty1, ty2))
        t_near = np.maximum(tx_lo, ty_lo)
        t_far = np.minimum(tx_hi, ty_hi)
        hit = t_near <= t_far
        t = np.where(t_near > 1e-12, t_near, t_far)  # origin inside -> exit point
        t = np.where(hit & (t > 1e-12), t, np.inf)
        t_best = np.minimum(t_best, t.min(axis=1))
    return np.minimum(t_best, max_range)


def render_depth_scan(world: World, pose: SensorPose) -> DepthScan:
    """Cast the sensor's fan of rays; depth = first surface hit, max_range sentinel otherwise."""
    origin = np.asarray(pose.position, dtype=np.float64)
    depths = _ray_hits(world, origin, pose.ray_angles(), pose.max_range)
    return DepthScan(pose=pose, depths=depths)


def goal_visible(world: World, pose: SensorPose, goal_pos) -> bool:
    """True iff goal_pos lies inside the fov wedge and no surface occludes it."""
    origin = np.asarray(pose.position, dtype=np.float64)
    rel = np.asarray(goal_pos, dtype=np.float64) - origin
    dist = float(np.hypot(rel[0], rel[1]))
    if dist < 1e-12:
        return True
    ang = np.arctan2(rel[1], rel[0])
    if abs(float(wrap_angle(ang - pose.heading))) > pose.fov / 2 + 1e-12:
        return False
    t = float(_ray_hits(world, origin, np.array([ang]), np.inf)[0])
    return t >= dist - 1e-9


def sample_sensor_poses(
    world: World,
    rng: np.random.Generator,
    count: int,
    angle_range: Tuple[float, float] = (-np.pi / 4, np.pi / 4),
    radius_range: Tuple[float, float] = (0.7, 1.1),
    angle_noise: float = np.pi / 8,
    fov: float = DEFAULT_FOV,
    n_rays: int = DEFAULT_N_RAYS,
    max_range: float | None = None,
) -> List[SensorPose]:
    """Sensor poses on a circle around the scene center, heading inward.

    Angles come from an even grid over angle_range plus uniform noise in
    [-angle_noise, angle_noise]; radii are uniform in radius_range * scene radius.
    """
    if not world.obstacles:
        raise ValueError("cannot place sensors around an empty world")
    center = world.scene_center
    r_scene = world.scene_radius
    if max_range is None:
        max_range = 2.0 * world.bounds.diagonal
    grid = np.linspace(angle_range[0], angle_range[1], count)
    poses = []
    for a0 in grid:
        a = a0 + rng.uniform(-angle_noise, angle_noise)
        r = rng.uniform(radius_range[0] * r_scene, radius_range[1] * r_scene)
        pos = center + r * np.array([np.cos(a), np.sin(a)])
        heading = float(np.arctan2(center[1] - pos[1], center[0] - pos[0]))
        poses.append(SensorPose(
            position=(float(pos[0]), float(pos[1])), heading=heading,
            fov=fov, n_rays=n_rays, max_range=float(max_range),
        ))
    return poses


# ----------------------------------------------------------------------------
# World serialization (one JSON document per world)
# ----------------------------------------------------------------------------

def world_to_dict(world: World) -> dict:
    obs = []
    for o in world.obstacles:
        if isinstance(o, Circle):
            obs.append({"kind": "circle", "c": [o.center[0], o.center[1]], "r": o.radius})
        else:
            obs.append({"kind": "box", "min": list(o.lo), "max": list(o.hi)})
    return {"obstacles": obs, "bounds": {"min": list(world.bounds.lo), "max": list(world.bounds.hi)}}


def world_from_dict(d: dict) -> World:
    obstacles: List[Obstacle] = []
    for o in d["obstacles"]:
        if o["kind"] == "circle":
            obstacles.append(Circle(center=(o["c"][0], o["c"][1]), radius=o["r"]))
        elif o["kind"] == "box":
            obstacles.append(Box(lo=tuple(o["min"]), hi=tuple(o["max"])))
        else:
            raise ValueError(f"unknown obstacle kind {o['kind']!r}")
    b = d["bounds"]
    return World(obstacles, bounds=Rect(tuple(b["min"]), tuple(b["max"])))


def world_to_json(world: World) -> str:
    return json.dumps(world_to_dict(world), sort_keys=True, separators=(",", ":"))


def world_from_json(s: str) -> World:
    return world_from_dict(json.loads(s))
