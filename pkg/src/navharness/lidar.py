"""Simulated LiDAR scans and the robot-centric 2.5D height map built from them."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimsMismatch, PoseOutsideScene
from .scene import Scene


@dataclass(frozen=True)
class LidarConfig:
    """Ray layout of the simulated sensor.

    ``vertical_range`` holds depression angles in degrees (0 is horizontal,
    90 points straight down); channels are spread evenly over it, endpoints
    included.
    """

    channels: int = 32
    vertical_range: tuple[float, float] = (0.0, 90.0)
    horizontal_range: tuple[float, float] = (-180.0, 180.0)
    horizontal_resolution: float = 4.0
    max_range: float = 10.0
    mount_height: float = 0.30
    range_noise: float = 0.0

    def azimuths_deg(self) -> np.ndarray:
        lo, hi = self.horizontal_range
        n = int(round((hi - lo) / self.horizontal_resolution))
        if hi - lo < 360.0:
            n += 1
        return lo + self.horizontal_resolution * np.arange(n)

    def elevations_deg(self) -> np.ndarray:
        return np.linspace(self.vertical_range[0], self.vertical_range[1], self.channels)

    @property
    def n_rays(self) -> int:
        return self.channels * len(self.azimuths_deg())


@dataclass(frozen=True)
class HeightMapConfig:
    voxel_size: float = 0.06
    x_range: tuple[float, float] = (-0.8, 0.2)
    y_range: tuple[float, float] = (-0.8, 0.8)
    z_clip: tuple[float, float] = (0.05, 0.5)
    temporal_window: int = 5
    # returns below z_clip[0] are ground, not obstacle evidence
    drop_ground: bool = True
    # yaw of the map axes in the robot frame; pi puts the long X span ahead of the robot
    frame_yaw: float = math.pi

    @property
    def dims(self) -> tuple[int, int]:
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.voxel_size))
        ny = int(round((self.y_range[1] - self.y_range[0]) / self.voxel_size))
        return nx, ny

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Map-frame centers as two (nx, ny) arrays."""
        nx, ny = self.dims
        xs = self.x_range[0] + (np.arange(nx) + 0.5) * self.voxel_size
        ys = self.y_range[0] + (np.arange(ny) + 0.5) * self.voxel_size
        return np.meshgrid(xs, ys, indexing="ij")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3), robot frame, z above the ground under the robot
    stamp: float = 0.0
    n_rays: int = 0
    sensor_height: float = 0.0


@dataclass(frozen=True, eq=False)
class HeightMap:
    values: np.ndarray  # (nx, ny)
    valid: np.ndarray
    config: HeightMapConfig = field(default_factory=HeightMapConfig)

    @property
    def dims(self) -> tuple[int, int]:
        return self.values.shape

    def robot_frame_centers(self) -> tuple[np.ndarray, np.ndarray]:
        mx, my = self.config.cell_centers()
        c, s = math.cos(self.config.frame_yaw), math.sin(self.config.frame_yaw)
        return c * mx - s * my, s * mx + c * my

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "dims": list(self.dims),
            "voxel_size": cfg.voxel_size,
            "x_range": list(cfg.x_range),
            "y_range": list(cfg.y_range),
            "z_clip": list(cfg.z_clip),
            "frame_yaw": cfg.frame_yaw,
            "values": self.values.round(6).tolist(),
            "valid": self.valid.astype(int).tolist(),
        }

    @classmethod
    def empty(cls, config: HeightMapConfig = HeightMapConfig()) -> HeightMap:
        dims = config.dims
        return cls(np.full(dims, config.z_clip[0]), np.zeros(dims, dtype=bool), config)


def simulate_scan(
    scene: Scene,
    pose,
    cfg: LidarConfig = LidarConfig(),
    seed: int | None = None,
    range_limit: float | None = None,
) -> PointCloud:
    """Cast one ray per (channel, azimuth) pair from ``pose`` through the grid.

    Occupied cells are full-height columns; free cells are flat at their
    ground height. ``range_limit`` truncates rays below ``max_range`` (hits
    beyond it are dropped exactly as max-range misses are).
    """
    x0, y0, yaw = float(pose[0]), float(pose[1]), float(pose[2])
    if not scene.contains(x0, y0):
        raise PoseOutsideScene(f"pose ({x0:.2f}, {y0:.2f}) outside scene")
    cs = scene.cell_size
    h, w = scene.occupied.shape
    ci0, cj0 = scene.cell_of(x0, y0)
    g0 = float(scene.ground_height[cj0, ci0])
    z0 = g0 + cfg.mount_height
    r_max = cfg.max_range if range_limit is None else min(cfg.max_range, range_limit)

    el = np.radians(cfg.elevations_deg())
    az = yaw + np.radians(cfg.azimuths_deg())
    E, A = np.meshgrid(el, az, indexing="ij")
    E, A = E.ravel(), A.ravel()
    n = E.size
    horiz = np.cos(E)
    dx = horiz * np.cos(A)
    dy = horiz * np.sin(A)
    dz = -np.sin(E)
    dx[np.abs(dx) < 1e-12] = 0.0
    dy[np.abs(dy) < 1e-12] = 0.0

    with np.errstate(divide="ignore", invalid="ignore"):
        step_x = np.sign(dx).astype(int)
        step_y = np.sign(dy).astype(int)
        tdx = np.where(dx != 0, cs / np.abs(dx), np.inf)
        tdy = np.where(dy != 0, cs / np.abs(dy), np.inf)
        tmx = np.where(dx > 0, ((ci0 + 1) * cs - x0) / dx, np.where(dx < 0, (ci0 * cs - x0) / dx, np.inf))
        tmy = np.where(dy > 0, ((cj0 + 1) * cs - y0) / dy, np.where(dy < 0, (cj0 * cs - y0) / dy, np.inf))

    ci = np.full(n, ci0)
    cj = np.full(n, cj0)
    t_enter = np.zeros(n)
    hit_t = np.full(n, np.nan)
    active = np.arange(n)
    occ = scene.occupied
    ground = scene.ground_height
    while active.size:
        i, j = ci[active], cj[active]
        te = t_enter[active]
        texit = np.minimum(np.minimum(tmx[active], tmy[active]), r_max)
        oob = (i < 0) | (i >= w) | (j < 0) | (j >= h)
        ii, jj = np.clip(i, 0, w - 1), np.clip(j, 0, h - 1)
        g = ground[jj, ii]
        ddz = dz[active]
        face = oob | occ[jj, ii] | (z0 + ddz * te < g)
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(ddz < 0, (g - z0) / ddz, np.inf)
        on_ground = ~face & (tg <= texit)
        hit_t[active[face]] = te[face]
        hit_t[active[on_ground]] = tg[on_ground]
        done = face | on_ground | (texit >= r_max)
        a = active[~done]
        go_x = tmx[a] <= tmy[a]
        ax, ay = a[go_x], a[~go_x]
        t_enter[ax] = tmx[ax]
        ci[ax] += step_x[ax]
        tmx[ax] += tdx[ax]
        t_enter[ay] = tmy[ay]
        cj[ay] += step_y[ay]
        tmy[ay] += tdy[ay]
        active = a

    hit = ~np.isnan(hit_t)
    t = hit_t[hit]
    if cfg.range_noise > 0:
        rng = np.random.default_rng(seed)
        t = np.clip(t + rng.normal(0.0, cfg.range_noise, t.shape), 0.0, r_max)
    px = dx[hit] * t
    py = dy[hit] * t
    pz = z0 + dz[hit] * t - g0
    c, s = math.cos(yaw), math.sin(yaw)
    points = np.column_stack([c * px + s * py, -s * px + c * py, pz])
    stamp = float(pose[5]) if len(pose) > 5 else 0.0
    return PointCloud(points=points, stamp=stamp, n_rays=n, sensor_height=cfg.mount_height)


def voxelize_heightmap(cloud: PointCloud | np.ndarray, cfg: HeightMapConfig = HeightMapConfig()) -> HeightMap:
    """Per-cell minimum height, clipped to ``z_clip``; empty cells are invalid and hold ``z_clip[0]``.

    Points are taken in the map frame as given. Cells are half-open, so a point
    on an edge lands in the higher-index cell.
    """
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=float).reshape(-1, 3)
    nx, ny = cfg.dims
    z_lo, z_hi = cfg.z_clip
    if cfg.drop_ground:
        pts = pts[pts[:, 2] >= z_lo]
    i = np.floor((pts[:, 0] - cfg.x_range[0]) / cfg.voxel_size + 1e-9).astype(int)
    j = np.floor((pts[:, 1] - cfg.y_range[0]) / cfg.voxel_size + 1e-9).astype(int)
    keep = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
    lowest = np.full(nx * ny, np.inf)
    np.minimum.at(lowest, i[keep] * ny + j[keep], pts[keep, 2])
    lowest = lowest.reshape(nx, ny)
    valid = np.isfinite(lowest)
    values = np.where(valid, np.clip(lowest, z_lo, z_hi), z_lo)
    return HeightMap(values=values, valid=valid, config=cfg)


def to_map_frame(cloud: PointCloud, cfg: HeightMapConfig = HeightMapConfig()) -> np.ndarray:
    c, s = math.cos(cfg.frame_yaw), math.sin(cfg.frame_yaw)
    p = cloud.points
    return np.column_stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]])


def heightmap_from_scan(cloud: PointCloud, cfg: HeightMapConfig = HeightMapConfig()) -> HeightMap:
    """Rotate a robot-frame cloud into the map frame, then voxelize."""
    return voxelize_heightmap(to_map_frame(cloud, cfg), cfg)


def temporal_max(window: Sequence[HeightMap]) -> HeightMap:
    """Cellwise maximum over the valid entries of each map (newest last)."""
    if not window:
        raise DimsMismatch("empty window")
    first = window[0]
    for m in window[1:]:
        if m.dims != first.dims or m.config != first.config:
            raise DimsMismatch(f"map dims {m.dims} vs {first.dims}")
    stack = np.stack([np.where(m.valid, m.values, -np.inf) for m in window])
    top = stack.max(axis=0)
    valid = np.isfinite(top)
    values = np.where(valid, top, first.config.z_clip[0])
    return HeightMap(values=values, valid=valid, config=first.config)


def perception_range(cfg: HeightMapConfig, lidar: LidarConfig) -> float:
    """Ray length beyond which a return cannot land inside the height map."""
    reach = max(abs(v) + cfg.voxel_size for v in (*cfg.x_range, *cfg.y_range))
    rise = max(lidar.mount_height, cfg.z_clip[1])
    return math.sqrt(2 * reach**2 + rise**2) + 0.05


class HeightMapFilter:
    """Rolling window of the last ``temporal_window`` scans."""

    def __init__(self, cfg: HeightMapConfig = HeightMapConfig()):
        self.cfg = cfg
        self._maps: deque[HeightMap] = deque(maxlen=cfg.temporal_window)

    def push(self, cloud: PointCloud) -> HeightMap:
        self._maps.append(heightmap_from_scan(cloud, self.cfg))
        return self.current()

    def current(self) -> HeightMap:
        if not self._maps:
            return HeightMap.empty(self.cfg)
        return temporal_max(list(self._maps))
