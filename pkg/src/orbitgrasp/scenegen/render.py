"""Pinhole depth cameras raycast against analytic scenes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..cloud import PointCloud, estimate_normals, voxel_downsample
from .scene import Scene

log = logging.getLogger(__name__)

TABLE_ID = 0
DEPTH_NOISE = 0.001


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera: x right, y down, z forward in the camera frame.

    ``rotation`` maps camera axes to world axes (columns), ``position`` is the
    optical center in world coordinates.
    """

    fx: float = 240.0
    fy: float = 240.0
    cx: float = 100.0
    cy: float = 75.0
    width: int = 200
    height: int = 150
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise: float = DEPTH_NOISE

    def __post_init__(self):
        if min(self.fx, self.fy) <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("camera intrinsics must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space unit ray directions for every pixel (row-major)."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        d = np.stack([(u.ravel() + 0.5 - self.cx) / self.fx, (v.ravel() + 0.5 - self.cy) / self.fy,
                      np.ones(u.size)], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.position, d.shape), d @ self.rotation.T

    def transformed(self, R, t=(0.0, 0.0, 0.0)) -> "CameraSpec":
        R = np.asarray(R, dtype=np.float64)
        return CameraSpec(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                          R @ self.rotation, R @ self.position + np.asarray(t, dtype=np.float64), self.noise)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target = np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def orbit_camera(workspace: float, azimuth: float, elevation: float, distance: float = 0.6,
                 **intrinsics) -> CameraSpec:
    """Camera on a sphere around the workspace center looking at it.

    ``elevation`` is measured from the vertical.
    """
    c = np.array([workspace / 2, workspace / 2, 0.0])
    eye = c + distance * np.array([math.sin(elevation) * math.cos(azimuth),
                                   math.sin(elevation) * math.sin(azimuth), math.cos(elevation)])
    return CameraSpec(rotation=look_at(eye, c), position=eye, **intrinsics)


def camera_rig(workspace: float, views: str, rng: np.random.Generator, **intrinsics) -> list[CameraSpec]:
    """``single``: one random view; ``multi``: three views evenly spaced in azimuth."""
    az = rng.uniform(-math.pi, math.pi)
    if views == "single":
        return [orbit_camera(workspace, az, rng.uniform(math.pi / 8, math.pi / 3),
                             rng.uniform(0.5, 0.7), **intrinsics)]
    if views == "multi":
        return [orbit_camera(workspace, az + 2 * math.pi * k / 3, math.pi / 3, 0.6, **intrinsics)
                for k in range(3)]
    raise ValueError(f"views must be 'single' or 'multi', got {views!r}")


def raycast(scene: Scene, origins, dirs) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit distance and object id per ray (``inf`` / -1 on miss).

    The table is the square ``[0, W]^2`` of the plane ``z = 0``.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), -1, dtype=np.int64)
    if scene.table:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origins[:, 2] / dirs[:, 2]
        hit = np.isfinite(t) & (t > 0)
        p = origins + np.where(hit, t, 0.0)[:, None] * dirs
        W = scene.workspace
        hit &= (p[:, 0] >= 0) & (p[:, 0] <= W) & (p[:, 1] >= 0) & (p[:, 1] <= W)
        best[hit] = t[hit]
        ids[hit] = TABLE_ID
    for prim in scene.primitives:
        t0, _ = prim.ray_interval(origins, dirs)
        closer = (t0 > 0) & (t0 < best)
        best[closer] = t0[closer]
        ids[closer] = prim.obj_id
    return best, ids


def render_depth(scene: Scene, camera: CameraSpec, rng: np.random.Generator | int | None = None) -> PointCloud:
    """Back-projected labelled point cloud with Gaussian noise along each ray."""
    o, d = camera.rays()
    t, ids = raycast(scene, o, d)
    hit = np.isfinite(t)
    if not hit.any():
        log.warning("camera sees nothing")
        return PointCloud(np.zeros((0, 3)), labels=np.zeros(0, dtype=np.int64))
    t = t[hit]
    if camera.noise > 0:
        rng = np.random.default_rng(rng)
        # one draw per pixel keeps the noise tied to the pixel grid
        eps = rng.normal(0.0, camera.noise, size=hit.size)[hit]
        t = t + eps
    return PointCloud(o[hit] + t[:, None] * d[hit], labels=ids[hit])


def observe(scene: Scene, cameras, rng: np.random.Generator, target: tuple[int, int] = (4000, 6000),
            normal_k: int = 16, pre_voxel: float = 0.002) -> PointCloud:
    """Render every view, estimate camera-facing normals per view, fuse and downsample.

    The final voxel grid is anchored at the workspace center so that quarter
    turns about the vertical axis map the grid onto itself.
    """
    parts = []
    for cam in cameras:
        pc = render_depth(scene, cam, rng)
        if len(pc) < normal_k:
            continue
        pc = voxel_downsample(pc, pre_voxel, origin=_grid_origin(scene))
        if len(pc) >= normal_k:
            parts.append(estimate_normals(pc, normal_k, cam.position))
    if not parts:
        raise ValueError("no camera produced enough points")
    fused = PointCloud.concat(parts)
    return voxel_downsample(fused, 0.005, target=target, origin=_grid_origin(scene))


def _grid_origin(scene: Scene) -> np.ndarray:
    return np.array([scene.workspace / 2, scene.workspace / 2, 0.0])
