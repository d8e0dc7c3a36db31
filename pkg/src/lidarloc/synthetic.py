"""Synthetic city blocks and a spinning-LiDAR ray caster.

The scene is an infinite ground plane at z = 0 plus axis-aligned boxes
(buildings). Scans are cast from a sensor pose and returned in the sensor
frame together with the pose, i.e. ready-made training samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyScanError, InvalidInputError
from .geometry import Pose, as_cloud, yaw_rotation


@dataclass(frozen=True)
class TrainSample:
    cloud: np.ndarray
    gt_pose: Pose

    def __post_init__(self):
        cloud = as_cloud(self.cloud)
        if len(cloud) == 0:
            raise InvalidInputError("training sample needs a non-empty cloud")
        object.__setattr__(self, "cloud", cloud)


@dataclass(frozen=True)
class SyntheticScene:
    """``boxes`` rows are (xmin, ymin, zmin, xmax, ymax, zmax) in meters."""

    extent: float
    seed: int
    boxes: np.ndarray

    @property
    def building_count(self) -> int:
        return len(self.boxes)

    def inside_building(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        lo = self.boxes[:, :3] - margin
        hi = self.boxes[:, 3:] + margin
        return bool(np.any(np.all((p >= lo) & (p <= hi), axis=1)))

    def on_surface(self, points, tol: float = 1e-6) -> np.ndarray:
        """Mask of points lying on the ground plane or on a box face."""
        pts = np.asarray(points, dtype=float)
        on = np.abs(pts[:, 2]) <= tol
        for box in self.boxes:
            lo, hi = box[:3], box[3:]
            inside = np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)
            face = np.any((np.abs(pts - lo) <= tol) | (np.abs(pts - hi) <= tol), axis=1)
            on |= inside & face
        return on


def synth_scene(
    seed: int,
    extent: float = 100.0,
    building_count: int = 20,
    size_range=(4.0, 16.0),
    height_range=(4.0, 25.0),
) -> SyntheticScene:
    if not extent > 0:
        raise InvalidInputError("extent must be positive")
    rng = np.random.default_rng(seed)
    boxes = np.zeros((building_count, 6))
    for b in range(building_count):
        w, d = rng.uniform(*size_range, size=2)
        w, d = min(w, extent), min(d, extent)
        x0 = rng.uniform(0.0, extent - w)
        y0 = rng.uniform(0.0, extent - d)
        h = rng.uniform(*height_range)
        boxes[b] = (x0, y0, 0.0, x0 + w, y0 + d, h)
    return SyntheticScene(float(extent), int(seed), boxes)


@dataclass(frozen=True)
class SensorConfig:
    """Spinning LiDAR: ``channels`` beams across the vertical FOV times
    ``azimuth_steps`` firings per revolution."""

    channels: int = 32
    azimuth_steps: int = 512
    fov_deg: tuple = (-22.5, 22.5)
    max_range: float = 60.0
    range_noise: float = 0.0

    @property
    def ray_count(self) -> int:
        return self.channels * self.azimuth_steps

    def directions(self) -> np.ndarray:
        lo, hi = (math.radians(a) for a in self.fov_deg)
        elev = np.linspace(lo, hi, self.channels) if self.channels > 1 else np.array([lo])
        az = np.arange(self.azimuth_steps) * (2.0 * math.pi / self.azimuth_steps)
        el, a = np.meshgrid(elev, az, indexing="ij")
        return np.stack(
            [np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1
        ).reshape(-1, 3)


def cast_rays(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance to the first hit along each unit ray (inf on a miss)."""
    dist = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -origin[2] / dz
    hit = (dz < 0) & (t_ground > 0)
    dist[hit] = t_ground[hit]
    if len(scene.boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        lo = (scene.boxes[None, :, :3] - origin) * inv[:, None, :]
        hi = (scene.boxes[None, :, 3:] - origin) * inv[:, None, :]
        # a zero direction component yields nan (0 * inf) when the origin sits on a slab face
        lo = np.nan_to_num(lo, nan=-np.inf)
        hi = np.nan_to_num(hi, nan=np.inf)
        t_near = np.minimum(lo, hi).max(axis=2)
        t_far = np.maximum(lo, hi).min(axis=2)
        ok = (t_near <= t_far) & (t_near > 0)
        t_box = np.where(ok, t_near, np.inf).min(axis=1)
        dist = np.minimum(dist, t_box)
    return dist


def simulate_scan(
    scene: SyntheticScene, pose: Pose, sensor: SensorConfig = SensorConfig(), seed: int = 0
) -> TrainSample:
    """First-hit returns within ``max_range``, expressed in the sensor frame."""
    if not sensor.max_range > 0:
        raise InvalidInputError("max_range must be positive")
    origin = pose.translation
    if origin[2] <= 0:
        raise InvalidInputError("sensor must be above the ground plane")
    if scene.inside_building(origin):
        raise InvalidInputError("sensor is inside a building")
    local_dirs = sensor.directions()
    dist = cast_rays(scene, origin, local_dirs @ pose.rotation.T)
    keep = dist <= sensor.max_range
    if not keep.any():
        raise EmptyScanError("scan produced no returns")
    r = dist[keep]
    if sensor.range_noise > 0:
        rng = np.random.default_rng(seed)
        r = r + rng.normal(0.0, sensor.range_noise, size=r.shape)
    return TrainSample(local_dirs[keep] * r[:, None], pose)


def flight_poses(
    scene: SyntheticScene,
    count: int,
    seed: int,
    altitude: float = 12.0,
    step: float = 3.0,
    yaw_mode: str = "heading",
    clearance: float = 2.0,
):
    """A smooth random-walk trajectory that avoids buildings.

    ``yaw_mode`` is ``"heading"`` (sensor faces the direction of travel) or
    ``"random"`` (independent uniform yaw per scan).
    """
    rng = np.random.default_rng(seed)
    margin = 0.2 * scene.extent
    poses = []
    for _ in range(1000):
        pos = np.array(
            [rng.uniform(margin, scene.extent - margin), rng.uniform(margin, scene.extent - margin), altitude]
        )
        if not scene.inside_building(pos, clearance):
            break
    heading = rng.uniform(0, 2 * math.pi)
    while len(poses) < count:
        for _ in range(64):
            turn = rng.normal(0.0, 0.35)
            cand_heading = heading + turn
            cand = pos + step * np.array([math.cos(cand_heading), math.sin(cand_heading), 0.0])
            inside = margin <= cand[0] <= scene.extent - margin and margin <= cand[1] <= scene.extent - margin
            if inside and not scene.inside_building(cand, clearance):
                break
            heading += rng.uniform(0.5, math.pi)
        else:
            cand, cand_heading = pos, heading
        pos, heading = cand, cand_heading
        yaw = heading if yaw_mode == "heading" else rng.uniform(0, 2 * math.pi)
        p = yaw_rotation(yaw, 0.0)
        poses.append(Pose(p.rotation, pos.copy()))
    return poses
