"""Camera rig construction, look-at poses, pixel rays and Plücker embeddings.

Axis convention (used by every module in the package): right-handed world,
+y up, cameras look along their local -z axis.  Azimuth 0 places the camera
on the +z axis (frontal view) and azimuth increases towards +x, so azimuth 90
sees the subject's right side.  Image pixels are indexed with u to the right
and v downward; rays pass through pixel centres (px + 0.5, py + 0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONVENTION = "right-handed, +y up, camera looks along -z, azimuth 0 on +z, azimuth 90 on +x"

DEFAULT_RADIUS = 2.5
DEFAULT_FOV_Y = 40.0
DEFAULT_SIZE = 256
# Elevations and azimuth count of the 96-view capture rig.
DATASET_ELEVATIONS = (-10.0, 0.0, 10.0, 20.0, 30.0, 40.0)
DATASET_AZIMUTHS = 16


class InvalidRigError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    elevation: float
    azimuth: float
    radius: float = DEFAULT_RADIUS
    fov_y: float = DEFAULT_FOV_Y
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation {self.elevation} outside [-90, 90]")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError(f"fov_y {self.fov_y} outside (0, 180)")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        az = float(self.azimuth) % 360.0
        if az >= 360.0:  # -1e-17 % 360 rounds to 360.0
            az = 0.0
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", float(self.elevation))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "fov_y", float(self.fov_y))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def resized(self, width: int, height: int) -> "CameraPose":
        return CameraPose(self.elevation, self.azimuth, self.radius, self.fov_y, width, height)

    @property
    def position(self) -> np.ndarray:
        return camera_position(self.elevation, self.azimuth, self.radius)


@dataclass(frozen=True)
class Rig:
    elevations: tuple
    azimuth_count: int
    radius: float = DEFAULT_RADIUS
    fov_y: float = DEFAULT_FOV_Y
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE

    def __post_init__(self):
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))
        if len(self.elevations) == 0:
            raise InvalidRigError("rig needs at least one elevation")
        if int(self.azimuth_count) < 1:
            raise InvalidRigError(f"azimuth_count must be >= 1, got {self.azimuth_count}")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    moment: np.ndarray

    @classmethod
    def from_origin_direction(cls, origin, direction) -> "Ray":
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        return cls(o, d, np.cross(o, d))


def camera_position(elevation: float, azimuth: float, radius: float) -> np.ndarray:
    e = math.radians(elevation)
    a = math.radians(azimuth)
    # exact zero at the poles keeps the up-vector fallback well defined
    ce = 0.0 if abs(elevation) == 90.0 else math.cos(e)
    return radius * np.array([ce * math.sin(a), math.sin(e), ce * math.cos(a)])


def rig_poses(rig: Rig) -> list[CameraPose]:
    """All rig viewpoints, elevation-major then azimuth-ascending."""
    step = 360.0 / rig.azimuth_count
    return [
        CameraPose(e, i * step, rig.radius, rig.fov_y, rig.width, rig.height)
        for e in rig.elevations
        for i in range(rig.azimuth_count)
    ]


def dataset_rig(**kwargs) -> Rig:
    return Rig(DATASET_ELEVATIONS, DATASET_AZIMUTHS, **kwargs)


def orbit_band(elevation: float, count: int, radius: float = DEFAULT_RADIUS,
               fov_y: float = DEFAULT_FOV_Y, width: int = DEFAULT_SIZE,
               height: int = DEFAULT_SIZE) -> list[CameraPose]:
    """`count` equally spaced cameras at one elevation, starting at azimuth 0."""
    if count < 1:
        raise ValueError(f"orbit band needs count >= 1, got {count}")
    step = 360.0 / count
    return [CameraPose(elevation, i * step, radius, fov_y, width, height) for i in range(count)]


def camera_to_world_rotation(pose: CameraPose) -> np.ndarray:
    """Columns are the camera's right, up and backward (+z) axes in world space."""
    c = pose.position
    forward = -c / np.linalg.norm(c)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    if np.linalg.norm(right) < 1e-9:
        # looking straight up/down: roll is ambiguous, fall back to +x as up
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.stack([right, up, -forward], axis=1)


def intrinsics(pose: CameraPose) -> Intrinsics:
    fy = 0.5 * pose.height / math.tan(math.radians(pose.fov_y) / 2.0)
    return Intrinsics(fy, fy, 0.5 * pose.width, 0.5 * pose.height)


def view_matrix(pose: CameraPose) -> tuple[np.ndarray, Intrinsics]:
    """World-to-camera 4x4 transform and pinhole intrinsics for `pose`."""
    R_cw = camera_to_world_rotation(pose)
    R = R_cw.T
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ pose.position
    return W, intrinsics(pose)


def camera_to_world(pose: CameraPose) -> np.ndarray:
    """Analytic inverse of the `view_matrix` extrinsics."""
    M = np.eye(4)
    M[:3, :3] = camera_to_world_rotation(pose)
    M[:3, 3] = pose.position
    return M


def project_point(pose: CameraPose, point) -> tuple[np.ndarray, float]:
    """Pixel coordinates (u right, v down) and positive depth of a world point."""
    W, K = view_matrix(pose)
    p = W[:3, :3] @ np.asarray(point, dtype=np.float64) + W[:3, 3]
    depth = -p[2]
    return np.array([K.cx + K.fx * p[0] / depth, K.cy - K.fy * p[1] / depth]), depth


def _camera_directions(pose: CameraPose, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    K = intrinsics(pose)
    d_cam = np.stack([(u - K.cx) / K.fx, -(v - K.cy) / K.fy, -np.ones_like(u)], axis=-1)
    d = d_cam @ camera_to_world_rotation(pose).T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(pose: CameraPose, px: int, py: int) -> Ray:
    if not (0 <= px < pose.width and 0 <= py < pose.height):
        raise IndexError(f"pixel ({px}, {py}) outside {pose.width}x{pose.height} image")
    d = _camera_directions(pose, np.array(px + 0.5), np.array(py + 0.5))
    o = pose.position
    return Ray(o, d, np.cross(o, d))


def pixel_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, both shaped (H, W, 3)."""
    v, u = np.meshgrid(np.arange(pose.height) + 0.5, np.arange(pose.width) + 0.5, indexing="ij")
    d = _camera_directions(pose, u, v)
    o = np.broadcast_to(pose.position, d.shape).copy()
    return o, d


def plucker_embed(ray: Ray) -> np.ndarray:
    """6-vector (moment, direction) with moment = origin x direction."""
    return np.concatenate([np.cross(ray.origin, ray.direction), ray.direction])


def plucker_map(pose: CameraPose) -> np.ndarray:
    """(H, W, 6) Plücker conditioning image for a camera."""
    o, d = pixel_rays(pose)
    return np.concatenate([np.cross(o, d), d], axis=-1)


# ---------------------------------------------------------------- persistence

def cameras_to_dict(poses: Iterable[CameraPose]) -> dict:
    return {"convention": CONVENTION, "poses": [asdict(p) for p in poses]}


def cameras_from_dict(doc: dict) -> list[CameraPose]:
    if "poses" not in doc:
        raise ValueError("camera document has no 'poses' list")
    conv = doc.get("convention", CONVENTION)
    if conv != CONVENTION:
        raise ValueError(f"unsupported camera convention: {conv!r}")
    return [CameraPose(**p) for p in doc["poses"]]


def save_cameras(poses: Sequence[CameraPose], path) -> None:
    from .io import write_json
    write_json(path, cameras_to_dict(poses))


def load_cameras(path) -> list[CameraPose]:
    with open(Path(path), "r", encoding="utf-8") as fh:
        return cameras_from_dict(json.load(fh))
