"""Cameras, rays, and the shared scene geometry conventions.

World space is right-handed with +z up.  Objects live in the fixed
axis-aligned box [-1, 1]^3.  A camera sits on a sphere around the origin
(azimuth measured counter-clockwise from +x, elevation up from the xy
plane) and always looks at the origin.  Pixel (px, py) has its center at
(px + 0.5, py + 0.5); rays through pixel centers are unit length, and
depth values everywhere in the package mean z-depth: distance along the
camera forward axis, not along the ray.

All angles at the API boundary are degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

SCENE_BOX_HALF = 1.0
DEFAULT_RADIUS = 2.5
DEFAULT_FOV_DEG = 50.0

Vec3 = np.ndarray


def vec3(x, y, z) -> Vec3:
    return np.array([x, y, z], dtype=np.float64)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Mat4:
    """Homogeneous 4x4 transform; flattened form is column-major."""

    m: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.m, dtype=np.float64)
        if arr.shape != (4, 4):
            raise ValueError(f"Mat4 expects a 4x4 array, got {arr.shape}")
        object.__setattr__(self, "m", arr)

    @classmethod
    def identity(cls) -> "Mat4":
        return cls(np.eye(4))

    @classmethod
    def from_flat(cls, values) -> "Mat4":
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (16,):
            raise ValueError("Mat4.from_flat expects 16 values")
        return cls(arr.reshape(4, 4, order="F"))

    def to_flat(self) -> list:
        return self.m.flatten(order="F").tolist()

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts @ self.m[:3, :3].T + self.m[:3, 3]

    def __matmul__(self, other: "Mat4") -> "Mat4":
        return Mat4(self.m @ other.m)


@dataclass(frozen=True)
class CameraPose:
    """Spherical look-at camera plus pinhole intrinsics (square pixels)."""

    azimuth_deg: float
    elevation_deg: float
    radius: float
    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.azimuth_deg, self.elevation_deg, self.radius, self.fov_deg)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("camera parameters must be finite")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError(f"elevation out of [-90, 90]: {self.elevation_deg}")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov out of (0, 180): {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def position(self) -> Vec3:
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        ce = math.cos(el)
        return vec3(
            self.radius * ce * math.cos(az),
            self.radius * ce * math.sin(az),
            self.radius * math.sin(el),
        )

    def forward(self) -> Vec3:
        return _normalize(-self.position())

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation, rows = (right, down, forward)."""
        fwd = self.forward()
        if abs(self.elevation_deg) == 90.0:
            up_hint = vec3(1.0, 0.0, 0.0)
        else:
            up_hint = vec3(0.0, 0.0, 1.0)
        right = _normalize(np.cross(fwd, up_hint))
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def up(self) -> Vec3:
        return -self.rotation()[1]

    def world_to_cam(self) -> Mat4:
        rot = self.rotation()
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ self.position()
        return Mat4(m)

    def focal_px(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_deg) / 2.0)

    def principal_point(self) -> tuple:
        return (self.width / 2.0, self.height / 2.0)

    def to_json(self) -> dict:
        return {
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
            "radius": self.radius,
            "fov_deg": self.fov_deg,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraPose":
        try:
            return cls(
                azimuth_deg=float(obj["azimuth_deg"]),
                elevation_deg=float(obj["elevation_deg"]),
                radius=float(obj["radius"]),
                fov_deg=float(obj["fov_deg"]),
                width=int(obj["width"]),
                height=int(obj["height"]),
            )
        except KeyError as missing:
            raise ValueError(f"camera JSON missing field {missing}") from None


def camera_from_spherical(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = 320,
    height: int = 320,
) -> CameraPose:
    return CameraPose(azimuth_deg, elevation_deg, radius, fov_deg, width, height)


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    t_near: float
    t_far: float


def intersect_scene_box(origins: np.ndarray, dirs: np.ndarray):
    """Slab intersection of rays with [-1,1]^3.

    Returns (t_near, t_far) arrays; a miss (or a box entirely behind the
    origin) is encoded as t_near = t_far = 0.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    half = SCENE_BOX_HALF
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origins) * inv
        t2 = (half - origins) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # Axis-parallel rays: ignore the axis if inside its slab, miss if outside.
    parallel = dirs == 0.0
    if parallel.any():
        inside = np.abs(origins) <= half
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    miss = t_far < t_near
    t_near = np.where(miss, 0.0, t_near)
    t_far = np.where(miss, 0.0, t_far)
    return t_near, t_far


def pixel_ray(camera: CameraPose, px: float, py: float) -> Ray:
    """Unit-length world ray through the center of pixel (px, py)."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    origins, dirs, t_near, t_far = pixel_rays(
        camera, np.array([px], dtype=np.float64), np.array([py], dtype=np.float64)
    )
    return Ray(origins[0], dirs[0], float(t_near[0]), float(t_far[0]))


def pixel_rays(camera: CameraPose, px: np.ndarray, py: np.ndarray):
    """Vectorized pixel_ray: returns (origins, directions, t_near, t_far)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    f = camera.focal_px()
    cx, cy = camera.principal_point()
    d_cam = np.stack(
        [(px + 0.5 - cx) / f, (py + 0.5 - cy) / f, np.ones_like(px)], axis=-1
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ camera.rotation()  # rows of rotation() are the camera axes
    origin = camera.position()
    origins = np.broadcast_to(origin, d_world.shape).copy()
    t_near, t_far = intersect_scene_box(origins, d_world)
    return origins, d_world, t_near, t_far


def full_frame_pixels(width: int, height: int, patch=None):
    """(px, py) index arrays for an image or a patch rect (x0, y0, w, h)."""
    if patch is None:
        x0, y0, w, h = 0, 0, width, height
    else:
        x0, y0, w, h = patch
        if x0 < 0 or y0 < 0 or w < 1 or h < 1 or x0 + w > width or y0 + h > height:
            raise ValueError(f"patch {patch} outside {width}x{height} image")
    ys, xs = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def save_poses_json(poses, path) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_json() for p in poses], fh, indent=2)
        fh.write("\n")


def load_poses_json(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("pose file must hold a JSON array of cameras")
    return [CameraPose.from_json(obj) for obj in data]
