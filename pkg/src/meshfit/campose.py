"""Camera-pose protocols: fixed target rings, evaluation orbits, random
training viewpoints, and shared/per-pose pose jitter.

All generators are pure functions of their arguments; randomness comes
only from explicit integer seeds, so a (generator, arguments, seed)
triple always yields the same ordered pose list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core3d import DEFAULT_FOV_DEG, DEFAULT_RADIUS, CameraPose

DEFAULT_POSE_IMAGE_SIZE = 320


@dataclass(frozen=True)
class PoseSet:
    """Ordered camera poses plus the seed that produced them (if any)."""

    poses: tuple
    seed: int | None = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def to_json(self) -> list:
        return [p.to_json() for p in self.poses]


def zero123pp_targets(
    query_azimuth_deg: float,
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = DEFAULT_POSE_IMAGE_SIZE,
    height: int = DEFAULT_POSE_IMAGE_SIZE,
) -> PoseSet:
    """Six-view target ring: azimuths query+30+60k, elevations 20/-10."""
    if not np.isfinite(query_azimuth_deg):
        raise ValueError("query azimuth must be finite")
    poses = []
    for k in range(6):
        azimuth = (query_azimuth_deg + 30.0 + 60.0 * k) % 360.0
        elevation = 20.0 if k % 2 == 0 else -10.0
        poses.append(CameraPose(azimuth, elevation, radius, fov_deg, width, height))
    return PoseSet(poses, label="zero123pp")


def orbit_eval_poses(
    n: int = 21,
    elevation_cycle=(30.0, 0.0, -30.0),
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = DEFAULT_POSE_IMAGE_SIZE,
    height: int = DEFAULT_POSE_IMAGE_SIZE,
) -> PoseSet:
    """n uniform azimuths; elevation of pose k cycles through the given set."""
    if n < 1:
        raise ValueError("orbit needs at least one pose")
    cycle = tuple(elevation_cycle)
    if not cycle:
        raise ValueError("elevation cycle must be non-empty")
    poses = [
        CameraPose(
            k * 360.0 / n, cycle[k % len(cycle)], radius, fov_deg, width, height
        )
        for k in range(n)
    ]
    return PoseSet(poses, label="orbit")


def random_viewpoints(
    n: int,
    seed: int,
    radius: float = DEFAULT_RADIUS,
    fov_deg: float = DEFAULT_FOV_DEG,
    elevation_range=(-30.0, 75.0),
    width: int = DEFAULT_POSE_IMAGE_SIZE,
    height: int = DEFAULT_POSE_IMAGE_SIZE,
) -> PoseSet:
    """Azimuth U[0,360), elevation uniform in `elevation_range`, fixed radius."""
    if n < 1:
        raise ValueError("need n >= 1 viewpoints")
    lo, hi = elevation_range
    if not -90.0 <= lo <= hi <= 90.0:
        raise ValueError(f"bad elevation range {elevation_range}")
    rng = np.random.default_rng(seed)
    azimuths = rng.uniform(0.0, 360.0, size=n)
    elevations = rng.uniform(lo, hi, size=n)
    poses = [
        CameraPose(float(a), float(e), radius, fov_deg, width, height)
        for a, e in zip(azimuths, elevations)
    ]
    return PoseSet(poses, seed=seed, label="random")


def apply_augmentation(poses, rotation_deg: float, scale: float) -> PoseSet:
    """Shared z-rotation of all azimuths plus shared radius scale.

    This is the deterministic core of augment_poses; rotation 0 and
    scale 1 is the identity.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    out = [
        CameraPose(
            (p.azimuth_deg + rotation_deg) % 360.0,
            p.elevation_deg,
            p.radius * scale,
            p.fov_deg,
            p.width,
            p.height,
        )
        for p in poses
    ]
    return PoseSet(out, label="augmented")


def augment_poses(poses, seed: int, max_scale_delta: float = 0.2) -> PoseSet:
    """Draw one rotation U[0,360) and one scale U[1-d, 1+d], apply to all."""
    if len(tuple(poses)) == 0:
        raise ValueError("augment_poses needs a non-empty pose set")
    if not 0.0 <= max_scale_delta < 1.0:
        raise ValueError("max_scale_delta must be in [0, 1)")
    rng = np.random.default_rng(seed)
    rotation = float(rng.uniform(0.0, 360.0))
    scale = float(rng.uniform(1.0 - max_scale_delta, 1.0 + max_scale_delta))
    out = apply_augmentation(poses, rotation, scale)
    return PoseSet(out.poses, seed=seed, label="augmented")


def perturb_poses(
    poses, seed: int, sigma_deg: float = 1.0, sigma_radius: float = 0.02
) -> PoseSet:
    """Per-pose Gaussian jitter on azimuth/elevation/radius.

    Azimuths wrap into [0,360); elevations clamp to [-90,90]; radii stay
    strictly positive.
    """
    if sigma_deg < 0 or sigma_radius < 0:
        raise ValueError("noise sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        d_az, d_el = rng.normal(0.0, sigma_deg, size=2) if sigma_deg > 0 else (0.0, 0.0)
        d_r = rng.normal(0.0, sigma_radius) if sigma_radius > 0 else 0.0
        out.append(
            CameraPose(
                (p.azimuth_deg + d_az) % 360.0,
                float(np.clip(p.elevation_deg + d_el, -90.0, 90.0)),
                max(p.radius + d_r, 1e-6),
                p.fov_deg,
                p.width,
                p.height,
            )
        )
    return PoseSet(out, seed=seed, label="perturbed")
