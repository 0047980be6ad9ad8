"""Evaluation metrics: image quality, mesh normalization, cloud distances.

Image metrics follow the usual reference formulas (PSNR over rgb MSE;
SSIM with an 11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03 on a
unit dynamic range, per channel then averaged).  Geometry metrics work
on area-uniform surface samples; Chamfer distance is the sum of the two
directional means of non-squared L2 nearest-neighbor distances, which
keeps it on the same scale as the F-Score threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .flexigrid import Mesh

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0
FSCORE_TAU = 0.2
DEFAULT_SAMPLE_COUNT = 16384
YAW_STEPS = 72
YAW_SUBCLOUD = 2048


@dataclass
class PointCloud:
    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


def _rgb(image) -> np.ndarray:
    data = np.asarray(getattr(image, "rgb", image), dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) rgb data, got shape {data.shape}")
    return data


def _rgb_pair(a, b):
    x, y = _rgb(a), _rgb(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped for (near-)identical pairs."""
    x, y = _rgb_pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering along both image axes."""
    out = sliding_window_view(img, kernel.size, axis=0) @ kernel
    return sliding_window_view(out, kernel.size, axis=1) @ kernel


def ssim(a, b) -> float:
    """Mean structural similarity over valid window positions and channels."""
    x, y = _rgb_pair(a, b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    scores = []
    for c in range(3):
        xc, yc = x[:, :, c], y[:, :, c]
        mx = _windowed(xc, kernel)
        my = _windowed(yc, kernel)
        vx = _windowed(xc * xc, kernel) - mx * mx
        vy = _windowed(yc * yc, kernel) - my * my
        cxy = _windowed(xc * yc, kernel) - mx * my
        score = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        scores.append(np.mean(score))
    return float(np.mean(scores))


# -- geometry ---------------------------------------------------------------


def normalize_unit_cube(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale the largest axis to 2."""
    if len(mesh.vertices) == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("mesh has zero extent")
    center = (lo + hi) / 2.0
    return Mesh(
        vertices=(mesh.vertices - center) * (2.0 / extent),
        triangles=mesh.triangles,
        colors=mesh.colors,
        normals=mesh.normals,
    )


def triangle_areas(mesh: Mesh) -> np.ndarray:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n: int = DEFAULT_SAMPLE_COUNT, seed: int = 0) -> PointCloud:
    """Area-uniform surface samples: triangles by area, then a barycentric warp."""
    if n < 1:
        raise ValueError("need at least one sample")
    areas = triangle_areas(mesh)
    total = float(areas.sum())
    if not total > 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cumulative = np.cumsum(areas)
    chosen = np.searchsorted(cumulative, rng.random(n) * total, side="right")
    chosen = np.minimum(chosen, len(areas) - 1)
    u, v = rng.random((2, n))
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    a = mesh.vertices[mesh.triangles[chosen, 0]]
    b = mesh.vertices[mesh.triangles[chosen, 1]]
    c = mesh.vertices[mesh.triangles[chosen, 2]]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return PointCloud(points=points, seed=seed)


def _points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("need a non-empty (N, 3) point cloud")
    return pts


def nearest_distances(queries, targets) -> np.ndarray:
    """L2 distance from each query point to its nearest target point."""
    q, t = _points(queries), _points(targets)
    return cKDTree(t).query(q, k=1)[0]


def chamfer(a, b) -> float:
    """Sum of the two directional mean nearest-neighbor distances."""
    return float(np.mean(nearest_distances(a, b)) + np.mean(nearest_distances(b, a)))


def fscore(a, b, tau: float = FSCORE_TAU) -> float:
    """Harmonic mean of precision/recall at distance threshold tau."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    precision = float(np.mean(nearest_distances(a, b) <= tau))
    recall = float(np.mean(nearest_distances(b, a) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _yaw_matrix(angle_deg: float) -> np.ndarray:
    t = np.radians(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def align_yaw(pred: Mesh, gt: Mesh, steps: int = YAW_STEPS, seed: int = 0):
    """Brute-force search over z-rotations minimizing subcloud Chamfer distance.

    Returns (rotated prediction, chosen angle in degrees).  Candidates are
    tried nearest-to-zero first, so exact ties resolve toward no rotation.
    """
    if steps < 1:
        raise ValueError("need at least one candidate angle")
    pred_pts = sample_surface(pred, YAW_SUBCLOUD, seed).points
    gt_pts = sample_surface(gt, YAW_SUBCLOUD, seed).points
    gt_tree = cKDTree(gt_pts)

    candidates = sorted(
        (360.0 * k / steps for k in range(steps)),
        key=lambda t: (min(t, 360.0 - t), t),
    )
    best_angle, best_cd = None, np.inf
    for angle in candidates:
        rotated = pred_pts @ _yaw_matrix(angle).T
        cd = float(
            np.mean(gt_tree.query(rotated, k=1)[0])
            + np.mean(cKDTree(rotated).query(gt_pts, k=1)[0])
        )
        if cd < best_cd:
            best_angle, best_cd = angle, cd
    rotation = _yaw_matrix(best_angle)
    return (
        Mesh(
            vertices=pred.vertices @ rotation.T,
            triangles=pred.triangles,
            colors=pred.colors,
            normals=None if pred.normals is None else pred.normals @ rotation.T,
        ),
        best_angle,
    )
