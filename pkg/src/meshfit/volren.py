"""Differentiable volume rendering of the triplane density/color field.

Rays march uniformly between the scene-box entry and exit of each pixel
ray; the standard exponential transmittance model turns density into
compositing weights; the residual transmittance is composited against a
white background.  Per-ray stratified jitter, when enabled, is keyed on
the absolute pixel index through a counter-based hash, so a patch render
reproduces exactly the samples the full-frame render would use and the
result cannot depend on how work is split across threads.

Depth is the weight-averaged sample distance along the ray, a
diagnostic channel only; rasterized depth is the one supervision uses.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core3d import CameraPose, full_frame_pixels, pixel_rays

MASK_EPS = 1e-8
DEFAULT_SAMPLES_PER_RAY = 96


@dataclass
class ImageBuffer:
    """Render target: rgb, z-depth, unit normals, and coverage mask."""

    width: int
    height: int
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        if self.rgb.shape != shape + (3,) or self.normal.shape != shape + (3,):
            raise ValueError("rgb/normal must be (H, W, 3)")
        if self.depth.shape != shape or self.mask.shape != shape:
            raise ValueError("depth/mask must be (H, W)")

    @classmethod
    def background(cls, width: int, height: int) -> "ImageBuffer":
        return cls(
            width=width,
            height=height,
            rgb=np.ones((height, width, 3)),
            depth=np.zeros((height, width)),
            normal=np.zeros((height, width, 3)),
            mask=np.zeros((height, width)),
        )

    def crop(self, patch) -> "ImageBuffer":
        x0, y0, w, h = patch
        if x0 < 0 or y0 < 0 or w < 1 or h < 1 or x0 + w > self.width or y0 + h > self.height:
            raise ValueError(f"patch {patch} outside {self.width}x{self.height}")
        return ImageBuffer(
            width=w,
            height=h,
            rgb=self.rgb[y0 : y0 + h, x0 : x0 + w].copy(),
            depth=self.depth[y0 : y0 + h, x0 : x0 + w].copy(),
            normal=self.normal[y0 : y0 + h, x0 : x0 + w].copy(),
            mask=self.mask[y0 : y0 + h, x0 : x0 + w].copy(),
        )


@dataclass
class RenderResult:
    """Tape-carrying render: flat per-pixel tensors plus the patch size."""

    width: int
    height: int
    rgb: Tensor
    mask: Tensor
    depth: Tensor
    normal: Tensor | None = dataclass_field(default=None)

    def to_buffer(self) -> ImageBuffer:
        h, w = self.height, self.width
        normal = (
            np.zeros((h, w, 3))
            if self.normal is None
            else self.normal.data.reshape(h, w, 3).copy()
        )
        return ImageBuffer(
            width=w,
            height=h,
            rgb=self.rgb.data.reshape(h, w, 3).copy(),
            depth=self.depth.data.reshape(h, w).copy(),
            normal=normal,
            mask=self.mask.data.reshape(h, w).copy(),
        )


def _splitmix64(state: np.ndarray) -> np.ndarray:
    z = state + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _stratified_offsets(seed, pixel_index: np.ndarray, n_samples: int) -> np.ndarray:
    """Per-(pixel, sample) offsets in [0,1); 0.5 when jitter is off."""
    if seed is None:
        return np.full((pixel_index.size, n_samples), 0.5)
    key = _splitmix64(np.full(pixel_index.shape, np.uint64(seed) + np.uint64(1)))
    counter = key[:, None] ^ (
        np.uint64(0x9E3779B97F4A7C15)
        * (
            pixel_index.astype(np.uint64)[:, None] * np.uint64(n_samples)
            + np.arange(n_samples, dtype=np.uint64)[None, :]
        )
    )
    return (_splitmix64(counter) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def render_volume_result(
    field,
    camera: CameraPose,
    n_samples: int = DEFAULT_SAMPLES_PER_RAY,
    patch=None,
    jitter_seed=None,
) -> RenderResult:
    """Render onto the tape; `field` needs query_density/query_color."""
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    px, py = full_frame_pixels(camera.width, camera.height, patch)
    origins, dirs, t_near, t_far = pixel_rays(camera, px, py)
    n_pixels = px.size
    if patch is None:
        out_w, out_h = camera.width, camera.height
    else:
        out_w, out_h = patch[2], patch[3]

    hit = t_far > t_near
    rgb = ad.astensor(np.ones((n_pixels, 3)))
    mask = ad.astensor(np.zeros(n_pixels))
    depth = ad.astensor(np.zeros(n_pixels))
    if not hit.any():
        return RenderResult(out_w, out_h, rgb, mask, depth)

    hit_idx = np.flatnonzero(hit)
    o = origins[hit_idx]
    d = dirs[hit_idx]
    tn = t_near[hit_idx]
    dt = (t_far[hit_idx] - tn) / n_samples
    pixel_index = (py * camera.width + px).astype(np.intp)[hit_idx]
    offsets = _stratified_offsets(jitter_seed, pixel_index, n_samples)
    t = tn[:, None] + (np.arange(n_samples) + offsets) * dt[:, None]
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)

    sigma = ad.reshape(field.query_density(pts), (hit_idx.size, n_samples))
    color = ad.reshape(field.query_color(pts), (hit_idx.size, n_samples, 3))

    optical = ad.mul(sigma, dt[:, None])
    alpha = 1.0 - ad.exp(ad.mul(optical, -1.0))
    inclusive = ad.cumsum(optical, axis=1)
    exclusive = ad.concat(
        [ad.astensor(np.zeros((hit_idx.size, 1))), inclusive[:, :-1]], axis=1
    )
    weights = ad.mul(ad.exp(ad.mul(exclusive, -1.0)), alpha)

    mask_hit = ad.tsum(weights, axis=1)
    rgb_hit = ad.add(
        ad.tsum(ad.mul(ad.reshape(weights, (hit_idx.size, n_samples, 1)), color), axis=1),
        ad.reshape(1.0 - mask_hit, (hit_idx.size, 1)),
    )
    depth_hit = ad.div(
        ad.tsum(ad.mul(weights, t), axis=1),
        ad.maximum(mask_hit, MASK_EPS),
    )

    rgb = ad.scatter_set(rgb, hit_idx, rgb_hit)
    mask = ad.scatter_set(mask, hit_idx, mask_hit)
    depth = ad.scatter_set(depth, hit_idx, depth_hit)
    return RenderResult(out_w, out_h, rgb, mask, depth)


def render_volume(
    field,
    camera: CameraPose,
    n_samples: int = DEFAULT_SAMPLES_PER_RAY,
    patch=None,
    jitter_seed=None,
    threads: int = 1,
) -> ImageBuffer:
    """Forward-only render to an ImageBuffer.

    With threads > 1 the rows are rendered in chunks on a thread pool;
    pixels are independent and jitter is keyed by absolute pixel index,
    so the output is bit-identical for any thread count.
    """
    if patch is None:
        patch = (0, 0, camera.width, camera.height)
    x0, y0, w, h = patch
    if threads <= 1 or h == 1:
        return render_volume_result(field, camera, n_samples, patch, jitter_seed).to_buffer()

    rows_per_chunk = max(1, -(-h // threads))
    chunks = [
        (x0, y0 + r, w, min(rows_per_chunk, h - r))
        for r in range(0, h, rows_per_chunk)
    ]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(
                lambda c: render_volume_result(
                    field, camera, n_samples, c, jitter_seed
                ).to_buffer(),
                chunks,
            )
        )
    out = ImageBuffer.background(w, h)
    row = 0
    for part in parts:
        out.rgb[row : row + part.height] = part.rgb
        out.depth[row : row + part.height] = part.depth
        out.normal[row : row + part.height] = part.normal
        out.mask[row : row + part.height] = part.mask
        row += part.height
    return out
