"""Two-stage per-scene fitting: losses, schedule, Adam, and fit loops.

Stage 1 optimizes the field through the volume renderer against rgb and
mask targets.  Stage 2 re-initializes the SDF head from the trained
density head, then optimizes through extraction and rasterization with
added depth, normal, and grid-regularization terms.

Loss aggregation: squared/absolute per-pixel terms are averaged over a
view's pixels (masked terms over the pixels the ground-truth mask
covers), then summed over views, so the loss scale does not depend on
render resolution.  The perceptual term is a plugin slot and contributes
nothing when absent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dataclass_field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flexigrid import ExtractionGrid, Mesh, build_grid, extract_mesh, reg_loss
from .raster import rasterize_result, shade_vertices
from .triplane import DEFAULT_TAU, init_sdf_from_density
from .volren import ImageBuffer, render_volume_result


class FitDiverged(RuntimeError):
    """Raised when a fit hits non-finite values or loses its surface."""


@dataclass(frozen=True)
class LossWeights:
    lambda_lpips: float = 2.0
    lambda_mask: float = 1.0
    lambda_depth: float = 0.5
    lambda_normal: float = 0.2
    lambda_reg: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class FitConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    lr1_start: float = 4.0e-4
    lr1_end: float = 4.0e-5
    lr2_start: float = 4.0e-5
    lr2_end: float = 0.0
    seed: int = 0
    triplane_resolution: int = 64
    triplane_channels: int = 40
    samples_per_ray: int = 96
    grid_size: int = 128
    input_size: int = 320
    stage1_render_size: int = 192
    stage2_render_size: int = 512
    n_input_views: int = 6
    n_supervision_views: int = 4
    views_per_step: int = 1
    tau: float = DEFAULT_TAU
    jitter: bool = False
    weights: LossWeights = dataclass_field(default_factory=LossWeights)

    def __post_init__(self):
        for start, end in ((self.lr1_start, self.lr1_end), (self.lr2_start, self.lr2_end)):
            if not (start >= end >= 0.0):
                raise ValueError("learning rates must satisfy start >= end >= 0")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be >= 0")
        for name in (
            "triplane_resolution",
            "triplane_channels",
            "samples_per_ray",
            "input_size",
            "stage1_render_size",
            "stage2_render_size",
            "n_input_views",
            "n_supervision_views",
            "views_per_step",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")

    @classmethod
    def variant(cls, name: str) -> "FitConfig":
        """The two published model sizes; 'base' is also the default."""
        if name == "base":
            return cls()
        if name == "large":
            return cls(triplane_channels=80, samples_per_ray=128)
        raise ValueError(f"unknown variant {name!r} (expected 'base' or 'large')")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        data = dict(data)
        if "weights" in data and isinstance(data["weights"], dict):
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FitConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def override(self, **kwargs) -> "FitConfig":
        return replace(self, **kwargs)


# -- channel access (works for ImageBuffer and the tape-carrying results) --


def _flat(view, channel, cols):
    value = getattr(view, channel, None)
    if value is None:
        raise ValueError(f"view is missing its {channel} channel")
    if isinstance(value, Tensor):
        return value
    value = np.asarray(value, dtype=np.float64)
    return ad.astensor(value.reshape(-1, cols) if cols else value.reshape(-1))


def _check_dims(pred, ref):
    if (pred.width, pred.height) != (ref.width, ref.height):
        raise ValueError(
            f"prediction is {pred.width}x{pred.height} "
            f"but ground truth is {ref.width}x{ref.height}"
        )


def _tally(terms, key, tensor):
    if terms is not None:
        terms[key] = terms.get(key, 0.0) + float(tensor.data)
    return tensor


def loss_stage1(
    rendered, gt, weights: LossWeights | None = None, perceptual=None, terms=None
) -> Tensor:
    """Per-view rgb MSE + mask MSE (+ optional perceptual plugin), summed.

    Pass a dict as `terms` to collect the weighted per-term totals
    (keys rgb/mask/lpips) alongside the returned scalar.
    """
    weights = weights or LossWeights()
    if len(rendered) != len(gt) or len(rendered) == 0:
        raise ValueError("need equal, non-empty render/ground-truth lists")
    total = None
    for pred, ref in zip(rendered, gt):
        _check_dims(pred, ref)
        rgb_ref = _flat(ref, "rgb", 3).data
        mask_ref = _flat(ref, "mask", 0).data
        term = _tally(terms, "rgb", ad.tmean((_flat(pred, "rgb", 3) - rgb_ref) ** 2.0))
        term = term + _tally(
            terms,
            "mask",
            weights.lambda_mask * ad.tmean((_flat(pred, "mask", 0) - mask_ref) ** 2.0),
        )
        if perceptual is not None:
            term = term + _tally(
                terms,
                "lpips",
                weights.lambda_lpips
                * ad.astensor(
                    perceptual(_flat(pred, "rgb", 3), rgb_ref, pred.width, pred.height)
                ),
            )
        total = term if total is None else total + term
    return total


def loss_stage2(
    rendered, gt, weights: LossWeights | None = None, grid: ExtractionGrid | None = None,
    mesh: Mesh | None = None, terms=None,
) -> Tensor:
    """Stage-1 terms plus masked depth L1, masked normal alignment, and
    the extraction regularizer."""
    weights = weights or LossWeights()
    total = loss_stage1(rendered, gt, weights, perceptual=None, terms=terms)
    for pred, ref in zip(rendered, gt):
        mask_ref = _flat(ref, "mask", 0).data
        covered = np.flatnonzero(mask_ref > 0.5)
        if covered.size == 0:
            continue
        depth_ref = _flat(ref, "depth", 0).data
        normal_ref = _flat(ref, "normal", 3).data
        depth_term = ad.tmean(
            ad.absolute(ad.take(_flat(pred, "depth", 0), covered) - depth_ref[covered])
        )
        align = ad.dot_rows(
            ad.take(_flat(pred, "normal", 3), covered),
            ad.astensor(normal_ref[covered]),
        )
        total = total + _tally(terms, "depth", weights.lambda_depth * depth_term)
        total = total + _tally(
            terms, "normal", weights.lambda_normal * ad.tmean(1.0 - align)
        )
    if grid is not None:
        total = total + _tally(terms, "reg", weights.lambda_reg * reg_loss(grid, mesh))
    return total


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Standard bias-corrected update, in place on the parameter data."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for i, p in enumerate(params):
        g = grads[p] if isinstance(grads, dict) else grads[i]
        if not np.all(np.isfinite(g)):
            raise FitDiverged(f"non-finite gradient in parameter {i}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def _clear_grads(params):
    for p in params:
        p.grad = None


def _check_views(views):
    if len(views) == 0:
        raise ValueError("need at least one (pose, buffer) view")
    for pose, buf in views:
        if (pose.width, pose.height) != (buf.width, buf.height):
            raise ValueError("ground-truth buffer size must match its pose")


def _jitter_seed(config: FitConfig, step: int):
    return (config.seed * 1_000_003 + step) & 0x7FFFFFFF if config.jitter else None


def fit_stage1(field, views, config: FitConfig, perceptual=None, trace=None):
    """Volume-rendering fit of the field against (pose, ImageBuffer) views.

    Each step renders one-or-more randomly chosen views (a random square
    patch when the view is larger than the configured stage-1 render
    size) and takes one Adam step.  Deterministic under a fixed seed.
    """
    _check_views(views)
    rng = np.random.default_rng(config.seed)
    params = field.parameters()
    _clear_grads(params)
    state = adam_init(params)
    for step in range(config.stage1_steps):
        lr = cosine_lr(step, config.stage1_steps, config.lr1_start, config.lr1_end)
        preds, refs = [], []
        for vi in rng.integers(0, len(views), size=config.views_per_step):
            pose, buf = views[vi]
            patch = None
            side = config.stage1_render_size
            if pose.width > side or pose.height > side:
                x0 = int(rng.integers(0, max(pose.width - side, 0) + 1))
                y0 = int(rng.integers(0, max(pose.height - side, 0) + 1))
                patch = (x0, y0, min(side, pose.width), min(side, pose.height))
            preds.append(
                render_volume_result(
                    field, pose, config.samples_per_ray, patch, _jitter_seed(config, step)
                )
            )
            refs.append(buf.crop(patch) if patch else buf)
        terms = {} if trace is not None else None
        loss = loss_stage1(preds, refs, config.weights, perceptual, terms=terms)
        if not np.isfinite(loss.data):
            raise FitDiverged(f"stage-1 loss became non-finite at step {step}")
        grads = ad.backprop(loss, params)
        adam_step(params, grads, state, lr)
        _clear_grads(params)
        if trace is not None:
            trace.append({"step": step, "lr": lr, "total": float(loss.data), **terms})
    return field


def _extract_or_fail(field, grid_size: int, step) -> tuple:
    grid = build_grid(field, grid_size)
    mesh = extract_mesh(grid)
    if len(mesh.triangles) == 0:
        hint = " (is tau inside the density range?)" if step == 0 else ""
        raise FitDiverged(f"iso-surface vanished at step {step}{hint}")
    return grid, mesh


def fit_stage2(field, views, config: FitConfig, tau: float | None = None, trace=None):
    """Mesh-rasterization fit after the SDF handoff; returns (field, mesh).

    The input field is left untouched: the handoff copies it and rewires
    the copy's SDF head from its density head at level tau (defaulting
    to the configured value).
    """
    _check_views(views)
    fitted = init_sdf_from_density(field, config.tau if tau is None else tau)
    rng = np.random.default_rng(config.seed)
    params = fitted.parameters()
    _clear_grads(params)
    state = adam_init(params)
    for step in range(config.stage2_steps):
        lr = cosine_lr(step, config.stage2_steps, config.lr2_start, config.lr2_end)
        grid, mesh = _extract_or_fail(fitted, config.grid_size, step)
        mesh = shade_vertices(fitted, mesh)
        ids = rng.integers(0, len(views), size=config.views_per_step)
        preds = [rasterize_result(mesh, views[vi][0]) for vi in ids]
        refs = [views[vi][1] for vi in ids]
        terms = {} if trace is not None else None
        loss = loss_stage2(preds, refs, config.weights, grid, mesh, terms=terms)
        if not np.isfinite(loss.data):
            raise FitDiverged(f"stage-2 loss became non-finite at step {step}")
        grads = ad.backprop(loss, params)
        adam_step(params, grads, state, lr)
        _clear_grads(params)
        if trace is not None:
            trace.append({"step": step, "lr": lr, "total": float(loss.data), **terms})
    _, mesh = _extract_or_fail(fitted, config.grid_size, config.stage2_steps)
    return fitted, shade_vertices(fitted, mesh)
