"""Triplane implicit field: three orthogonal feature planes plus small MLP
heads for density, color, signed distance, grid deformation, and blend
weights.

A query point in [-1,1]^3 is projected onto the xy/xz/yz planes; the three
bilinear samples are summed into one feature vector (sum keeps the channel
count fixed) and fed through per-quantity MLP heads.  Every computation
runs on :mod:`meshfit.autodiff` tensors, so it is differentiable with
respect to plane entries, head parameters, and the query point itself.

The density-to-SDF handoff reinitializes the SDF head from a fitted
density head by negating the final layer and shifting its bias by the
iso-level, so the fresh SDF is exactly the negated, threshold-shifted
pre-activation density.

Checkpoint format ("TPF1"): magic bytes, little-endian u32 plane
resolution and channel count, per-head layer counts and layer sizes, then
every parameter as little-endian float64 in declared order (planes xy,
xz, yz, then heads density/color/sdf/deformation/weights, weights before
biases per layer).  The activation tag is not serialized; readers use the
module default.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TAU = 10.0
WEIGHT_EPS = 1e-3
CELL_EDGE_COUNT = 12  # edges of a lattice cell, one blend weight each

# name -> output dimension; weights = 1 vertex weight + 12 edge blends
HEAD_SPECS = {
    "density": 1,
    "color": 3,
    "sdf": 1,
    "deformation": 3,
    "weights": 1 + CELL_EDGE_COUNT,
}
HEAD_ORDER = ("density", "color", "sdf", "deformation", "weights")
DEFAULT_ACTIVATION = "softplus"

_ACTIVATIONS = {"softplus": ad.softplus, "tanh": ad.tanh}


class MlpHead:
    """Plain fully connected stack; returns raw pre-activation outputs."""

    def __init__(self, weights, biases, activation=DEFAULT_ACTIVATION):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights/biases must be non-empty and parallel")
        for w, b, w_next in zip(weights, biases, weights[1:] + [None]):
            if w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
                raise ValueError("inconsistent layer shapes")
            if w_next is not None and w_next.data.shape[0] != w.data.shape[1]:
                raise ValueError("layer shapes do not chain")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = list(weights)
        self.biases = list(biases)
        self.activation = activation

    @classmethod
    def create(cls, in_dim, out_dim, hidden=64, depth=2, rng=None, init_scale=1.0):
        """`depth` hidden layers of `hidden` units, small uniform init."""
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden] * depth + [out_dim]
        weights, biases = [], []
        for d_in, d_out in zip(dims, dims[1:]):
            bound = init_scale / np.sqrt(d_in)
            weights.append(ad.parameter(rng.uniform(-bound, bound, size=(d_in, d_out))))
            biases.append(ad.parameter(np.zeros(d_out)))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, in_dim, out_dim, hidden=64, depth=2):
        dims = [in_dim] + [hidden] * depth + [out_dim]
        return cls(
            [ad.parameter(np.zeros((a, b))) for a, b in zip(dims, dims[1:])],
            [ad.parameter(np.zeros(b)) for b in dims[1:]],
        )

    def layer_sizes(self):
        return [(w.data.shape[0], w.data.shape[1]) for w in self.weights]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __call__(self, features: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = features
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(ad.add(ad.matmul(h, w), b))
        return ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1])

    def copy(self) -> "MlpHead":
        return MlpHead(
            [ad.parameter(w.data.copy()) for w in self.weights],
            [ad.parameter(b.data.copy()) for b in self.biases],
            self.activation,
        )


class TriplaneField:
    """Learnable triplane feature volume with MLP decoding heads."""

    def __init__(
        self,
        resolution: int = 64,
        channels: int = 40,
        hidden: int = 64,
        depth: int = 2,
        seed: int = 0,
        plane_init: float = 1e-2,
        head_init: float = 1.0,
        planes=None,
        heads=None,
    ):
        if resolution < 2:
            raise ValueError("plane resolution must be at least 2")
        self.resolution = resolution
        self.channels = channels
        if planes is not None:
            self.planes = list(planes)
            for p in self.planes:
                if p.data.shape != (resolution, resolution, channels):
                    raise ValueError("plane shape mismatch")
        else:
            rng = np.random.default_rng(seed)
            self.planes = [
                ad.parameter(
                    rng.uniform(
                        -plane_init, plane_init, size=(resolution, resolution, channels)
                    )
                )
                for _ in range(3)
            ]
        if heads is not None:
            self.heads = dict(heads)
            for name in HEAD_ORDER:
                if name not in self.heads:
                    raise ValueError(f"missing head {name!r}")
        else:
            rng = np.random.default_rng(seed + 1)
            self.heads = {
                name: MlpHead.create(
                    channels, HEAD_SPECS[name], hidden, depth, rng, head_init
                )
                for name in HEAD_ORDER
            }

    def parameters(self):
        out = list(self.planes)
        for name in HEAD_ORDER:
            out.extend(self.heads[name].parameters())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "TriplaneField":
        return TriplaneField(
            resolution=self.resolution,
            channels=self.channels,
            planes=[ad.parameter(p.data.copy()) for p in self.planes],
            heads={name: head.copy() for name, head in self.heads.items()},
        )

    # Convenience methods so duck-typed stand-ins can plug into renderers.
    def query_density(self, x):
        return query_density(self, x)

    def query_color(self, x):
        return query_color(self, x)

    def query_sdf(self, x):
        return query_sdf(self, x)

    def query_deformation(self, x):
        return query_deformation(self, x)

    def query_weights(self, x):
        return query_weights(self, x)


def _prep_points(x):
    """Promote input to an (N, 3) tensor; report whether it was a single point."""
    t = ad.astensor(x)
    if t.data.ndim == 1:
        if t.data.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {t.data.shape}")
        return ad.reshape(t, (1, 3)), True
    if t.data.ndim != 2 or t.data.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {t.data.shape}")
    return t, False


def _bilinear(plane: Tensor, u: Tensor, v: Tensor, resolution: int) -> Tensor:
    """Bilinear sample of an (R, R, C) plane at continuous coords in [-1,1]."""
    r1 = resolution - 1
    gu = ad.mul(ad.add(u, 1.0), 0.5 * r1)
    gv = ad.mul(ad.add(v, 1.0), 0.5 * r1)
    iu = np.clip(np.floor(gu.data).astype(np.intp), 0, resolution - 2)
    iv = np.clip(np.floor(gv.data).astype(np.intp), 0, resolution - 2)
    tu = ad.reshape(ad.add(gu, -iu.astype(np.float64)), (-1, 1))
    tv = ad.reshape(ad.add(gv, -iv.astype(np.float64)), (-1, 1))
    one_tu = ad.add(1.0, ad.mul(tu, -1.0))
    one_tv = ad.add(1.0, ad.mul(tv, -1.0))
    flat = ad.reshape(plane, (resolution * resolution, plane.data.shape[2]))
    base = iu * resolution + iv
    c00 = ad.take(flat, base)
    c10 = ad.take(flat, base + resolution)
    c01 = ad.take(flat, base + 1)
    c11 = ad.take(flat, base + resolution + 1)
    return ad.add(
        ad.add(ad.mul(c00, ad.mul(one_tu, one_tv)), ad.mul(c10, ad.mul(tu, one_tv))),
        ad.add(ad.mul(c01, ad.mul(one_tu, tv)), ad.mul(c11, ad.mul(tu, tv))),
    )


def sample_triplane(field: TriplaneField, x) -> Tensor:
    """Sum of the three plane samples at the (clamped) query points."""
    pts, single = _prep_points(x)
    pts = ad.clip(pts, -1.0, 1.0)
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    res = field.resolution
    feat = ad.add(
        ad.add(
            _bilinear(field.planes[0], px, py, res),
            _bilinear(field.planes[1], px, pz, res),
        ),
        _bilinear(field.planes[2], py, pz, res),
    )
    return ad.reshape(feat, (field.channels,)) if single else feat


def _head_raw(field: TriplaneField, name: str, x):
    pts, single = _prep_points(x)
    raw = field.heads[name](sample_triplane(field, pts))
    return raw, single


def _shaped(raw: Tensor, single: bool, out_dim: int) -> Tensor:
    if out_dim == 1:
        return ad.reshape(raw, ()) if single else ad.reshape(raw, (-1,))
    return ad.reshape(raw, (out_dim,)) if single else raw


def query_density_raw(field, x) -> Tensor:
    """Pre-activation density output d_raw (the quantity tau thresholds)."""
    raw, single = _head_raw(field, "density", x)
    return _shaped(raw, single, 1)


def query_density(field, x) -> Tensor:
    raw, single = _head_raw(field, "density", x)
    return ad.softplus(_shaped(raw, single, 1))


def query_color(field, x) -> Tensor:
    raw, single = _head_raw(field, "color", x)
    return ad.sigmoid(_shaped(raw, single, 3))


def query_sdf(field, x) -> Tensor:
    raw, single = _head_raw(field, "sdf", x)
    return _shaped(raw, single, 1)


def query_deformation(field, x) -> Tensor:
    raw, single = _head_raw(field, "deformation", x)
    return ad.mul(ad.tanh(_shaped(raw, single, 3)), 0.5)


def query_weights(field, x) -> Tensor:
    raw, single = _head_raw(field, "weights", x)
    return ad.add(ad.softplus(_shaped(raw, single, HEAD_SPECS["weights"])), WEIGHT_EPS)


# -- gradient-free value sweeps ------------------------------------------------
#
# Plain-array twins of the query functions above, mirroring the taped
# computation operation for operation so the results are bitwise equal.
# They exist for bulk evaluation (dense lattice sweeps) where building a
# tape would cost far more memory than the values themselves; work is
# chunked so peak memory stays bounded at any point count.

VALUE_CHUNK = 65536

_VALUE_ACTIVATIONS = {
    "softplus": ad.softplus_values,
    "tanh": np.tanh,
}


def _bilinear_values(plane, u, v, resolution):
    r1 = resolution - 1
    gu = (u + 1.0) * (0.5 * r1)
    gv = (v + 1.0) * (0.5 * r1)
    iu = np.clip(np.floor(gu).astype(np.intp), 0, resolution - 2)
    iv = np.clip(np.floor(gv).astype(np.intp), 0, resolution - 2)
    tu = (gu + -iu.astype(np.float64)).reshape(-1, 1)
    tv = (gv + -iv.astype(np.float64)).reshape(-1, 1)
    one_tu = 1.0 + tu * -1.0
    one_tv = 1.0 + tv * -1.0
    flat = plane.reshape(resolution * resolution, plane.shape[2])
    base = iu * resolution + iv
    c00, c10 = flat[base], flat[base + resolution]
    c01, c11 = flat[base + 1], flat[base + resolution + 1]
    return (c00 * (one_tu * one_tv) + c10 * (tu * one_tv)) + (
        c01 * (one_tu * tv) + c11 * (tu * tv)
    )


def sample_triplane_values(field, pts: np.ndarray) -> np.ndarray:
    """Value-only twin of sample_triplane for (N, 3) points."""
    pts = np.clip(np.asarray(pts, dtype=np.float64).reshape(-1, 3), -1.0, 1.0)
    res = field.resolution
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    return (
        _bilinear_values(field.planes[0].data, px, py, res)
        + _bilinear_values(field.planes[1].data, px, pz, res)
    ) + _bilinear_values(field.planes[2].data, py, pz, res)


def _head_values(field, name: str, features: np.ndarray) -> np.ndarray:
    head = field.heads[name]
    act = _VALUE_ACTIVATIONS[head.activation]
    h = features
    for w, b in zip(head.weights[:-1], head.biases[:-1]):
        h = act(h @ w.data + b.data)
    return h @ head.weights[-1].data + head.biases[-1].data


def _finish_values(name: str, raw: np.ndarray) -> np.ndarray:
    if name in ("sdf", "density_raw"):
        return raw.reshape(-1)
    if name == "density":
        return ad.softplus_values(raw.reshape(-1))
    if name == "color":
        return _sigmoid_values(raw)
    if name == "deformation":
        return np.tanh(raw) * 0.5
    if name == "weights":
        return ad.softplus_values(raw) + WEIGHT_EPS
    raise ValueError(f"unknown head {name!r}")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    return ad._sigmoid(x)


def query_values(field, pts, names=("sdf",), chunk: int = VALUE_CHUNK) -> dict:
    """Post-activation head values without gradient tracking.

    `names` may list any of density, density_raw, color, sdf,
    deformation, weights; the triplane is sampled once per chunk and
    shared across heads.  Returns {name: array}, equal to the matching
    query_* results (bitwise for inputs up to one chunk; within float
    rounding beyond, where BLAS kernel choice depends on batch shape).
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pieces = {name: [] for name in names}
    for lo in range(0, len(pts), chunk):
        feats = sample_triplane_values(field, pts[lo : lo + chunk])
        for name in names:
            head = "density" if name == "density_raw" else name
            pieces[name].append(_finish_values(name, _head_values(field, head, feats)))
    return {
        name: np.concatenate(chunks) if chunks else np.zeros(0)
        for name, chunks in pieces.items()
    }


def query_values_grid(field, xs, ys, zs, names=("sdf",), slab_points: int = 262144) -> dict:
    """query_values over the product grid {xs}x{ys}x{zs}, x-major order.

    A lattice point's feature is the sum of three plane samples, each
    depending on only two coordinates, so each plane is sampled once per
    coordinate PAIR and broadcast along the remaining axis.  This makes
    dense sweeps (grid builds) cost O(n^2) plane gathers instead of
    O(n^3).  Heads still run per point, sliced into x-slabs of roughly
    `slab_points` points to bound peak memory.
    """
    xs, ys, zs = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (xs, ys, zs))
    res = field.resolution

    def pair_field(plane, a, b):
        u = np.repeat(np.clip(a, -1.0, 1.0), b.size)
        v = np.tile(np.clip(b, -1.0, 1.0), a.size)
        return _bilinear_values(plane.data, u, v, res).reshape(a.size, b.size, -1)

    bxy = pair_field(field.planes[0], xs, ys)
    bxz = pair_field(field.planes[1], xs, zs)
    byz = pair_field(field.planes[2], ys, zs)

    n_pts = xs.size * ys.size * zs.size
    out = {
        name: np.empty(
            n_pts
            if name in ("sdf", "density", "density_raw")
            else (n_pts, HEAD_SPECS[name])
        )
        for name in names
    }
    rows_per_x = ys.size * zs.size
    step = max(1, slab_points // max(rows_per_x, 1))
    for i0 in range(0, xs.size, step):
        i1 = min(i0 + step, xs.size)
        feats = (bxy[i0:i1, :, None, :] + bxz[i0:i1, None, :, :]) + byz[None, :, :, :]
        feats = feats.reshape(-1, field.channels)
        for name in names:
            head = "density" if name == "density_raw" else name
            vals = _finish_values(name, _head_values(field, head, feats))
            out[name][i0 * rows_per_x : i1 * rows_per_x] = vals
    return out


def init_sdf_from_density(field: TriplaneField, tau: float = DEFAULT_TAU):
    """New field whose SDF head is the negated, tau-shifted density head.

    The copied trunk plus last layer (w, b) -> (-w, tau - b) make the raw
    SDF output equal -(d_raw - tau) with the same arithmetic, so the
    iso-surface of the density at level tau becomes the SDF zero set.
    """
    density = field.heads["density"]
    sdf = field.heads["sdf"]
    if density.layer_sizes() != sdf.layer_sizes():
        raise ValueError(
            "sdf head architecture differs from density head: "
            f"{sdf.layer_sizes()} vs {density.layer_sizes()}"
        )
    out = field.copy()
    new_sdf = density.copy()
    new_sdf.weights[-1] = ad.parameter(-density.weights[-1].data)
    new_sdf.biases[-1] = ad.parameter(tau - density.biases[-1].data)
    out.heads["sdf"] = new_sdf
    return out


backprop = ad.backprop  # gradient extraction lives with the tape


# -- checkpoint io ---------------------------------------------------------

_MAGIC = b"TPF1"


def write_checkpoint(field: TriplaneField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", field.resolution, field.channels))
        for name in HEAD_ORDER:
            sizes = field.heads[name].layer_sizes()
            fh.write(struct.pack("<I", len(sizes)))
            for d_in, d_out in sizes:
                fh.write(struct.pack("<II", d_in, d_out))
        for p in field.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read_exact(fh, count: int) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError("checkpoint truncated")
    return buf


def read_checkpoint(path) -> TriplaneField:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a TPF1 checkpoint")
        resolution, channels = struct.unpack("<II", _read_exact(fh, 8))
        head_sizes = {}
        for name in HEAD_ORDER:
            (n_layers,) = struct.unpack("<I", _read_exact(fh, 4))
            head_sizes[name] = [
                struct.unpack("<II", _read_exact(fh, 8)) for _ in range(n_layers)
            ]

        def read_array(shape):
            n = int(np.prod(shape))
            return np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(shape)

        planes = [
            ad.parameter(read_array((resolution, resolution, channels)))
            for _ in range(3)
        ]
        heads = {}
        for name in HEAD_ORDER:
            sizes = head_sizes[name]
            if not sizes or sizes[0][0] != channels:
                raise ValueError(f"head {name!r} does not accept {channels} channels")
            if sizes[-1][1] != HEAD_SPECS[name]:
                raise ValueError(f"head {name!r} output size {sizes[-1][1]} is wrong")
            weights, biases = [], []
            for s in sizes:  # file stores per-layer W then b
                weights.append(ad.parameter(read_array(s)))
                biases.append(ad.parameter(read_array((s[1],))))
            heads[name] = MlpHead(weights, biases)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return TriplaneField(
        resolution=resolution, channels=channels, planes=planes, heads=heads
    )
