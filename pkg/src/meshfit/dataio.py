"""Scene descriptions, ground-truth rendering, file formats, manifest filter.

The synthetic scenes are unions of primitives with exact unit-Lipschitz
signed distance functions and analytic gradients, so a sphere tracer can
render reference rgb/depth/normal/mask buffers against which the
differentiable renderers are checked.  Meshes travel as ASCII OBJ,
scalar channels as PFM (lossless float32), rgb as binary PPM.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .core3d import pixel_rays, full_frame_pixels
from .flexigrid import Mesh
from .volren import ImageBuffer

SPHERE_TRACE_EPS = 1e-6
SPHERE_TRACE_STEPS = 256
MIN_VIEW_COVERAGE = 0.10
LOW_QUALITY_TAGS = ("lowpoly",)


# -- primitives --------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    """One shape with an exact SDF, analytic gradient, and flat albedo."""

    kind: str
    params: tuple
    center: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if any(p <= 0 for p in self.params):
            raise ValueError(f"{self.kind} dimensions must be positive")
        if len(self.albedo) != 3 or not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must be rgb in [0,1]")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - self.params[0]
        if self.kind == "box":
            half = np.asarray(self.params, dtype=np.float64)
            q = np.abs(p) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        ring, tube = self.params
        q = np.stack([np.hypot(p[:, 0], p[:, 1]) - ring, p[:, 2]], axis=1)
        return np.linalg.norm(q, axis=1) - tube

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Unit gradient of the SDF (surface normal direction) per point."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center
        if self.kind == "sphere":
            norm = np.linalg.norm(p, axis=1, keepdims=True)
            return p / np.maximum(norm, 1e-30)
        if self.kind == "box":
            half = np.asarray(self.params, dtype=np.float64)
            q = np.abs(p) - half
            grad = np.where(q > 0.0, q, 0.0) * np.sign(p)
            outside = np.linalg.norm(grad, axis=1, keepdims=True)
            # interior points fall back to the closest face's axis
            face = np.argmax(q, axis=1)
            interior = np.zeros_like(grad)
            rows = np.arange(len(p))
            interior[rows, face] = np.where(np.sign(p[rows, face]) == 0, 1.0, np.sign(p[rows, face]))
            use_interior = outside[:, 0] <= 0.0
            grad = np.where(use_interior[:, None], interior, grad / np.maximum(outside, 1e-30))
            return grad
        ring, _ = self.params
        rho = np.maximum(np.hypot(p[:, 0], p[:, 1]), 1e-30)
        q = np.stack([rho - ring, p[:, 2]], axis=1)
        qn = np.maximum(np.linalg.norm(q, axis=1), 1e-30)
        return np.stack(
            [
                q[:, 0] / qn * p[:, 0] / rho,
                q[:, 0] / qn * p[:, 1] / rho,
                q[:, 1] / qn,
            ],
            axis=1,
        )


@dataclass(frozen=True)
class SceneSpec:
    """Union of primitives, each carrying its own albedo."""

    primitives: tuple = ()

    def sdf(self, points: np.ndarray) -> np.ndarray:
        if not self.primitives:
            return np.full(np.asarray(points).reshape(-1, 3).shape[0], np.inf)
        return np.min([prim.sdf(points) for prim in self.primitives], axis=0)

    def nearest_primitive(self, points: np.ndarray) -> np.ndarray:
        return np.argmin([prim.sdf(points) for prim in self.primitives], axis=0)

    def normals(self, points: np.ndarray) -> np.ndarray:
        which = self.nearest_primitive(points)
        out = np.zeros((len(which), 3))
        for i, prim in enumerate(self.primitives):
            rows = which == i
            if rows.any():
                out[rows] = prim.gradient(np.asarray(points).reshape(-1, 3)[rows])
        return out

    def albedos(self, points: np.ndarray) -> np.ndarray:
        which = self.nearest_primitive(points)
        table = np.array([prim.albedo for prim in self.primitives])
        return table[which]


_SCENE_TOKEN = re.compile(
    r"^(?P<kind>sphere|box|torus):(?P<params>[0-9.eE+-]+(?:,[0-9.eE+-]+)*)"
    r"(?:@(?P<center>[0-9.eE+-]+,[0-9.eE+-]+,[0-9.eE+-]+))?"
    r"(?:#(?P<albedo>[0-9a-fA-F]{6}))?$"
)

_PARAM_COUNT = {"sphere": (1,), "box": (1, 3), "torus": (2,)}


def parse_scene(text: str) -> SceneSpec:
    """Parse 'kind:dims[@cx,cy,cz][#rrggbb]' terms joined by '+'.

    Examples: 'sphere:0.6', 'sphere:0.5@0,0,0#ff0000+box:0.25@0.5,0,0#0000ff',
    'torus:0.6,0.2'.  A box takes one half-extent (cube) or three.
    """
    primitives = []
    for term in text.split("+"):
        match = _SCENE_TOKEN.match(term.strip())
        if match is None:
            raise ValueError(f"cannot parse scene term {term!r}")
        kind = match.group("kind")
        params = tuple(float(v) for v in match.group("params").split(","))
        if len(params) not in _PARAM_COUNT[kind]:
            raise ValueError(
                f"{kind} takes {' or '.join(map(str, _PARAM_COUNT[kind]))} "
                f"dimension(s), got {len(params)}"
            )
        if kind == "box" and len(params) == 1:
            params = params * 3
        center = (0.0, 0.0, 0.0)
        if match.group("center"):
            center = tuple(float(v) for v in match.group("center").split(","))
        albedo = (0.8, 0.8, 0.8)
        if match.group("albedo"):
            hexes = match.group("albedo")
            albedo = tuple(int(hexes[i : i + 2], 16) / 255.0 for i in (0, 2, 4))
        primitives.append(Primitive(kind, params, center, albedo))
    return SceneSpec(tuple(primitives))


def scene_to_text(scene: SceneSpec) -> str:
    terms = []
    for prim in scene.primitives:
        dims = ",".join(f"{v:g}" for v in prim.params)
        term = f"{prim.kind}:{dims}"
        if any(c != 0.0 for c in prim.center):
            term += "@" + ",".join(f"{v:g}" for v in prim.center)
        term += "#" + "".join(f"{round(a * 255):02x}" for a in prim.albedo)
        terms.append(term)
    return "+".join(terms)


# -- ground-truth rendering ---------------------------------------------------


def sphere_trace(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """March each ray until |sdf| < eps or the step budget runs out.

    Returns (hit mask, ray parameter t).  The march starts at t = 0 and
    gives up beyond the scene's far bound (all geometry sits inside the
    unit sphere).
    """
    n = len(origins)
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    t_max = np.linalg.norm(origins, axis=1) + 2.0
    for _ in range(SPHERE_TRACE_STEPS):
        if not alive.any():
            break
        pts = origins[alive] + t[alive, None] * dirs[alive]
        s = scene.sdf(pts)
        converged = np.abs(s) < SPHERE_TRACE_EPS
        idx = np.flatnonzero(alive)
        hit[idx[converged]] = True
        t[idx] += np.where(converged, 0.0, s)
        alive[idx] = ~converged & (t[idx] <= t_max[idx])
    return hit, t


def render_gt(scene: SceneSpec, poses, width: int | None = None, height: int | None = None):
    """Sphere-traced reference buffers (unlit albedo, white background)."""
    buffers = []
    for pose in poses:
        w = pose.width if width is None else width
        h = pose.height if height is None else height
        px, py = full_frame_pixels(w, h)
        origins, dirs, _, _ = pixel_rays(pose, px, py)
        hit, t = sphere_trace(scene, origins, dirs)
        buf = ImageBuffer.background(w, h)
        if hit.any():
            pts = origins[hit] + t[hit, None] * dirs[hit]
            rgb = buf.rgb.reshape(-1, 3)
            rgb[hit] = scene.albedos(pts)
            normal = buf.normal.reshape(-1, 3)
            normal[hit] = scene.normals(pts)
            depth = buf.depth.reshape(-1)
            depth[hit] = t[hit] * (dirs[hit] @ np.asarray(pose.forward()))
            mask = buf.mask.reshape(-1)
            mask[hit] = 1.0
        buffers.append(buf)
    return buffers


# -- OBJ ----------------------------------------------------------------------


def write_obj(mesh: Mesh, path) -> None:
    """ASCII OBJ; vertex lines carry rgb when the mesh has colors."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, v in enumerate(mesh.vertices):
            line = f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
            if mesh.colors is not None:
                c = mesh.colors[i]
                line += f" {c[0]:.9g} {c[1]:.9g} {c[2]:.9g}"
            fh.write(line + "\n")
        for tri in mesh.triangles:
            fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def read_obj(path) -> Mesh:
    vertices, colors, faces = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                values = parts[1:]
                if len(values) not in (3, 6):
                    raise ValueError(
                        f"{path}: line {lineno}: vertex needs 3 or 6 numbers"
                    )
                try:
                    numbers = [float(v) for v in values]
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
                vertices.append(numbers[:3])
                if len(numbers) == 6:
                    colors.append(numbers[3:])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(
                        f"{path}: line {lineno}: only triangle faces are supported"
                    )
                try:
                    idx = [int(v.split("/")[0]) for v in parts[1:]]
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
                if any(i < 1 for i in idx):
                    raise ValueError(
                        f"{path}: line {lineno}: face indices are 1-based"
                    )
                faces.append([i - 1 for i in idx])
    if colors and len(colors) != len(vertices):
        raise ValueError(f"{path}: some vertices have colors and some do not")
    return Mesh(
        vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3),
        triangles=np.array(faces, dtype=np.int64).reshape(-1, 3),
        colors=np.array(colors, dtype=np.float64) if colors else None,
    )


# -- PFM ----------------------------------------------------------------------


def write_pfm(data: np.ndarray, path) -> None:
    """Little-endian float32 PFM; 'Pf' for (H,W), 'PF' for (H,W,3).

    Rows are stored bottom-up with a scale field of -1.0, per convention.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM stores (H,W) or (H,W,3) data, got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic_end = blob.index(b"\n")
        dims_end = blob.index(b"\n", magic_end + 1)
        scale_end = blob.index(b"\n", dims_end + 1)
    except ValueError:
        raise ValueError(f"{path}: truncated PFM header") from None
    magic = blob[:magic_end]
    if magic not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: byte 0: bad magic {magic!r}")
    try:
        w, h = map(int, blob[magic_end + 1 : dims_end].split())
        scale = float(blob[dims_end + 1 : scale_end])
    except ValueError:
        raise ValueError(f"{path}: byte {magic_end + 1}: bad dimensions/scale") from None
    channels = 3 if magic == b"PF" else 1
    count = w * h * channels
    payload = blob[scale_end + 1 :]
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: byte {scale_end + 1}: expected {4 * count} payload bytes, "
            f"got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(
        (h, w) if channels == 1 else (h, w, 3)
    )
    return data[::-1].astype(np.float32)


# -- PPM ----------------------------------------------------------------------


def write_ppm(rgb: np.ndarray, path) -> None:
    """Binary 8-bit P6; values quantized by round(255 * clamp(v, 0, 1))."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM stores (H,W,3) rgb, got {rgb.shape}")
    quantized = np.rint(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        fh.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic_end = blob.index(b"\n")
        dims_end = blob.index(b"\n", magic_end + 1)
        maxval_end = blob.index(b"\n", dims_end + 1)
    except ValueError:
        raise ValueError(f"{path}: truncated PPM header") from None
    if blob[:magic_end] != b"P6":
        raise ValueError(f"{path}: byte 0: bad magic {blob[:magic_end]!r}")
    try:
        w, h = map(int, blob[magic_end + 1 : dims_end].split())
        maxval = int(blob[dims_end + 1 : maxval_end])
    except ValueError:
        raise ValueError(f"{path}: byte {magic_end + 1}: bad dimensions") from None
    if maxval != 255:
        raise ValueError(f"{path}: byte {dims_end + 1}: only maxval 255 is supported")
    payload = blob[maxval_end + 1 :]
    if len(payload) != w * h * 3:
        raise ValueError(
            f"{path}: byte {maxval_end + 1}: expected {w * h * 3} payload bytes, "
            f"got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


# -- manifest filter ----------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    has_texture: bool = True
    caption: str | None = None
    tags: list = dataclass_field(default_factory=list)
    n_components: int = 1
    coverages: list | None = None

    def __post_init__(self):
        if self.coverages is not None:
            if len(self.coverages) == 0:
                raise ValueError(f"{self.id}: coverage list must be non-empty")
            if any(not 0.0 <= c <= 1.0 for c in self.coverages):
                raise ValueError(f"{self.id}: coverages must lie in [0,1]")

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        return cls(
            id=obj["id"],
            has_texture=obj.get("has_texture", True),
            caption=obj.get("caption"),
            tags=list(obj.get("tags", [])),
            n_components=obj.get("n_components", 1),
            coverages=obj.get("coverages"),
        )

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "has_texture": self.has_texture,
            "caption": self.caption,
            "tags": list(self.tags),
            "n_components": self.n_components,
        }
        if self.coverages is not None:
            out["coverages"] = list(self.coverages)
        return out


def _normalize_tag(tag: str) -> str:
    return re.sub(r"[^0-9a-z]", "", tag.lower())


def rejection_reason(entry: ManifestEntry) -> str | None:
    """First matching rejection rule, or None for a keeper."""
    if not entry.has_texture:
        return "rule-i"
    if entry.coverages is not None and min(entry.coverages) < MIN_VIEW_COVERAGE:
        return "rule-ii"
    if entry.n_components > 1:
        return "rule-iii"
    if not entry.caption:
        return "rule-iv"
    if any(_normalize_tag(t) in LOW_QUALITY_TAGS for t in entry.tags):
        return "rule-v"
    return None


def filter_manifest(entries):
    """Partition entries into (kept, [(entry, reason), ...])."""
    kept, rejected = [], []
    for entry in entries:
        reason = rejection_reason(entry)
        if reason is None:
            kept.append(entry)
        else:
            rejected.append((entry, reason))
    return kept, rejected


def load_manifest(path) -> list:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    return [ManifestEntry.from_json(obj) for obj in data]


def save_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([e.to_json() for e in entries], fh, indent=2)
        fh.write("\n")
