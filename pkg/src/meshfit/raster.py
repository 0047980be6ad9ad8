"""Differentiable z-buffer rasterizer for stage-2 mesh supervision.

Triangles are projected through the camera, candidate (pixel, triangle)
pairs are generated from screen bounding boxes, and the nearest surface
per pixel wins with ties broken by the lower triangle index.  Visible
attributes (color, depth, face normal) are then recomputed on the
autodiff tape with perspective-correct barycentric weights, so pixel
values are differentiable in vertex positions and vertex colors.

The tape path additionally antialiases coverage boundaries: for every
adjacent covered/uncovered pixel pair it finds where the visible
triangle's edge crosses the segment between the two pixel centers and
blends rgb and mask across that crossing.  The blend weight lives on
the tape as a function of the edge's screen coordinates, which is what
gives the mask and rgb losses a usable silhouette gradient (without it,
coverage is a constant in the backward pass and the mesh boundary never
feels photometric pressure).  `rasterize` renders crisp buffers for
evaluation; pass ``antialias=False`` to get the same from the tape path.

Depth is z-depth (distance along the camera forward axis), normals are
world-space unit face normals; both are zero on background pixels and
the background color is white.  Depth and normals are never blended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core3d import CameraPose
from .flexigrid import Mesh
from .volren import ImageBuffer

NEAR_CLIP = 1e-6
SCREEN_AREA_EPS = 1e-12
DEFAULT_UNSHADED_GRAY = 0.5


@dataclass
class RasterResult:
    """Flat per-pixel tensors from one rasterization."""

    width: int
    height: int
    rgb: Tensor
    mask: Tensor
    depth: Tensor
    normal: Tensor

    def to_buffer(self) -> ImageBuffer:
        h, w = self.height, self.width
        return ImageBuffer(
            width=w,
            height=h,
            rgb=self.rgb.data.reshape(h, w, 3).copy(),
            depth=self.depth.data.reshape(h, w).copy(),
            normal=self.normal.data.reshape(h, w, 3).copy(),
            mask=self.mask.data.reshape(h, w).copy(),
        )


def shade_vertices(field, mesh: Mesh) -> Mesh:
    """Attach per-vertex rgb from the field's color head.

    Query points are the vertex positions clamped to the field domain.
    When the mesh carries its extraction tape, shading differentiates
    through the sampling locations as well, so color changes induced by
    vertex motion reach the geometry parameters.
    """
    if len(mesh.vertices) == 0:
        return Mesh(
            vertices=mesh.vertices,
            triangles=mesh.triangles,
            colors=np.zeros((0, 3)),
            vertex_tensor=mesh.vertex_tensor,
        )
    points = mesh.vertex_tensor
    if points is None:
        points = np.clip(mesh.vertices, -1.0, 1.0)
    rgb = field.query_color(points)
    return Mesh(
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        colors=rgb.data,
        normals=mesh.normals,
        vertex_tensor=mesh.vertex_tensor,
        color_tensor=rgb,
    )


def _candidate_pairs(sx, sy, z, triangles, width, height):
    """(pixel, triangle) pairs whose pixel center may fall inside the
    triangle, from per-triangle screen bounding boxes."""
    t = triangles
    front = np.all(z[t] > NEAR_CLIP, axis=1)
    tx, ty = sx[t], sy[t]
    area = (tx[:, 1] - tx[:, 0]) * (ty[:, 2] - ty[:, 0]) - (
        ty[:, 1] - ty[:, 0]
    ) * (tx[:, 2] - tx[:, 0])
    ok = front & (np.abs(area) > SCREEN_AREA_EPS)

    x_lo = np.maximum(np.ceil(tx.min(axis=1) - 0.5).astype(np.intp), 0)
    x_hi = np.minimum(np.floor(tx.max(axis=1) - 0.5).astype(np.intp), width - 1)
    y_lo = np.maximum(np.ceil(ty.min(axis=1) - 0.5).astype(np.intp), 0)
    y_hi = np.minimum(np.floor(ty.max(axis=1) - 0.5).astype(np.intp), height - 1)
    nx = np.where(ok, np.maximum(x_hi - x_lo + 1, 0), 0)
    ny = np.where(ok, np.maximum(y_hi - y_lo + 1, 0), 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0, np.intp)

    tri_id = np.repeat(np.arange(len(t), dtype=np.intp), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total, dtype=np.intp) - np.repeat(starts, counts)
    px = x_lo[tri_id] + local % nx[tri_id]
    py = y_lo[tri_id] + local // nx[tri_id]
    return tri_id, px, py


def _visible_pairs(mesh, sx, sy, z, width, height):
    """Resolve the z-buffer: one (triangle, pixel) winner per covered
    pixel, nearest surface first, lower triangle index on ties."""
    tri_id, px, py = _candidate_pairs(sx, sy, z, mesh.triangles, width, height)
    if tri_id.size == 0:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    i0, i1, i2 = mesh.triangles[tri_id].T
    pcx, pcy = px + 0.5, py + 0.5
    w0 = (sx[i2] - sx[i1]) * (pcy - sy[i1]) - (sy[i2] - sy[i1]) * (pcx - sx[i1])
    w1 = (sx[i0] - sx[i2]) * (pcy - sy[i2]) - (sy[i0] - sy[i2]) * (pcx - sx[i2])
    w2 = (sx[i1] - sx[i0]) * (pcy - sy[i0]) - (sy[i1] - sy[i0]) * (pcx - sx[i0])
    area = w0 + w1 + w2
    side = np.sign(area)
    inside = (
        (w0 * side >= 0.0)
        & (w1 * side >= 0.0)
        & (w2 * side >= 0.0)
        & (np.abs(area) > SCREEN_AREA_EPS)
    )
    if not inside.any():
        return np.empty(0, np.intp), np.empty(0, np.intp)
    tri_id, px, py = tri_id[inside], px[inside], py[inside]
    w0, w1, w2, area = w0[inside], w1[inside], w2[inside], area[inside]

    zcand = 1.0 / (
        w0 / area / z[i0[inside]] + w1 / area / z[i1[inside]] + w2 / area / z[i2[inside]]
    )
    pix = py * width + px
    order = np.lexsort((tri_id, zcand, pix))
    _, first = np.unique(pix[order], return_index=True)
    win = order[first]
    return tri_id[win], pix[win]


def _boundary_pairs(cover2d: np.ndarray, horizontal: bool):
    """Pixel index pairs (covered, uncovered) that straddle a coverage
    boundary along one axis, plus the step direction from in to out."""
    height, width = cover2d.shape
    if horizontal:
        change = cover2d[:, :-1] != cover2d[:, 1:]
        ys, xs = np.nonzero(change)
        left = ys * width + xs
        right = left + 1
        in_is_left = cover2d[ys, xs]
        in_pix = np.where(in_is_left, left, right)
        out_pix = np.where(in_is_left, right, left)
        direction = np.where(in_is_left, 1.0, -1.0)
    else:
        change = cover2d[:-1, :] != cover2d[1:, :]
        ys, xs = np.nonzero(change)
        top = ys * width + xs
        bottom = top + width
        in_is_top = cover2d[ys, xs]
        in_pix = np.where(in_is_top, top, bottom)
        out_pix = np.where(in_is_top, bottom, top)
        direction = np.where(in_is_top, 1.0, -1.0)
    return in_pix, out_pix, direction


def _screen_orientations(triangles, sx_data, sy_data) -> np.ndarray:
    """Sign of each triangle's signed screen area (0 for degenerate)."""
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    area2 = (sx_data[b] - sx_data[a]) * (sy_data[c] - sy_data[a]) - (
        sy_data[b] - sy_data[a]
    ) * (sx_data[c] - sx_data[a])
    return np.sign(area2)


def _edge_neighbors(triangles, n_vertices: int) -> np.ndarray:
    """Triangle adjacent to edge slot (tri, k) across edge k, or -1.

    Slot k of a triangle is the edge from its corner k to corner k+1.
    """
    endpoint_a = triangles.ravel()
    endpoint_b = np.roll(triangles, -1, axis=1).ravel()
    lo = np.minimum(endpoint_a, endpoint_b).astype(np.int64)
    hi = np.maximum(endpoint_a, endpoint_b).astype(np.int64)
    key = lo * np.int64(n_vertices) + hi
    order = np.argsort(key, kind="stable")
    neighbor = np.full(key.size, -1, dtype=np.intp)
    paired = np.flatnonzero(key[order][:-1] == key[order][1:])
    # non-manifold edges (>2 faces) pair greedily; leftovers stay open
    paired = paired[np.diff(paired, prepend=-2) > 1]
    s0, s1 = order[paired], order[paired + 1]
    neighbor[s0] = s1 // 3
    neighbor[s1] = s0 // 3
    return neighbor.reshape(-1, 3)


def _silhouette_crossings(
    mesh, start_tri, su_data, sv_data, center_u, center_v, direction,
    orient, neighbor, max_hops: int = 4,
):
    """Trace each inter-center segment from the covered pixel center to
    the mesh silhouette.

    The first edge crossed may be interior (shared by two same-facing
    triangles, e.g. the diagonal of a planar quad); blending there would
    park the apparent boundary short of the real one and make the loss
    jump whenever the pixel's winning triangle flips.  So the trace hops
    across interior edges until it reaches a silhouette edge: an open
    boundary or a front-facing/back-facing pair.  Returns (keep, a_ids,
    b_ids) for the pairs that reached one within `max_hops`.
    """
    n = center_u.size
    cur = start_tri.copy()
    t_floor = np.zeros(n)
    res_a = np.full(n, -1, dtype=np.intp)
    res_b = np.full(n, -1, dtype=np.intp)
    active = np.ones(n, dtype=bool)
    for _ in range(max_hops):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        tris = mesh.triangles[cur[act]]
        corner_a = tris
        corner_b = np.roll(tris, -1, axis=1)
        va = sv_data[corner_a] - center_v[act, None]
        vb = sv_data[corner_b] - center_v[act, None]
        crosses = (va * vb) < 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = va / (va - vb)
            u_hit = su_data[corner_a] + s * (su_data[corner_b] - su_data[corner_a])
            t = (u_hit - center_u[act, None]) * direction[act, None]
        t = np.where(
            crosses & (t > t_floor[act, None] + 1e-12) & (t < 1.0), t, np.inf
        )
        k = np.argmin(t, axis=1)
        rows = np.arange(act.size)
        t_k = t[rows, k]
        ok = np.isfinite(t_k)
        active[act[~ok]] = False

        nb = neighbor[cur[act], k]
        nb_safe = np.where(nb < 0, 0, nb)
        is_sil = (nb < 0) | (orient[cur[act]] * orient[nb_safe] <= 0.0)
        hit = ok & is_sil
        res_a[act[hit]] = corner_a[rows, k][hit]
        res_b[act[hit]] = corner_b[rows, k][hit]
        active[act[hit]] = False

        walk = ok & ~is_sil
        cur[act[walk]] = nb[walk]
        t_floor[act[walk]] = t_k[walk]
    keep = res_a >= 0
    return keep, res_a[keep], res_b[keep]


def _antialias(out, mesh, sx, sy, rgb_vis, tri, pix):
    """Blend rgb and mask across coverage boundaries (tape-carrying)."""
    n_pix = out.width * out.height
    cover2d = np.zeros(n_pix, dtype=bool)
    cover2d[pix] = True
    cover2d = cover2d.reshape(out.height, out.width)
    row_at = np.full(n_pix, -1, dtype=np.intp)
    row_at[pix] = np.arange(pix.size)
    tri_at = np.full(n_pix, -1, dtype=np.intp)
    tri_at[pix] = tri

    orient = _screen_orientations(mesh.triangles, sx.data, sy.data)
    neighbor = _edge_neighbors(mesh.triangles, len(mesh.vertices))

    adj_pix, adj_rgb, adj_mask = [], [], []
    for horizontal in (True, False):
        in_pix, out_pix, direction = _boundary_pairs(cover2d, horizontal)
        if in_pix.size == 0:
            continue
        icx = (in_pix % out.width) + 0.5
        icy = (in_pix // out.width) + 0.5
        if horizontal:
            su, sv, center_u, center_v = sx, sy, icx, icy
        else:
            su, sv, center_u, center_v = sy, sx, icy, icx
        keep, a_ids, b_ids = _silhouette_crossings(
            mesh, tri_at[in_pix], su.data, sv.data,
            center_u, center_v, direction, orient, neighbor,
        )
        if not keep.any():
            continue
        in_pix, out_pix = in_pix[keep], out_pix[keep]
        direction, center_u, center_v = direction[keep], center_u[keep], center_v[keep]

        va = ad.take(sv, a_ids) - center_v
        vb = ad.take(sv, b_ids) - center_v
        s = va / (va - vb)
        u_hit = ad.take(su, a_ids) + s * (ad.take(su, b_ids) - ad.take(su, a_ids))
        t = (u_hit - center_u) * direction
        in_rgb = ad.take(rgb_vis, row_at[in_pix])

        # crossing in the uncovered half: bleed the surface outward;
        # crossing in the covered half: let the background bleed in.
        out_side = t.data > 0.5
        if out_side.any():
            sel = np.flatnonzero(out_side)
            alpha = ad.take(t, sel) - 0.5
            adj_pix.append(out_pix[sel])
            adj_rgb.append(
                1.0 + alpha.reshape(-1, 1) * (ad.take(in_rgb, sel) - 1.0)
            )
            adj_mask.append(alpha)
        if not out_side.all():
            sel = np.flatnonzero(~out_side)
            alpha = 0.5 - ad.take(t, sel)
            adj_pix.append(in_pix[sel])
            adj_rgb.append(
                ad.take(in_rgb, sel) + alpha.reshape(-1, 1) * (1.0 - ad.take(in_rgb, sel))
            )
            adj_mask.append(1.0 - alpha)

    if not adj_pix:
        return
    pix_all = np.concatenate(adj_pix)
    rgb_all = ad.concat(adj_rgb) if len(adj_rgb) > 1 else adj_rgb[0]
    mask_all = ad.concat(adj_mask) if len(adj_mask) > 1 else adj_mask[0]
    # a pixel can straddle boundaries in several directions; keep the
    # first adjustment so the scatter indices stay unique
    uniq, first = np.unique(pix_all, return_index=True)
    out.rgb = ad.scatter_set(out.rgb, uniq, ad.take(rgb_all, first))
    out.mask = ad.scatter_set(out.mask, uniq, ad.take(mask_all, first))


def rasterize_result(
    mesh: Mesh,
    camera: CameraPose,
    width: int | None = None,
    height: int | None = None,
    antialias: bool = True,
) -> RasterResult:
    """Tape-carrying rasterization; empty meshes give pure background."""
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    n_pix = width * height
    rgb = ad.astensor(np.ones((n_pix, 3)))
    mask = ad.astensor(np.zeros(n_pix))
    depth = ad.astensor(np.zeros(n_pix))
    normal = ad.astensor(np.zeros((n_pix, 3)))
    out = RasterResult(width, height, rgb, mask, depth, normal)
    if len(mesh.triangles) == 0:
        return out

    verts = mesh.vertex_tensor if mesh.vertex_tensor is not None else ad.astensor(mesh.vertices)
    if mesh.color_tensor is not None:
        colors = mesh.color_tensor
    elif mesh.colors is not None:
        colors = ad.astensor(mesh.colors)
    else:
        colors = ad.astensor(np.full((len(mesh.vertices), 3), DEFAULT_UNSHADED_GRAY))

    focal = 0.5 * height / math.tan(math.radians(camera.fov_deg) / 2.0)
    cam = ad.matmul(verts - camera.position(), camera.rotation().T)
    z = cam[:, 2]
    sx = cam[:, 0] / z * focal + 0.5 * width
    sy = cam[:, 1] / z * focal + 0.5 * height

    tri, pix = _visible_pairs(mesh, sx.data, sy.data, z.data, width, height)
    if tri.size == 0:
        return out
    i0, i1, i2 = mesh.triangles[tri].T
    pcx = (pix % width) + 0.5
    pcy = (pix // width) + 0.5

    ax, ay, az = ad.take(sx, i0), ad.take(sy, i0), ad.take(z, i0)
    bx, by, bz = ad.take(sx, i1), ad.take(sy, i1), ad.take(z, i1)
    cx, cy, cz = ad.take(sx, i2), ad.take(sy, i2), ad.take(z, i2)
    w0 = (cx - bx) * (pcy - by) - (cy - by) * (pcx - bx)
    w1 = (ax - cx) * (pcy - cy) - (ay - cy) * (pcx - cx)
    w2 = (bx - ax) * (pcy - ay) - (by - ay) * (pcx - ax)
    area = w0 + w1 + w2
    inv0 = w0 / area / az
    inv1 = w1 / area / bz
    inv2 = w2 / area / cz
    zvis = ad.div(1.0, inv0 + inv1 + inv2)
    l0 = (inv0 * zvis).reshape(-1, 1)
    l1 = (inv1 * zvis).reshape(-1, 1)
    l2 = (inv2 * zvis).reshape(-1, 1)
    rgb_vis = l0 * ad.take(colors, i0) + l1 * ad.take(colors, i1) + l2 * ad.take(colors, i2)

    v0, v1, v2 = ad.take(verts, i0), ad.take(verts, i1), ad.take(verts, i2)
    e1, e2 = v1 - v0, v2 - v0
    face = ad.stack(
        [
            e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1],
            e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2],
            e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0],
        ],
        axis=1,
    )
    face = face / ad.norm_rows(face, 1e-30).reshape(-1, 1)

    out.rgb = ad.scatter_set(rgb, pix, rgb_vis)
    out.mask = ad.scatter_set(mask, pix, ad.astensor(np.ones(pix.size)))
    out.depth = ad.scatter_set(depth, pix, zvis)
    out.normal = ad.scatter_set(normal, pix, face)
    if antialias:
        _antialias(out, mesh, sx, sy, rgb_vis, tri, pix)
    return out


def rasterize(
    mesh: Mesh, camera: CameraPose, width: int | None = None, height: int | None = None
) -> ImageBuffer:
    """Forward-only rasterization straight to an ImageBuffer (crisp:
    evaluation renders skip the boundary blending used for training)."""
    return rasterize_result(mesh, camera, width, height, antialias=False).to_buffer()
