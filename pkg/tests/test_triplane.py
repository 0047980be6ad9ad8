import numpy as np
import pytest

from meshfit import autodiff as ad
from meshfit.triplane import (
    HEAD_SPECS,
    MlpHead,
    TriplaneField,
    init_sdf_from_density,
    query_color,
    query_deformation,
    query_density,
    query_density_raw,
    query_sdf,
    query_values,
    query_values_grid,
    query_weights,
    read_checkpoint,
    sample_triplane,
    sample_triplane_values,
    write_checkpoint,
)


def tiny_field(seed=0, **kwargs):
    defaults = dict(resolution=8, channels=4, hidden=8, depth=2, seed=seed)
    defaults.update(kwargs)
    return TriplaneField(**defaults)


def zeroed_heads_field():
    field = tiny_field()
    field.heads = {
        name: MlpHead.zeros(4, HEAD_SPECS[name], hidden=8, depth=2)
        for name in HEAD_SPECS
    }
    return field


def test_constant_planes_sample_to_three_c():
    field = tiny_field()
    for plane in field.planes:
        plane.data[:] = 0.25
    pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
    feats = sample_triplane(field, pts)
    np.testing.assert_allclose(feats.data, 0.75, atol=1e-12)


def test_sample_at_shared_grid_node():
    field = tiny_field()
    rng = np.random.default_rng(1)
    for plane in field.planes:
        plane.data[:] = rng.normal(size=plane.data.shape)
    res = field.resolution
    i, j, k = 2, 5, 3
    x = -1.0 + 2.0 * i / (res - 1)
    y = -1.0 + 2.0 * j / (res - 1)
    z = -1.0 + 2.0 * k / (res - 1)
    expected = (
        field.planes[0].data[i, j]
        + field.planes[1].data[i, k]
        + field.planes[2].data[j, k]
    )
    got = sample_triplane(field, np.array([x, y, z]))
    np.testing.assert_allclose(got.data, expected, atol=1e-12)


def test_sample_midpoint_is_average_along_axis():
    field = tiny_field()
    rng = np.random.default_rng(2)
    for plane in field.planes:
        plane.data[:] = rng.normal(size=plane.data.shape)
    res = field.resolution
    j, k = 4, 1
    y = -1.0 + 2.0 * j / (res - 1)
    z = -1.0 + 2.0 * k / (res - 1)
    x0 = -1.0 + 2.0 * 2 / (res - 1)
    x1 = -1.0 + 2.0 * 3 / (res - 1)
    mid = sample_triplane(field, np.array([(x0 + x1) / 2, y, z])).data
    ends = 0.5 * (
        sample_triplane(field, np.array([x0, y, z])).data
        + sample_triplane(field, np.array([x1, y, z])).data
    )
    np.testing.assert_allclose(mid, ends, atol=1e-12)


def test_sample_clamps_outside_domain():
    field = tiny_field()
    inside = sample_triplane(field, np.array([1.0, -1.0, 0.3]))
    outside = sample_triplane(field, np.array([5.0, -9.0, 0.3]))
    np.testing.assert_array_equal(inside.data, outside.data)


def test_sample_continuous_across_cell_boundary():
    field = tiny_field(seed=3)
    res = field.resolution
    xb = -1.0 + 2.0 * 3 / (res - 1)  # node on the x axis
    eps = 1e-9
    left = sample_triplane(field, np.array([xb - eps, 0.2, 0.1])).data
    right = sample_triplane(field, np.array([xb + eps, 0.2, 0.1])).data
    np.testing.assert_allclose(left, right, atol=1e-7)


def test_zero_initialized_head_outputs():
    field = zeroed_heads_field()
    pts = np.random.default_rng(3).uniform(-1, 1, size=(5, 3))
    np.testing.assert_allclose(query_color(field, pts).data, 0.5, atol=1e-12)
    np.testing.assert_allclose(query_deformation(field, pts).data, 0.0, atol=1e-12)
    np.testing.assert_allclose(
        query_density(field, pts).data, np.log(2.0), atol=1e-12
    )


def test_query_output_ranges():
    field = tiny_field(seed=4, head_init=3.0)
    pts = np.random.default_rng(4).uniform(-1, 1, size=(200, 3))
    assert np.all(query_density(field, pts).data >= 0.0)
    rgb = query_color(field, pts).data
    assert np.all((rgb >= 0.0) & (rgb <= 1.0))
    delta = query_deformation(field, pts).data
    assert np.all(np.abs(delta) < 0.5)
    w = query_weights(field, pts).data
    assert w.shape == (200, 13)
    assert np.all(w > 0.0)


def test_single_point_shapes():
    field = tiny_field()
    p = np.array([0.1, 0.2, 0.3])
    assert sample_triplane(field, p).data.shape == (4,)
    assert query_density(field, p).data.shape == ()
    assert query_color(field, p).data.shape == (3,)
    assert query_weights(field, p).data.shape == (13,)


def test_sdf_init_last_layer_values():
    field = tiny_field()
    dens = field.heads["density"]
    dens.weights[-1].data[:] = np.array([[0.5], [-1.0]] + [[0.0]] * 6)
    dens.biases[-1].data[:] = 0.2
    out = init_sdf_from_density(field, tau=10.0)
    sdf = out.heads["sdf"]
    np.testing.assert_allclose(
        sdf.weights[-1].data[:2, 0], [-0.5, 1.0], atol=0
    )
    assert sdf.biases[-1].data[0] == pytest.approx(9.8, abs=1e-15)


def test_sdf_init_identity_1000_points():
    rng = np.random.default_rng(5)
    field = tiny_field(seed=6, head_init=2.0)
    for plane in field.planes:
        plane.data[:] = rng.normal(scale=0.5, size=plane.data.shape)
    tau = 10.0
    primed = init_sdf_from_density(field, tau)
    pts = rng.uniform(-1, 1, size=(1000, 3))
    s = query_sdf(primed, pts).data
    d_raw = query_density_raw(primed, pts).data
    assert np.max(np.abs(s + (d_raw - tau))) <= 1e-9


def test_sdf_init_zero_case():
    field = zeroed_heads_field()
    out = init_sdf_from_density(field, tau=0.0)
    pts = np.random.default_rng(6).uniform(-1, 1, size=(10, 3))
    np.testing.assert_allclose(query_sdf(out, pts).data, 0.0, atol=1e-15)


def test_sdf_init_surface_at_threshold():
    # Wherever d_raw crosses tau the new SDF must cross zero.
    field = tiny_field(seed=7, head_init=2.0, plane_init=0.5)
    pts = np.random.default_rng(7).uniform(-1, 1, size=(500, 3))
    d_raw = query_density_raw(field, pts).data
    tau = float(np.median(d_raw))
    primed = init_sdf_from_density(field, tau)
    s = query_sdf(primed, pts).data
    np.testing.assert_allclose(np.sign(s), np.sign(tau - d_raw))


def test_sdf_init_does_not_touch_original_field():
    field = tiny_field()
    before = field.heads["sdf"].weights[-1].data.copy()
    init_sdf_from_density(field, tau=3.0)
    np.testing.assert_array_equal(field.heads["sdf"].weights[-1].data, before)


def test_sdf_init_architecture_mismatch_rejected():
    field = tiny_field()
    field.heads["sdf"] = MlpHead.zeros(4, 1, hidden=6, depth=2)
    with pytest.raises(ValueError):
        init_sdf_from_density(field, tau=1.0)


def test_gradient_wrt_plane_entries_matches_fd():
    field = tiny_field(seed=8)
    pts = np.random.default_rng(8).uniform(-0.9, 0.9, size=(12, 3))

    def loss():
        return ad.tsum(query_density(field, pts) ** 2)

    field.zero_grad()
    loss().backward()
    plane = field.planes[0]
    grad = plane.grad.copy()
    rng = np.random.default_rng(9)
    flat = plane.data.ravel()
    gflat = grad.ravel()
    h = 1e-4
    for idx in rng.choice(flat.size, size=20, replace=False):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = loss().item()
        flat[idx] = orig - h
        lo = loss().item()
        flat[idx] = orig
        fd = (hi - lo) / (2 * h)
        denom = max(abs(fd), abs(gflat[idx]), 1e-8)
        assert abs(gflat[idx] - fd) / denom <= 1e-3


def test_gradient_wrt_query_point_matches_fd_inside_cells():
    field = tiny_field(seed=10, plane_init=0.3)
    # Stay near cell centers so the FD probe does not cross a boundary.
    res = field.resolution
    cell = 2.0 / (res - 1)
    base = np.array([[0.07, -0.33, 0.21]]) + 0.5 * cell
    x = ad.parameter(base)
    loss = ad.tsum(sample_triplane(field, x))
    loss.backward()
    grad = x.grad.copy()
    h = 1e-6
    for axis in range(3):
        hi_pt = base.copy()
        hi_pt[0, axis] += h
        lo_pt = base.copy()
        lo_pt[0, axis] -= h
        hi = ad.tsum(sample_triplane(field, hi_pt)).item()
        lo = ad.tsum(sample_triplane(field, lo_pt)).item()
        fd = (hi - lo) / (2 * h)
        denom = max(abs(fd), abs(grad[0, axis]), 1e-8)
        assert abs(grad[0, axis] - fd) / denom <= 1e-4


def test_checkpoint_round_trip_bit_exact(tmp_path):
    field = tiny_field(seed=11, plane_init=0.2)
    path = tmp_path / "field.tpf"
    write_checkpoint(field, path)
    clone = read_checkpoint(path)
    assert clone.resolution == field.resolution
    assert clone.channels == field.channels
    for a, b in zip(field.parameters(), clone.parameters()):
        assert np.array_equal(a.data, b.data)
    # Writing the clone reproduces the file byte for byte.
    path2 = tmp_path / "field2.tpf"
    write_checkpoint(clone, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.tpf"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        read_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    field = tiny_field()
    path = tmp_path / "field.tpf"
    write_checkpoint(field, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ValueError):
        read_checkpoint(path)


def test_mlp_head_shape_validation():
    with pytest.raises(ValueError):
        MlpHead([ad.parameter(np.zeros((4, 8)))], [ad.parameter(np.zeros(7))])
    with pytest.raises(ValueError):
        MlpHead(
            [ad.parameter(np.zeros((4, 8))), ad.parameter(np.zeros((9, 1)))],
            [ad.parameter(np.zeros(8)), ad.parameter(np.zeros(1))],
        )


def test_field_rejects_bad_plane_shape():
    with pytest.raises(ValueError):
        TriplaneField(
            resolution=8,
            channels=4,
            planes=[ad.parameter(np.zeros((8, 8, 5)))] * 3,
        )


def test_field_defaults_match_base_variant():
    field = TriplaneField()
    assert field.resolution == 64
    assert field.channels == 40
    assert field.heads["density"].layer_sizes() == [(40, 64), (64, 64), (64, 1)]


QUERY_BY_NAME = {
    "density": query_density,
    "density_raw": query_density_raw,
    "color": query_color,
    "sdf": query_sdf,
    "deformation": query_deformation,
    "weights": query_weights,
}


def test_value_sweep_matches_taped_features_bitwise():
    field = tiny_field(seed=7)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1.2, 1.2, size=(257, 3))
    taped = sample_triplane(field, pts)
    swept = sample_triplane_values(field, pts)
    assert swept.dtype == np.float64
    assert np.array_equal(swept, taped.data)


def test_value_sweep_matches_taped_heads_bitwise():
    field = tiny_field(seed=3)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1.0, 1.0, size=(311, 3))
    names = tuple(QUERY_BY_NAME)
    swept = query_values(field, pts, names=names)
    for name, query in QUERY_BY_NAME.items():
        assert np.array_equal(swept[name], query(field, pts).data), name


def test_value_sweep_chunking_stays_close():
    field = tiny_field(seed=9)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1.0, 1.0, size=(1031, 3))
    whole = query_values(field, pts, names=("sdf", "color"))
    chunked = query_values(field, pts, names=("sdf", "color"), chunk=128)
    for name in ("sdf", "color"):
        np.testing.assert_allclose(chunked[name], whole[name], rtol=1e-13, atol=0.0)


def test_grid_sweep_matches_pointwise_sweep_bitwise():
    field = tiny_field(seed=1)
    xs = np.linspace(-1.0, 1.0, 6)
    ys = np.linspace(-1.0, 1.0, 5)
    zs = np.linspace(-1.0, 1.0, 7)
    names = ("sdf", "density", "color", "deformation", "weights")
    gridded = query_values_grid(field, xs, ys, zs, names=names)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    pointwise = query_values(field, pts, names=names)
    for name in names:
        assert np.array_equal(gridded[name], pointwise[name]), name


def test_grid_sweep_handles_scaled_axes_and_slabs():
    field = tiny_field(seed=6)
    n = 5
    half = 1.0 / (n - 1)
    axis = np.linspace(-1.0, 1.0, n - 1) * (1.0 - half)
    gridded = query_values_grid(
        field, axis, axis, axis, names=("weights",), slab_points=7
    )
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    assert np.array_equal(gridded["weights"], query_weights(field, pts).data)
