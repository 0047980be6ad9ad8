import numpy as np
import pytest

from meshfit import autodiff as ad


def fd_grad(f, param, eps=1e-6):
    """Central-difference gradient oracle, independent of the tape."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def tape_grad(f, param):
    param.grad = None
    f().backward()
    return param.grad


def assert_matches_fd(f, param, rtol=1e-6, atol=1e-8):
    g = tape_grad(f, param)
    g_fd = fd_grad(f, param)
    np.testing.assert_allclose(g, g_fd, rtol=rtol, atol=atol)


def test_square_gradient():
    p = ad.parameter(3.0)
    loss = p * p
    loss.backward()
    assert p.grad == pytest.approx(6.0)


def test_constant_gets_no_gradient():
    c = ad.astensor(2.0)
    p = ad.parameter(1.5)
    (c * p).backward()
    assert c.grad is None
    assert not c.requires_grad


def test_backward_twice_doubles_gradient_exactly():
    p = ad.parameter(np.array([1.0, -2.0, 0.5]))
    loss = ad.tsum(ad.tanh(p) * p)
    loss.backward()
    single = p.grad.copy()
    loss.backward()
    # x + x is exact in IEEE754, so re-running the same tape doubles bitwise.
    assert np.array_equal(p.grad, 2.0 * single)


def test_summing_two_evaluations_doubles_gradients():
    p = ad.parameter(np.array([1.0, -2.0, 0.5]))

    def loss_once():
        return ad.tsum(ad.tanh(p) * p)

    p.grad = None
    loss_once().backward()
    single = p.grad.copy()
    p.grad = None
    # Fresh graphs interleave accumulation order, so only near-exact.
    (loss_once() + loss_once()).backward()
    np.testing.assert_allclose(p.grad, 2.0 * single, rtol=1e-14)


def test_non_scalar_loss_rejected():
    p = ad.parameter(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_broadcast_add_unbroadcasts():
    a = ad.parameter(np.ones((3, 4)))
    b = ad.parameter(np.ones(4))
    ad.tsum(a + b).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 4)))
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))


def test_broadcast_mul_against_fd():
    rng = np.random.default_rng(0)
    a = ad.parameter(rng.normal(size=(3, 1)))
    b = ad.parameter(rng.normal(size=(1, 4)))
    assert_matches_fd(lambda: ad.tsum(a * b * b), a)
    assert_matches_fd(lambda: ad.tsum(a * b * b), b)


def test_division_against_fd():
    rng = np.random.default_rng(1)
    a = ad.parameter(rng.normal(size=5))
    b = ad.parameter(rng.normal(size=5) + 3.0)
    assert_matches_fd(lambda: ad.tsum(a / b), a)
    assert_matches_fd(lambda: ad.tsum(a / b), b)


def test_matmul_against_fd():
    rng = np.random.default_rng(2)
    a = ad.parameter(rng.normal(size=(4, 3)))
    b = ad.parameter(rng.normal(size=(3, 2)))

    def loss():
        return ad.tsum(ad.tanh(a @ b))

    assert_matches_fd(loss, a, rtol=1e-5)
    assert_matches_fd(loss, b, rtol=1e-5)


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, ad.sqrt, ad.absolute],
    ids=["exp", "tanh", "sigmoid", "softplus", "sqrt", "abs"],
)
def test_unary_ops_against_fd(op):
    rng = np.random.default_rng(3)
    p = ad.parameter(rng.uniform(0.5, 2.0, size=6))
    assert_matches_fd(lambda: ad.tsum(op(p)), p, rtol=1e-5)


def test_log_and_power_against_fd():
    p = ad.parameter(np.array([0.7, 1.3, 2.9]))
    assert_matches_fd(lambda: ad.tsum(ad.log(p)), p)
    assert_matches_fd(lambda: ad.tsum(p**3), p, rtol=1e-5)


def test_sigmoid_stable_in_tails():
    p = ad.parameter(np.array([-800.0, 800.0]))
    out = ad.sigmoid(p)
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)
    out.backward(seed=np.ones(2))
    assert np.all(np.isfinite(p.grad))


def test_softplus_stable_for_large_inputs():
    p = ad.parameter(np.array([900.0]))
    assert ad.softplus(p).item() == pytest.approx(900.0)


def test_cumsum_against_fd():
    rng = np.random.default_rng(4)
    p = ad.parameter(rng.normal(size=(2, 5)))
    w = rng.normal(size=(2, 5))

    def loss():
        return ad.tsum(ad.cumsum(p, axis=1) * w)

    assert_matches_fd(loss, p)


def test_sum_mean_axis_against_fd():
    rng = np.random.default_rng(5)
    p = ad.parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=3)
    assert_matches_fd(lambda: ad.tsum(ad.tmean(p, axis=1) * w), p)
    assert_matches_fd(lambda: ad.tsum(ad.tsum(p, axis=0) ** 2), p, rtol=1e-5)


def test_take_gathers_and_scatters():
    p = ad.parameter(np.arange(12, dtype=float).reshape(4, 3))
    idx = np.array([1, 1, 3, 0])
    out = ad.take(p, idx)
    np.testing.assert_allclose(out.data, p.data[idx])
    ad.tsum(out).backward()
    # Row 1 gathered twice, row 2 never.
    np.testing.assert_allclose(p.grad[:, 0], [1.0, 2.0, 0.0, 1.0])


def test_take_against_fd():
    rng = np.random.default_rng(6)
    p = ad.parameter(rng.normal(size=(5, 2)))
    idx = rng.integers(0, 5, size=9)
    w = rng.normal(size=(9, 2))
    assert_matches_fd(lambda: ad.tsum(ad.take(p, idx) * w), p)


def test_segment_sum_against_fd():
    rng = np.random.default_rng(7)
    p = ad.parameter(rng.normal(size=(8, 3)))
    seg = np.array([0, 0, 1, 2, 2, 2, 4, 4])
    w = rng.normal(size=(5, 3))
    out = ad.segment_sum(p, seg, 5)
    np.testing.assert_allclose(out.data[3], 0.0)
    assert_matches_fd(lambda: ad.tsum(ad.segment_sum(p, seg, 5) * w), p)


def test_getitem_slice_against_fd():
    rng = np.random.default_rng(8)
    p = ad.parameter(rng.normal(size=(4, 5)))
    assert_matches_fd(lambda: ad.tsum(p[:, 1:3] ** 2), p, rtol=1e-5)
    assert_matches_fd(lambda: ad.tsum(p[2] * 3.0), p)


def test_concat_and_stack_against_fd():
    rng = np.random.default_rng(9)
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = ad.parameter(rng.normal(size=(4, 3)))
    assert_matches_fd(lambda: ad.tsum(ad.concat([a, b], axis=0) ** 2), a, rtol=1e-5)
    assert_matches_fd(lambda: ad.tsum(ad.concat([a, b], axis=0) ** 2), b, rtol=1e-5)
    c = ad.parameter(rng.normal(size=3))
    d = ad.parameter(rng.normal(size=3))
    assert_matches_fd(lambda: ad.tsum(ad.stack([c, d], axis=1) * 2.0), c)


def test_scatter_set_masks_overwritten_rows():
    base = ad.parameter(np.ones((4, 2)))
    src = ad.parameter(np.full((2, 2), 5.0))
    idx = np.array([0, 2])
    out = ad.scatter_set(base, idx, src)
    np.testing.assert_allclose(out.data[idx], 5.0)
    np.testing.assert_allclose(out.data[[1, 3]], 1.0)
    ad.tsum(out).backward()
    np.testing.assert_allclose(base.grad, [[0, 0], [1, 1], [0, 0], [1, 1]])
    np.testing.assert_allclose(src.grad, np.ones((2, 2)))


def test_where_and_maximum_route_gradient():
    a = ad.parameter(np.array([1.0, 5.0]))
    b = ad.parameter(np.array([2.0, 2.0]))
    ad.tsum(ad.maximum(a, b)).backward()
    np.testing.assert_allclose(a.grad, [0.0, 1.0])
    np.testing.assert_allclose(b.grad, [1.0, 0.0])
    a.grad = b.grad = None
    ad.tsum(ad.where(np.array([True, False]), a, b)).backward()
    np.testing.assert_allclose(a.grad, [1.0, 0.0])
    np.testing.assert_allclose(b.grad, [0.0, 1.0])


def test_clip_zeroes_gradient_outside_interval():
    p = ad.parameter(np.array([-2.0, 0.3, 2.0]))
    ad.tsum(ad.clip(p, -1.0, 1.0) ** 2).backward()
    np.testing.assert_allclose(p.grad, [0.0, 0.6, 0.0])


def test_diamond_graph_accumulates_once_per_path():
    # loss = (p + p*p) has two paths into p.
    p = ad.parameter(2.0)
    (p + p * p).backward()
    assert p.grad == pytest.approx(1.0 + 2.0 * 2.0)


def test_deep_chain_does_not_recurse():
    p = ad.parameter(1.0)
    x = p
    for _ in range(5000):
        x = x + 1.0
    x.backward()
    assert p.grad == pytest.approx(1.0)


def test_backprop_returns_param_grads():
    p = ad.parameter(np.array([1.0, 2.0]))
    q = ad.parameter(np.array([3.0, 4.0]))
    grads = ad.backprop(ad.tsum(p * q), params=[p, q])
    np.testing.assert_allclose(grads[p], q.data)
    np.testing.assert_allclose(grads[q], p.data)


def test_norm_and_dot_helpers():
    a = ad.parameter(np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(ad.norm_rows(a).data, [5.0, 2.0])
    b = ad.astensor(np.array([[1.0, 1.0], [2.0, 0.5]]))
    np.testing.assert_allclose(ad.dot_rows(a, b).data, [7.0, 1.0])
