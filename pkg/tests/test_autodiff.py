import numpy as np
import pytest

from orbitsr import autodiff as ad
from orbitsr import tiling

TOL = 1e-4  # max relative error for 64-bit central differences


def P(rng, shape, name):
    return ad.Parameter(rng.normal(size=shape), name)


def probe(node, rng):
    """Random linear functional of ``node``, so every output element matters."""
    return ad.sum_all(ad.mul(node, ad.constant(rng.normal(size=node.shape))))


OPS = {
    "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, pad=1),
               [(2, 3, 4, 5), (2, 3, 3, 3), (2,)]),
    "conv2d_stride": (lambda x, w, b: ad.conv2d(x, w, b, pad=1, stride=2),
                      [(1, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv_transpose2d": (lambda x, w, b: ad.conv_transpose2d(x, w, b),
                         [(1, 2, 3, 3), (2, 2, 4, 4), (2,)]),
    "pixel_shuffle": (lambda x: ad.pixel_shuffle(x, 2), [(1, 8, 2, 3)]),
    "relu": (ad.relu, [(2, 3, 4)]),
    "sigmoid": (ad.sigmoid, [(2, 3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b]), [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "add": (ad.add, [(3, 4), (3, 4)]),
    "mul": (ad.mul, [(3, 4), (3, 4)]),
    "scale": (lambda x: ad.scale(x, -2.5), [(3, 4)]),
    "reshape": (lambda x: ad.reshape(x, (4, 6)), [(2, 3, 4)]),
    "transpose": (lambda x: ad.transpose(x, (0, 2, 1)), [(2, 3, 4)]),
    "matmul": (ad.matmul, [(2, 3, 4), (2, 4, 5)]),
    "softmax": (ad.softmax, [(2, 3, 6)]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(7)
    fn, shapes = OPS[op]
    params = [P(rng, s, f"p{i}") for i, s in enumerate(shapes)]
    if op == "relu":  # keep clear of the kink
        for p in params:
            p.value[np.abs(p.value) < 1e-3] = 0.5
    weights = rng.normal(size=fn(*params).shape)
    f = lambda: ad.sum_all(ad.mul(fn(*params), ad.constant(weights)))  # noqa: E731
    assert ad.finite_diff_check(f, params) < TOL


def test_sum_of_tensor():
    x = ad.Parameter(np.arange(6.0).reshape(2, 3), "x")
    grads = ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(grads["x"], np.ones((2, 3)))


def test_relu_subgradient():
    x = ad.Parameter(np.array([-1.0, 0.0, 2.0]), "x")
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_fan_out_accumulates():
    x = ad.Parameter(np.array([1.0, 2.0]), "x")
    ad.backward(ad.sum_all(ad.add(ad.mul(x, x), x)))
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_concat_splits(rng):
    a, b = P(rng, (1, 2, 2, 2), "a"), P(rng, (1, 3, 2, 2), "b")
    w = rng.normal(size=(1, 5, 2, 2))
    ad.backward(ad.sum_all(ad.mul(ad.concat([a, b]), ad.constant(w))))
    np.testing.assert_array_equal(a.grad, w[:, :2])
    np.testing.assert_array_equal(b.grad, w[:, 2:])


def test_unreachable_zero_and_scalar_check(rng):
    x, y = P(rng, (3,), "x"), P(rng, (2, 2), "y")
    grads = ad.backward(ad.sum_all(x), [x, y])
    np.testing.assert_array_equal(grads["y"], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.scale(x, 2.0))


def test_deterministic(rng):
    x = P(rng, (1, 2, 5, 5), "x")
    w = P(rng, (3, 2, 3, 3), "w")
    f = lambda: probe(ad.sigmoid(ad.conv2d(x, w, pad=1)), np.random.default_rng(0))  # noqa: E731
    g1 = ad.backward(f())["w"].copy()
    g2 = ad.backward(f())["w"]
    np.testing.assert_array_equal(g1, g2)


def test_no_grad_builds_no_graph(rng):
    x = P(rng, (2,), "x")
    with ad.no_grad():
        y = ad.scale(x, 3.0)
    assert not y.parents


class TestLosses:
    def test_l1(self, rng):
        sr = P(rng, (2, 1, 4, 4), "sr")
        hr = rng.normal(size=(2, 1, 4, 4))
        assert float(ad.l1_loss(sr, hr).value) == pytest.approx(np.abs(sr.value - hr).mean())
        assert ad.finite_diff_check(lambda: ad.l1_loss(sr, hr), [sr]) < TOL

    def test_mask_psnr_value(self, rng):
        sr = rng.normal(size=(3, 1, 6, 6))
        hr = rng.normal(size=(3, 1, 6, 6))
        mask = tiling.make_mask(6, 2)
        per = [10 * np.log10(36 / np.sum(mask * (hr[i, 0] - sr[i, 0]) ** 2)) for i in range(3)]
        got = float(ad.mask_psnr(ad.constant(sr), hr, mask, 1.0).value)
        assert got == pytest.approx(np.mean(per), abs=1e-12)

    def test_mask_psnr_gradient_8x8(self, rng):
        sr = P(rng, (1, 1, 8, 8), "sr")
        hr = rng.normal(size=(1, 1, 8, 8))
        mask = tiling.make_mask(8, 4)
        f = lambda: ad.mask_psnr(sr, hr, mask, 1.0)  # noqa: E731
        assert ad.finite_diff_check(f, [sr]) < 1e-5

    def test_mask_psnr_one_layer_conv(self, rng):
        x = ad.constant(rng.normal(size=(1, 1, 6, 6)))
        w, b = P(rng, (1, 1, 3, 3), "w"), P(rng, (1,), "b")
        hr = rng.normal(size=(1, 1, 6, 6))
        mask = tiling.make_mask(6, 3)
        f = lambda: ad.mask_psnr(ad.conv2d(x, w, b, pad=1), hr, mask, 1.0)  # noqa: E731
        assert ad.finite_diff_check(f, [w, b]) < 1e-5


class TestFiniteDiff:
    def test_quadratic(self):
        w = ad.Parameter(np.array([0.7]), "w")
        f = lambda: ad.sum_all(ad.mul(w, w))  # noqa: E731
        assert ad.finite_diff_check(f, [w]) < 1e-8

    def test_constant(self):
        w = ad.Parameter(np.array([0.7, -1.0]), "w")
        assert ad.finite_diff_check(lambda: ad.constant(np.array(3.0)), [w]) == 0.0

    def test_non_finite(self):
        w = ad.Parameter(np.array([1.0]), "w")
        with pytest.raises(FloatingPointError):
            ad.finite_diff_check(lambda: ad.constant(np.array(np.nan)), [w])

    def test_eps_positive(self):
        with pytest.raises(ValueError):
            ad.finite_diff_check(lambda: ad.constant(np.array(0.0)), [], eps=0)


class TestAdam:
    def test_zero_grad_keeps_value(self):
        p = ad.Parameter(np.array([1.5, -2.0]), "p")
        ad.adam_step([p], {"p": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(p.value, [1.5, -2.0])

    def test_first_step_closed_form(self):
        p = ad.Parameter(np.array([1.0, 1.0]), "p")
        g = np.array([0.3, -2.0])
        state = ad.adam_step([p], {"p": g}, lr=0.01)
        # m_hat = g and v_hat = g**2 after one step
        np.testing.assert_allclose(p.value, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert state.t == 1

    def test_scalar_descent(self):
        w = ad.Parameter(np.array([1.0]), "w")
        state = ad.AdamState()
        for _ in range(100):
            grads = ad.backward(ad.sum_all(ad.mul(w, w)), [w])
            ad.adam_step([w], grads, state, lr=0.1)
        assert abs(w.value[0]) < 0.5

    def test_shape_mismatch(self):
        p = ad.Parameter(np.zeros(3), "p")
        with pytest.raises(ValueError):
            ad.adam_step([p], {"p": np.zeros(2)}, lr=0.1)
