import mpmath
import numpy as np
import pytest

from coopinit import activations as A
from coopinit import tensor as T
from coopinit.tensor import LabelError, ShapeError, Tensor


def leaf(a, name="x"):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 2), (1, 0), (2, 1), (3, 0)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 5, 5)), rng.standard_normal(4)
    fast = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    slow = T.conv2d_naive(x, w, b, stride, padding)
    np.testing.assert_allclose(fast, slow, rtol=1e-6, atol=1e-12)


def test_conv_output_shapes():
    for h in range(3, 12):
        for k in (1, 3, 5):
            for s in (1, 2, 3):
                for p in (0, 1, 2):
                    if h + 2 * p < k:
                        continue
                    x = Tensor(np.zeros((1, 2, h, h)))
                    out = T.conv2d(x, Tensor(np.zeros((3, 2, k, k))), Tensor(np.zeros(3)), s, p)
                    ho = (h + 2 * p - k) // s + 1
                    assert out.shape == (1, 3, ho, ho)


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_pool_examples():
    out = T.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
    assert out.data.item() == 4.0
    const = T.max_pool2d(Tensor(np.full((1, 2, 6, 6), 3.5)), 2, 2)
    assert np.all(const.data == 3.5)


@pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (2, 1), (3, 3)])
def test_pool_matches_oracle_exactly(k, s):
    x = np.random.default_rng(2).standard_normal((1, 2, 6, 6))
    np.testing.assert_array_equal(T.max_pool2d(Tensor(x), k, s).data, T.max_pool2d_naive(x, k, s))


def test_pool_tie_routes_gradient_to_first_position():
    x = leaf(np.ones((1, 1, 2, 2)))
    g = T.backward(T.tsum(T.max_pool2d(x, 2, 2)))["x"]
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_dense_examples():
    out = T.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.eye(2)), Tensor(np.array([3.0, 4.0])))
    np.testing.assert_array_equal(out.data, [[4.0, 6.0]])
    x = np.random.default_rng(3).standard_normal((4, 10))
    np.testing.assert_array_equal(T.dense(Tensor(x), Tensor(np.eye(10)), Tensor(np.zeros(10))).data, x)


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((4, 10)), rng.standard_normal((10, 7)), rng.standard_normal(7)
    ref = np.zeros((4, 7))
    for i in range(4):
        for j in range(7):
            acc = b[j]
            for k in range(10):
                acc += x[i, k] * w[k, j]
            ref[i, j] = acc
    np.testing.assert_allclose(T.dense(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=1e-6)


def test_softmax_ce_uniform_and_stable():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(np.log(10), abs=1e-12)
    z = np.zeros((1, 5))
    z[0, 2] = 1000.0
    big = T.softmax_cross_entropy(Tensor(z), np.array([2])).item()
    assert np.isfinite(big) and abs(big) < 1e-12


def test_softmax_ce_matches_high_precision():
    rng = np.random.default_rng(5)
    z, y = 3 * rng.standard_normal((3, 5)), np.array([0, 3, 4])
    mpmath.mp.dps = 50
    ref = mpmath.mpf(0)
    for i in range(3):
        lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(float(v))) for v in z[i]))
        ref += lse - mpmath.mpf(float(z[i, y[i]]))
    ref /= 3
    got = T.softmax_cross_entropy(Tensor(z), y).item()
    assert abs(got - float(ref)) <= 1e-10 * max(1.0, abs(float(ref)))


def test_softmax_ce_bad_labels():
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))


def test_backward_sum_is_ones():
    x = leaf(np.random.default_rng(6).standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(T.backward(T.tsum(x))["x"], np.ones((2, 3, 4)))


def test_backward_fan_out_accumulates():
    xv = np.random.default_rng(7).standard_normal((5, 4))
    x = leaf(xv)
    r = A.activation(x, A.ActivationSpec("relu"))
    g = T.backward(T.tsum(T.add(r, r)))["x"]
    np.testing.assert_array_equal(g, 2.0 * (xv > 0))


def test_backward_is_deterministic():
    rng = np.random.default_rng(8)
    xv, wv = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))

    def grads():
        x, w = leaf(xv, "x"), leaf(wv, "w")
        b = leaf(np.zeros(4), "b")
        y = T.max_pool2d(T.conv2d(x, w, b, 1, 1), 2, 2)
        return T.backward(T.tsum(y))

    g1, g2 = grads(), grads()
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_no_grad_records_nothing():
    x = leaf(np.ones(3))
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad
