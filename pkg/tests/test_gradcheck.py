import numpy as np
import pytest

from coopinit import gradcheck as G


def test_central_difference_of_known_function():
    arr = np.array([0.5, -1.0, 2.0])
    grad, skipped = G.central_difference(lambda: (float((arr ** 3).sum()), None), arr)
    # for a cubic the central-difference error is exactly h**2
    np.testing.assert_allclose(grad - 3 * np.array([0.5, -1.0, 2.0]) ** 2, G.H ** 2, rtol=0, atol=1e-9)
    assert skipped == 0
    np.testing.assert_array_equal(arr, [0.5, -1.0, 2.0])


def test_kink_crossing_coordinates_are_skipped():
    arr = np.array([0.0005, 1.0])
    grad, skipped = G.central_difference(lambda: (float(np.maximum(arr, 0).sum()), bytes(arr > 0)), arr)
    assert skipped == 1 and np.isnan(grad[0]) and grad[1] == pytest.approx(1.0)


def test_compare_tolerances():
    assert G.compare(np.array([1.0]), np.array([1.0 + 5e-5]))[2]
    assert not G.compare(np.array([1.0]), np.array([1.001]))[2]
    assert G.compare(np.array([1e-5]), np.array([1.05e-5]))[2]
    assert not G.compare(np.array([1e-4]), np.array([1e-4 + 5e-6]))[2]
    assert G.compare(np.array([1.0, 9.0]), np.array([1.0, np.nan]))[2]


@pytest.mark.parametrize("op", ["conv2d", "max_pool2d", "prelu", "mixture", "softmax_cross_entropy"])
def test_ops_pass_on_few_seeds(op):
    (res,) = G.run([op], seeds=3)
    assert res.passed and res.checked > 0 and res.max_rel_error <= G.RTOL


def test_network_case_counts_skips():
    (res,) = G.run(["lenet-mnist"], network_seeds=1, network_coords=3)
    assert res.passed and res.checked > 0


def test_unknown_op():
    with pytest.raises(KeyError):
        G.run(["tanh"])
