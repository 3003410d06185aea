import numpy as np
import pytest

from coopinit.activations import ActivationSpec, MixedActivation, default_mixture
from coopinit.network import build, build_lenet_mnist, build_small_cifar_cnn, init_weights, set_all_slots
from coopinit.tensor import ShapeError, Tensor

# Logits of a seed-0 f64 network on default_rng(123) normal input, frozen from the first run.
GOLDEN = {
    "small-cifar-10": [-2.951655192231641, -0.8316794769729088, -1.9395891560976455, -2.3148669509645856,
                       1.7001892763649147, 2.155985390228498, 1.3950196937256762, 2.135025905679022,
                       -2.508287797957961, -0.9055315178377918],
    "lenet-mnist": [-3.5492513797223117, -3.9088764283158737, -3.809362077882249, 4.504163866550355,
                    2.7781113430995474, 0.5509965342047138, -8.074650965114428, -0.1275201510138552,
                    -2.3440576541864484, -3.195584625320639],
}


def seeded(arch, seed=0, dtype=np.float64, act=None):
    return init_weights(build(arch, act=act, dtype=dtype), seed)


def test_lenet_shapes_and_count():
    net = build_lenet_mnist()
    assert net.forward(np.zeros((1, 1, 28, 28), np.float32)).shape == (1, 10)
    assert net.trace_shapes()["flatten"] == (480,)
    assert net.trace_shapes()["pool1"] == (20, 12, 12)
    assert net.num_parameters() == (20 * 25 + 20) + (30 * 20 * 25 + 30) + (480 * 10 + 10) == 20360


def test_cifar_shapes():
    assert build_small_cifar_cnn(10).forward(np.zeros((2, 3, 32, 32), np.float32)).shape == (2, 10)
    assert build_small_cifar_cnn(100).forward(np.zeros((1, 3, 32, 32), np.float32)).shape == (1, 100)
    assert build_small_cifar_cnn(10).trace_shapes()["flatten"] == (2048,)


def test_wrong_input_shape_rejected():
    with pytest.raises(ShapeError):
        build_lenet_mnist().forward(np.zeros((1, 1, 32, 32), np.float32))


@pytest.mark.parametrize("arch", sorted(GOLDEN))
def test_golden_forward(arch):
    net = seeded(arch)
    x = np.random.default_rng(123).standard_normal((1,) + net.input_shape)
    np.testing.assert_allclose(net.forward(x).data.ravel(), GOLDEN[arch], rtol=1e-10)


def test_mixture_swap_contract():
    net = seeded("lenet-mnist", act=default_mixture())
    slopes = sorted(n for n in net.params if n.endswith(".prelu_slope"))
    assert slopes == ["conv1.act.mix1.prelu_slope", "conv2.act.mix1.prelu_slope"]
    assert net.params["conv1.act.mix1.prelu_slope"].shape == (20,)
    before = {n: net.params[n].data.copy() for n in net.weight_names()}
    set_all_slots(net, ActivationSpec("relu"))
    assert not any(n.endswith(".prelu_slope") for n in net.params)
    for n, v in before.items():
        np.testing.assert_array_equal(net.params[n].data, v)


def test_same_activation_swap_is_identity():
    for act in (ActivationSpec("relu"), ActivationSpec("prelu"), default_mixture()):
        net = seeded("lenet-mnist", act=act)
        x = np.random.default_rng(1).standard_normal((2, 1, 28, 28))
        before = net.forward(x).data.copy()
        set_all_slots(net, act)
        np.testing.assert_array_equal(net.forward(x).data, before)


def test_relu_copies_network_matches_relu_network():
    x = np.random.default_rng(2).standard_normal((2, 3, 32, 32))
    plain = seeded("small-cifar-10")
    copies = seeded("small-cifar-10", act=MixedActivation((ActivationSpec("relu"),) * 4))
    np.testing.assert_allclose(copies.forward(x).data, plain.forward(x).data, rtol=1e-6, atol=1e-12)


def test_identity_network_is_positively_homogeneous():
    net = seeded("small-cifar-10", act=ActivationSpec("identity"))
    x = np.random.default_rng(3).standard_normal((1, 3, 32, 32))
    np.testing.assert_allclose(net.forward(2 * x).data, 2 * net.forward(x).data, rtol=1e-12)


def test_init_determinism_and_std():
    a, b, c = seeded("lenet-mnist", 7), seeded("lenet-mnist", 7), seeded("lenet-mnist", 8)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    assert not np.array_equal(a.params["conv1.weight"].data, c.params["conv1.weight"].data)
    assert np.all(a.params["fc.bias"].data == 0)
    draws = np.concatenate([seeded("lenet-mnist", s).params["conv1.weight"].data.ravel() for s in range(20)])
    assert draws.size == 10000
    assert abs(draws.std() / np.sqrt(2 / 25) - 1) < 0.05


def test_uniform_range_bounds():
    net = init_weights(build("lenet-mnist"), 0, "uniform-range")
    w = net.params["conv2.weight"].data
    assert np.abs(w).max() <= 1 / np.sqrt(20 * 25)


def test_capture_unknown_layer_lists_ids():
    with pytest.raises(KeyError, match="conv1.act"):
        build_lenet_mnist().forward(np.zeros((1, 1, 28, 28), np.float32), capture="nope")


def test_capture_returns_intermediate():
    out = build_lenet_mnist().forward(np.zeros((3, 1, 28, 28), np.float32), capture="flatten")
    assert out.shape == (3, 480)


def test_copy_is_independent():
    net = seeded("xor-mlp")
    other = net.copy()
    other.params["fc1.weight"].assign(np.zeros((2, 16)))
    assert np.any(net.params["fc1.weight"].data != 0)
    assert isinstance(other.forward(Tensor(np.zeros((1, 2, 1, 1)))), Tensor)
