"""Sequential networks with named parameters and swappable activation slots."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .activations import (ActivationSpec, MixedActivation, apply,
                          parse_activation)
from .tensor import ShapeError, Tensor

ARCHITECTURES = ("lenet-mnist", "small-cifar-10", "small-cifar-100", "xor-mlp")


@dataclass
class Conv:
    id: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass
class Pool:
    id: str
    kernel: int
    stride: int


@dataclass
class Flatten:
    id: str


@dataclass
class Dense:
    id: str
    in_features: int
    out_features: int


@dataclass
class ActivationSlot:
    id: str
    channels: int
    current: Union[ActivationSpec, MixedActivation]

    def slope_names(self) -> list[Optional[str]]:
        """Registry names of the learnable slopes, one entry per branch."""
        if isinstance(self.current, MixedActivation):
            return [f"{self.id}.mix{i}.prelu_slope" if b.kind == "prelu" else None
                    for i, b in enumerate(self.current.branches)]
        return [f"{self.id}.prelu_slope" if self.current.kind == "prelu" else None]


Layer = Union[Conv, Pool, Flatten, Dense, ActivationSlot]


class Network:
    def __init__(self, name: str, input_shape: tuple, layers: list, dtype=np.float32):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids in {name}: {ids}")
        for layer in self.layers:
            if isinstance(layer, Conv):
                k = layer.kernel
                self._register(f"{layer.id}.weight", (layer.out_channels, layer.in_channels, k, k))
                self._register(f"{layer.id}.bias", (layer.out_channels,))
            elif isinstance(layer, Dense):
                self._register(f"{layer.id}.weight", (layer.in_features, layer.out_features))
                self._register(f"{layer.id}.bias", (layer.out_features,))
            elif isinstance(layer, ActivationSlot):
                self._register_slopes(layer)
        self._check_shapes()

    def _register(self, name: str, shape: tuple, fill: float = 0.0) -> None:
        if name in self.params:
            raise ValueError(f"parameter {name} registered twice")
        self.params[name] = Tensor(np.full(shape, fill, dtype=self.dtype), requires_grad=True, name=name)

    def _register_slopes(self, slot: ActivationSlot) -> None:
        branches = slot.current.branches if isinstance(slot.current, MixedActivation) else (slot.current,)
        for name, spec in zip(slot.slope_names(), branches):
            if name is not None:
                self._register(name, (slot.channels,), spec.prelu_init)

    # structure --------------------------------------------------------------

    @property
    def slots(self) -> list[ActivationSlot]:
        return [layer for layer in self.layers if isinstance(layer, ActivationSlot)]

    def site_ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    def slot_encodings(self) -> dict[str, str]:
        return {s.id: s.current.encode() for s in self.slots}

    def weight_names(self) -> list[str]:
        """Conv and dense parameters (everything except activation slopes)."""
        return [n for n in self.params if not fnmatch.fnmatch(n, "*.prelu_slope")]

    def num_parameters(self, pattern: str = "*") -> int:
        return sum(p.size for n, p in self.params.items() if fnmatch.fnmatch(n, pattern))

    def _check_shapes(self) -> None:
        self.trace_shapes()

    def trace_shapes(self) -> dict[str, tuple]:
        """Per-layer output shapes (without batch dim); raises on any mismatch."""
        shape = self.input_shape
        shapes = {}
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"{layer.id}: expects {layer.in_channels} channels, got {shape}")
                h = T.conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
                w = T.conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
                if h <= 0 or w <= 0:
                    raise ShapeError(f"{layer.id}: empty output for input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                    raise ShapeError(f"{layer.id}: cannot pool {shape} with k={layer.kernel}")
                shape = (shape[0], (shape[1] - layer.kernel) // layer.stride + 1,
                         (shape[2] - layer.kernel) // layer.stride + 1)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ShapeError(f"{layer.id}: expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, ActivationSlot):
                if shape[0] != layer.channels:
                    raise ShapeError(f"{layer.id}: slot has {layer.channels} channels, "
                                     f"feature map has {shape[0]}")
            shapes[layer.id] = shape
        return shapes

    # forward ----------------------------------------------------------------

    def forward(self, x, capture: Optional[str] = None, trace: Optional[list] = None) -> Tensor:
        """Run the layers on a batch.

        With ``capture``, stop after that layer id and return its output.
        With ``trace``, append ``(layer, input array)`` for every layer run.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.name}: input {x.shape[1:]} != {self.input_shape}")
        if capture is not None and capture not in self.site_ids():
            raise KeyError(f"unknown layer id {capture!r}; valid ids: {', '.join(self.site_ids())}")
        p = self.params
        for layer in self.layers:
            if trace is not None:
                trace.append((layer, x.data))
            if isinstance(layer, Conv):
                x = T.conv2d(x, p[f"{layer.id}.weight"], p[f"{layer.id}.bias"],
                             layer.stride, layer.padding)
            elif isinstance(layer, Pool):
                x = T.max_pool2d(x, layer.kernel, layer.stride)
            elif isinstance(layer, Flatten):
                x = T.flatten(x)
            elif isinstance(layer, Dense):
                x = T.dense(x, p[f"{layer.id}.weight"], p[f"{layer.id}.bias"])
            else:
                slopes = [None if n is None else p[n] for n in layer.slope_names()]
                x = apply(x, layer.current, slopes)
            if layer.id == capture:
                return x
        return x

    __call__ = forward

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.name = self.name
        other.input_shape = self.input_shape
        other.layers = [type(layer)(**vars(layer)) for layer in self.layers]
        other.dtype = self.dtype
        other.params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return other


# slot management ---------------------------------------------------------------

def set_all_slots(net: Network, act, keep_same: bool = True) -> Network:
    """Install ``act`` at every activation slot.

    Conv/dense parameters are left alone. Slopes belonging to the previous
    activation are dropped from the registry and fresh slopes are registered
    for the new one. A slot already holding ``act`` is left untouched when
    ``keep_same`` is set, so re-installing the same activation is a no-op.
    """
    if isinstance(act, str):
        act = parse_activation(act)
    for slot in net.slots:
        if keep_same and slot.current == act:
            continue
        for name in slot.slope_names():
            if name is not None:
                del net.params[name]
        slot.current = act
        net._register_slopes(slot)
    return net


def set_slot(net: Network, site: str, act) -> Network:
    if isinstance(act, str):
        act = parse_activation(act)
    for slot in net.slots:
        if slot.id == site:
            for name in slot.slope_names():
                if name is not None:
                    del net.params[name]
            slot.current = act
            net._register_slopes(slot)
            return net
    raise KeyError(f"no activation slot {site!r}")


# initialization -----------------------------------------------------------------

def _fan_in(shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_weights(net: Network, seed: int, scheme: str = "kaiming-normal") -> Network:
    """Draw conv/dense weights from a seeded generator; biases start at zero.

    ``kaiming-normal`` samples N(0, 2/fan_in); ``uniform-range`` samples
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Draws happen in float64 so f32 and f64
    networks built from one seed hold the same values up to rounding.
    """
    if scheme not in ("kaiming-normal", "uniform-range"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for name, t in net.params.items():
        if name.endswith(".weight"):
            fan_in = _fan_in(t.shape)
            if scheme == "kaiming-normal":
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=t.shape)
            t.assign(w.astype(net.dtype))
        elif name.endswith(".bias"):
            t.assign(np.zeros(t.shape, dtype=net.dtype))
    return net


# builders --------------------------------------------------------------------

def build_lenet_mnist(act=None, dtype=np.float32) -> Network:
    """Two 5x5 conv layers (20 and 30 filters) and one dense layer, 1x28x28 input."""
    act = ActivationSpec("relu") if act is None else act
    layers = [
        Conv("conv1", 1, 20, 5), ActivationSlot("conv1.act", 20, act), Pool("pool1", 2, 2),
        Conv("conv2", 20, 30, 5), ActivationSlot("conv2.act", 30, act), Pool("pool2", 2, 2),
        Flatten("flatten"), Dense("fc", 480, 10),
    ]
    return Network("lenet-mnist", (1, 28, 28), layers, dtype)


def build_small_cifar_cnn(num_classes: int = 10, act=None, dtype=np.float32) -> Network:
    """Three conv-conv-pool blocks (32, 64, 128 channels) then a dense classifier.

    A desk-scale stand-in for the large CIFAR models; its accuracies are its own.
    """
    if num_classes not in (10, 100):
        raise ValueError(f"num_classes must be 10 or 100, got {num_classes}")
    act = ActivationSpec("relu") if act is None else act
    layers: list = []
    cin = 3
    for b, width in enumerate((32, 64, 128), start=1):
        layers += [
            Conv(f"block{b}.conv1", cin, width, 3, 1, 1), ActivationSlot(f"block{b}.conv1.act", width, act),
            Conv(f"block{b}.conv2", width, width, 3, 1, 1), ActivationSlot(f"block{b}.conv2.act", width, act),
            Pool(f"block{b}.pool", 2, 2),
        ]
        cin = width
    layers += [Flatten("flatten"), Dense("fc", 128 * 4 * 4, num_classes)]
    return Network(f"small-cifar-{num_classes}", (3, 32, 32), layers, dtype)


def build_xor_mlp(hidden: int = 16, act=None, dtype=np.float32) -> Network:
    """Two-point input rendered as a 2x1x1 image, one hidden layer."""
    act = ActivationSpec("relu") if act is None else act
    layers = [Flatten("flatten"), Dense("fc1", 2, hidden), ActivationSlot("fc1.act", hidden, act),
              Dense("fc2", hidden, 2)]
    return Network("xor-mlp", (2, 1, 1), layers, dtype)


def build(name: str, act=None, dtype=np.float32) -> Network:
    if name == "lenet-mnist":
        return build_lenet_mnist(act, dtype)
    if name == "small-cifar-10":
        return build_small_cifar_cnn(10, act, dtype)
    if name == "small-cifar-100":
        return build_small_cifar_cnn(100, act, dtype)
    if name == "xor-mlp":
        return build_xor_mlp(act=act, dtype=dtype)
    raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")

