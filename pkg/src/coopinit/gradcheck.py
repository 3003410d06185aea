"""Finite-difference verification of every differentiable op.

Each check builds random float64 inputs, reduces the op output to a scalar
through a fixed random projection, and compares tape gradients with central
differences. An element passes when its relative error is at most ``rtol``,
or, where both gradients are below ``small`` in magnitude, when the absolute
error is at most ``atol``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import activations as A
from . import tensor as T
from .network import ActivationSlot, Pool, build, init_weights, set_all_slots
from .tensor import Tensor

H = 1e-3
RTOL = 1e-4
ATOL = 1e-6
SMALL = 1e-3
MAX_TRIES_PER_WANTED = 8


@dataclass
class CheckResult:
    op: str
    seeds: int
    max_rel_error: float
    max_abs_error: float
    passed: bool
    seconds: float
    skipped: int = 0
    checked: int = 0


def central_difference(f: Callable[[], tuple], arr: np.ndarray, h: float = H,
                       coords: Optional[np.ndarray] = None, want: Optional[int] = None):
    """d f / d arr by central differences, perturbing ``arr`` in place.

    ``f`` returns ``(value, kink_pattern)``. A coordinate whose +h or -h
    evaluation changes the kink pattern (max-pool winners, activation input
    signs) straddles a non-differentiable point and is left as NaN. Only
    ``coords`` (flat indices) are visited when given, stopping once ``want``
    valid ones are found. Returns the gradient and the number skipped.
    """
    grad = np.full(arr.shape, np.nan)
    flat = arr.reshape(-1)
    flat_grad = grad.reshape(-1)
    _, base = f()
    found = skipped = 0
    for n_tried, i in enumerate(range(flat.size) if coords is None else coords):
        if want is not None and n_tried >= MAX_TRIES_PER_WANTED * want:
            break
        old = flat[i]
        flat[i] = old + h
        up, p_up = f()
        flat[i] = old - h
        down, p_down = f()
        flat[i] = old
        if base is not None and (p_up != base or p_down != base):
            skipped += 1
            continue
        flat_grad[i] = (up - down) / (2 * h)
        found += 1
        if want is not None and found >= want:
            break
    return grad, skipped


def compare(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float, bool]:
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale >= SMALL
    rel = err[big] / scale[big]
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs = float(err[~big].max()) if (~big).any() else 0.0
    ok = bool((rel <= RTOL).all() and (err[~big] <= ATOL).all())
    return max_rel, max_abs, ok


def _check(build_case: Callable[[np.random.Generator], tuple], seed: int,
           max_coords: Optional[int] = None) -> tuple[float, float, bool, int, int]:
    """``build_case(rng)`` returns (forward, input arrays[, kink_pattern]).

    ``forward`` maps a dict of leaf tensors to an output tensor;
    ``kink_pattern`` maps the same dict to a hashable summary of every
    non-smooth decision taken in that forward pass.
    """
    rng = np.random.default_rng(seed)
    forward, arrays, *rest = build_case(rng)
    pattern = rest[0] if rest else None
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    out = forward(leaves)
    proj = rng.standard_normal(out.shape)
    loss = T.tsum(_project(out, proj))
    grads = T.backward(loss)

    work = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def scalar() -> tuple:
        t = {k: Tensor(v.copy(), name=k) for k, v in work.items()}
        with T.no_grad():
            o = forward(t)
            p = pattern(t) if pattern is not None else None
        return float((o.data * proj).sum()), p

    worst_rel, worst_abs, ok, skipped, checked = 0.0, 0.0, True, 0, 0
    for name, arr in work.items():
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = rng.permutation(arr.size)
        numeric, skip = central_difference(scalar, arr, H, coords, max_coords)
        r, a, good = compare(grads[name], numeric)
        worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, a), ok and good
        skipped += skip
        checked += int((~np.isnan(numeric)).sum())
    return worst_rel, worst_abs, ok, skipped, checked


def _project(out: Tensor, proj: np.ndarray) -> Tensor:
    return T._record(out.data * proj, "project", (out,), lambda g: (g * proj,))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _separated(rng, shape, step=0.01):
    """Distinct values at least ``step`` apart, so argmax is stable under perturbation."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * step - n * step / 2).reshape(shape) + rng.uniform(0, step / 10, shape)


def kink_pattern(trace: list) -> bytes:
    """Max-pool winners and activation-input signs from a traced forward pass."""
    parts = []
    for layer, xin in trace:
        if isinstance(layer, Pool):
            parts.append(T.pool_argmax(xin, layer.kernel, layer.stride).tobytes())
        elif isinstance(layer, ActivationSlot):
            parts.append(np.packbits(xin > 0).tobytes())
    return b"|".join(parts)


# cases ---------------------------------------------------------------------------------

def case_conv2d(rng):
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    arrays = {"x": rng.standard_normal((2, 3, 7, 7)), "w": rng.standard_normal((4, 3, 3, 3)),
              "b": rng.standard_normal(4)}
    return (lambda t: T.conv2d(t["x"], t["w"], t["b"], stride, padding)), arrays


def case_dense(rng):
    arrays = {"x": rng.standard_normal((4, 6)), "w": rng.standard_normal((6, 5)),
              "b": rng.standard_normal(5)}
    return (lambda t: T.dense(t["x"], t["w"], t["b"])), arrays


def case_max_pool2d(rng):
    k, stride = [(2, 2), (3, 2), (2, 1)][int(rng.integers(0, 3))]
    arrays = {"x": _separated(rng, (2, 2, 6, 6))}
    return (lambda t: T.max_pool2d(t["x"], k, stride)), arrays


def case_softmax_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    arrays = {"z": 2 * rng.standard_normal((4, 5))}

    def fwd(t):
        return T.reshape(T.softmax_cross_entropy(t["z"], labels), (1,))

    return fwd, arrays


def _activation_case(kind):
    def case(rng):
        spec = A.ActivationSpec(kind)
        arrays = {"x": _away_from_zero(rng, (3, 4, 2, 2))}
        if kind == "prelu":
            arrays["slopes"] = rng.uniform(0.05, 0.5, size=4)
            return (lambda t: A.activation(t["x"], spec, t["slopes"])), arrays
        return (lambda t: A.activation(t["x"], spec)), arrays
    return case


def case_mixture(rng):
    mix = A.default_mixture()
    arrays = {"x": _away_from_zero(rng, (3, 4, 2, 2)), "slopes": rng.uniform(0.05, 0.5, size=4)}
    return (lambda t: A.mixture(t["x"], mix, [None, t["slopes"], None, None])), arrays


def _network_case(arch, n):
    def case(rng):
        net = build(arch, dtype=np.float64)
        init_weights(net, int(rng.integers(0, 2**31)))
        set_all_slots(net, A.default_mixture())
        for name, t in net.params.items():
            if name.endswith(".bias"):
                t.assign(0.1 * rng.standard_normal(t.shape))
            if name.endswith(".prelu_slope"):
                t.assign(rng.uniform(0.05, 0.5, t.shape))
        arrays = {name: np.array(t.data) for name, t in net.params.items()}
        x = rng.standard_normal((n,) + net.input_shape)
        labels = rng.integers(0, net.trace_shapes()[net.layers[-1].id][0], size=n)

        last_trace: list = []

        def fwd(t):
            net.params = t
            last_trace.clear()
            logits = net.forward(Tensor(x), trace=last_trace)
            return T.reshape(T.softmax_cross_entropy(logits, labels), (1,))

        def kinks(t):
            # summarizes the forward pass that just ran on ``t``
            return kink_pattern(last_trace)

        return fwd, arrays, kinks
    return case


OP_CASES = {
    "conv2d": case_conv2d,
    "dense": case_dense,
    "max_pool2d": case_max_pool2d,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "relu": _activation_case("relu"),
    "leaky_relu": _activation_case("leaky_relu"),
    "prelu": _activation_case("prelu"),
    "elu": _activation_case("elu"),
    "softplus": _activation_case("softplus"),
    "mixture": case_mixture,
}

NETWORK_CASES = {
    "lenet-mnist": _network_case("lenet-mnist", 2),
    "small-cifar-10": _network_case("small-cifar-10", 1),
}


def run(ops: Optional[list[str]] = None, seeds: int = 20, network_seeds: int = 2,
        network_coords: int = 8) -> list[CheckResult]:
    """Check the named ops (all when ``ops`` is empty)."""
    known = list(OP_CASES) + list(NETWORK_CASES)
    ops = list(ops) if ops else known
    unknown = [o for o in ops if o not in known]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; known: {known}")
    results = []
    for op in ops:
        t0 = time.perf_counter()
        if op in OP_CASES:
            case, n, coords = OP_CASES[op], seeds, None
        else:
            case, n, coords = NETWORK_CASES[op], network_seeds, network_coords
        worst_rel, worst_abs, ok, skipped, checked = 0.0, 0.0, True, 0, 0
        for seed in range(n):
            r, a, good, skip, done = _check(case, seed, coords)
            worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, a), ok and good
            skipped += skip
            checked += done
        ok = ok and checked > 0
        results.append(CheckResult(op, n, worst_rel, worst_abs, ok, time.perf_counter() - t0,
                                   skipped, checked))
    return results
