"""Activation functions and the equal-weight activation mixture.

A mixture site computes ``sum_i beta_i * F_i(x)`` over k branch activations.
Its derivative is the matching weighted sum of branch derivatives, so a
single backward pass delivers the aggregate of every branch's gradient.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import ShapeError, Tensor, _record

KINDS = ("relu", "leaky_relu", "prelu", "elu", "softplus", "identity")

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0
PRELU_INIT = 0.25


class ActivationError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationSpec:
    kind: str
    leaky_slope: Optional[float] = None
    elu_alpha: Optional[float] = None
    prelu_init: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ActivationError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        wanted = {"leaky_relu": "leaky_slope", "elu": "elu_alpha", "prelu": "prelu_init"}.get(self.kind)
        for attr in ("leaky_slope", "elu_alpha", "prelu_init"):
            if attr != wanted and getattr(self, attr) is not None:
                raise ActivationError(f"{attr} is not a parameter of {self.kind}")
        if wanted is not None and getattr(self, wanted) is None:
            object.__setattr__(self, wanted,
                               {"leaky_slope": LEAKY_SLOPE, "elu_alpha": ELU_ALPHA,
                                "prelu_init": PRELU_INIT}[wanted])
        if self.kind == "elu" and not self.elu_alpha > 0:
            raise ActivationError(f"elu alpha must be > 0, got {self.elu_alpha}")

    @property
    def learnable(self) -> bool:
        return self.kind == "prelu"

    def encode(self) -> str:
        param = {"leaky_relu": self.leaky_slope, "elu": self.elu_alpha,
                 "prelu": self.prelu_init}.get(self.kind)
        return self.kind if param is None else f"{self.kind}:{param!r}"


@dataclass(frozen=True)
class MixedActivation:
    branches: tuple
    weights: tuple = field(default=())

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ActivationError("a mixture needs at least one branch")
        weights = tuple(float(w) for w in self.weights) if self.weights else \
            tuple(1.0 / len(branches) for _ in branches)
        if len(weights) != len(branches):
            raise ActivationError(f"{len(weights)} weights for {len(branches)} branches")
        if abs(math.fsum(weights) - 1.0) > 1e-12:
            raise ActivationError(f"mixture weights must sum to 1, got {math.fsum(weights)!r}")
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "weights", weights)

    @property
    def k(self) -> int:
        return len(self.branches)

    @property
    def equal(self) -> bool:
        return all(w == 1.0 / self.k for w in self.weights)

    def encode(self) -> str:
        tail = "equal" if self.equal else ",".join(repr(w) for w in self.weights)
        return f"mix({','.join(b.encode() for b in self.branches)};{tail})"


Activation = Union[ActivationSpec, MixedActivation]


def default_mixture() -> MixedActivation:
    return MixedActivation((ActivationSpec("relu"), ActivationSpec("prelu"),
                            ActivationSpec("elu"), ActivationSpec("softplus")))


_ALIASES = {"leakyrelu": "leaky_relu", "leaky-relu": "leaky_relu", "lrelu": "leaky_relu",
            "linear": "identity", "none": "identity"}


def parse_spec(text: str) -> ActivationSpec:
    name, _, arg = text.strip().partition(":")
    kind = name.strip().lower()
    kind = _ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ActivationError(f"unknown activation {text!r}")
    if not arg:
        return ActivationSpec(kind)
    try:
        value = float(arg)
    except ValueError:
        raise ActivationError(f"bad activation parameter in {text!r}") from None
    key = {"leaky_relu": "leaky_slope", "elu": "elu_alpha", "prelu": "prelu_init"}.get(kind)
    if key is None:
        raise ActivationError(f"{kind} takes no parameter: {text!r}")
    return ActivationSpec(kind, **{key: value})


_MIX_RE = re.compile(r"^\s*mix\s*\((.*)\)\s*$", re.IGNORECASE)


def parse_activation(text: str) -> Activation:
    """Parse ``relu``, ``elu:1.0`` or ``mix(relu,prelu:0.25;equal)``."""
    m = _MIX_RE.match(text)
    if not m:
        return parse_spec(text)
    body, sep, tail = m.group(1).partition(";")
    branches = tuple(parse_spec(p) for p in body.split(",") if p.strip())
    tail = tail.strip()
    if not sep or tail in ("", "equal"):
        return MixedActivation(branches)
    try:
        weights = tuple(float(w) for w in tail.split(","))
    except ValueError:
        raise ActivationError(f"bad mixture weights in {text!r}") from None
    return MixedActivation(branches, weights)


# numeric kernels ------------------------------------------------------------

def _channel_view(slopes: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or slopes.shape != (x.shape[1],):
        raise ShapeError(f"prelu slopes {slopes.shape} do not match channels of input {x.shape}")
    return slopes.reshape((1, -1) + (1,) * (x.ndim - 2))


def _check_slopes(spec: ActivationSpec, slopes) -> None:
    if spec.kind == "prelu" and slopes is None:
        raise ActivationError("prelu needs per-channel slopes")
    if spec.kind != "prelu" and slopes is not None:
        raise ActivationError(f"{spec.kind} takes no slopes")


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def act_forward(spec: ActivationSpec, x: np.ndarray, slopes: Optional[np.ndarray] = None) -> np.ndarray:
    _check_slopes(spec, slopes)
    kind = spec.kind
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, x * spec.leaky_slope)
    if kind == "prelu":
        return np.where(x > 0, x, x * _channel_view(slopes, x))
    if kind == "elu":
        return np.where(x > 0, x, spec.elu_alpha * np.expm1(np.minimum(x, 0)))
    if kind == "softplus":
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return x


def act_derivative(spec: ActivationSpec, x: np.ndarray, slopes: Optional[np.ndarray] = None) -> np.ndarray:
    """Elementwise F'(x); piecewise-linear kinds take the negative-side value at 0."""
    kind = spec.kind
    one = np.ones((), dtype=x.dtype)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "leaky_relu":
        return np.where(x > 0, one, np.asarray(spec.leaky_slope, dtype=x.dtype))
    if kind == "prelu":
        return np.where(x > 0, one, _channel_view(slopes, x).astype(x.dtype))
    if kind == "elu":
        return np.where(x > 0, one, spec.elu_alpha * np.exp(np.minimum(x, 0)))
    if kind == "softplus":
        return sigmoid(x)
    return np.ones_like(x)


def _slope_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, x.ndim))
    return (upstream * np.where(x > 0, 0, x)).sum(axis=axes)


def act_backward(spec: ActivationSpec, x: np.ndarray, upstream: np.ndarray,
                 slopes: Optional[np.ndarray] = None):
    """Return ``(dx, dslopes)``; ``dslopes`` is None unless the kind is prelu."""
    _check_slopes(spec, slopes)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} != input {x.shape}")
    dx = upstream * act_derivative(spec, x, slopes)
    dslopes = _slope_grad(x, upstream) if spec.kind == "prelu" else None
    return dx, dslopes


def mixture_forward(mix: MixedActivation, x: np.ndarray,
                    slopes: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    if len(slopes) != mix.k:
        raise ActivationError(f"{len(slopes)} slope entries for {mix.k} branches")
    out = None
    for beta, spec, s in zip(mix.weights, mix.branches, slopes):
        y = beta * act_forward(spec, x, s)
        out = y if out is None else out + y
    return out


def mixture_derivative(mix: MixedActivation, x: np.ndarray,
                       slopes: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    total = None
    for beta, spec, s in zip(mix.weights, mix.branches, slopes):
        d = beta * act_derivative(spec, x, s)
        total = d if total is None else total + d
    return total


def mixture_backward(mix: MixedActivation, x: np.ndarray, upstream: np.ndarray,
                     slopes: Sequence[Optional[np.ndarray]]):
    """Return ``(dx, [dslopes per branch])``; non-prelu branches get None."""
    if len(slopes) != mix.k:
        raise ActivationError(f"{len(slopes)} slope entries for {mix.k} branches")
    for spec, s in zip(mix.branches, slopes):
        _check_slopes(spec, s)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} != input {x.shape}")
    dx = upstream * mixture_derivative(mix, x, slopes)
    dslopes = [beta * _slope_grad(x, upstream) if spec.kind == "prelu" else None
               for beta, spec in zip(mix.weights, mix.branches)]
    return dx, dslopes


# tape ops -------------------------------------------------------------------

def activation(x: Tensor, spec: ActivationSpec, slopes: Optional[Tensor] = None) -> Tensor:
    sd = None if slopes is None else slopes.data
    _check_slopes(spec, sd)
    xd = x.data
    out = act_forward(spec, xd, sd)

    def bw(g):
        dx, ds = act_backward(spec, xd, g, sd)
        return (dx,) if ds is None else (dx, ds.astype(slopes.dtype))

    parents = (x,) if slopes is None else (x, slopes)
    return _record(out, spec.kind, parents, bw)


def mixture(x: Tensor, mix: MixedActivation, slopes: Sequence[Optional[Tensor]]) -> Tensor:
    if len(slopes) != mix.k:
        raise ActivationError(f"{len(slopes)} slope entries for {mix.k} branches")
    sds = [None if s is None else s.data for s in slopes]
    for spec, s in zip(mix.branches, sds):
        _check_slopes(spec, s)
    xd = x.data
    out = mixture_forward(mix, xd, sds)
    present = [s for s in slopes if s is not None]

    def bw(g):
        dx, dss = mixture_backward(mix, xd, g, sds)
        return (dx,) + tuple(d.astype(s.dtype) for d, s in zip(dss, slopes) if s is not None)

    return _record(out, "mixture", (x, *present), bw)


def apply(x: Tensor, act: Activation, slopes: Sequence[Optional[Tensor]]) -> Tensor:
    """Dispatch to :func:`activation` or :func:`mixture`."""
    if isinstance(act, MixedActivation):
        return mixture(x, act, slopes)
    return activation(x, act, slopes[0] if slopes else None)
