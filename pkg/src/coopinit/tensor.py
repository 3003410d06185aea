"""Dense arrays with a reverse-mode gradient tape.

A :class:`Tensor` wraps a read-only numpy array. Every differentiable op
returns a new tensor that remembers its inputs and a backward rule; calling
:func:`backward` on a scalar result walks that graph in reverse topological
order and accumulates gradients, summing contributions from every consumer
of a shared node.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True
_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = _frozen(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def assign(self, value: np.ndarray) -> None:
        """Replace the stored value. Only legal for leaves."""
        if self._parents:
            raise RuntimeError("cannot assign to a recorded intermediate tensor")
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign shape {value.shape} != {self.data.shape}")
        self.data = _frozen(value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _record(out: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` and attach it to the tape when any parent needs a gradient."""
    t = Tensor(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Reverse-accumulate d(root)/d(leaf) for every leaf on the tape.

    Sets ``.grad`` on each leaf that requires a gradient and returns a map
    from leaf name to gradient for the named ones.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g
            if node.name is not None:
                out[node.name] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node.op} backward produced {pg.shape} for input {p.shape}")
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg
    return out


# elementwise and structural ops ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, "scale", (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum()), "sum", (a,),
                   lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# dense ----------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with x of shape (N, D), weight (D, M), bias (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ wd + bias.data, "dense", (x, weight, bias), bw)


# convolution ----------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_check(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels C={c} != weight channels {cw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias {b.shape} != ({f},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output {ho}x{wo} for input {h}x{wd}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    return ho, wo


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation via an unrolled patch matrix (no kernel flip)."""
    xd, wd, bd = x.data, weight.data, bias.data
    ho, wo = _conv_check(xd, wd, bd, stride, padding)
    n, c, h, w_ = xd.shape
    f, _, kh, kw = wd.shape
    xp = _pad(xd, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wd.reshape(f, -1)
    out = (np.matmul(wmat, cols) + bd[:, None]).reshape(n, f, ho, wo)

    def bw(g):
        g3 = g.reshape(n, f, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gb = g3.sum(axis=(0, 2))
        if not x.requires_grad:
            return None, gw, gb
        gcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w_] if padding else gxp
        return gx, gw, gb

    return _record(out, "conv2d", (x, weight, bias), bw)


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Direct nested-loop cross-correlation. Slow; kept as a reference."""
    ho, wo = _conv_check(x, w, b, stride, padding)
    n, c, _, _ = x.shape
    f, _, kh, kw = w.shape
    xp = _pad(x, padding)
    out = np.zeros((n, f, ho, wo), dtype=np.result_type(x, w))
    for s in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[s, ch, i * stride + p, j * stride + q] * w[o, ch, p, q]
                    out[s, o, i, j] = acc
    return out


# pooling --------------------------------------------------------------------

def _pool_argmax(xd: np.ndarray, k: int, stride: int, ho: int, wo: int):
    def window(p, q):
        return xd[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride]

    out = window(0, 0)
    for pos in range(1, k * k):
        out = np.maximum(out, window(*divmod(pos, k)))
    # scanning backwards leaves the first row-major maximum on ties
    idx = np.full(out.shape, k * k - 1, dtype=np.int16)
    for pos in range(k * k - 2, -1, -1):
        idx = np.where(window(*divmod(pos, k)) == out, np.int16(pos), idx)
    return out, idx


def pool_argmax(x: np.ndarray, k: int, stride: Optional[int] = None) -> np.ndarray:
    """Window-local index of the element each max-pool output takes."""
    stride = k if stride is None else stride
    ho = (x.shape[2] - k) // stride + 1
    wo = (x.shape[3] - k) // stride + 1
    return _pool_argmax(x, k, stride, ho, wo)[1]


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Max over k x k windows; gradient goes to the first row-major maximum."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"max_pool2d: bad k={k} or stride={stride}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = xd.shape
    if h < k or w < k:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {k}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out, idx = _pool_argmax(xd, k, stride, ho, wo)
    disjoint = stride >= k

    def bw(g):
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        for pos in range(k * k):
            p, q = divmod(pos, k)
            part = np.where(idx == pos, g, 0)
            view = gx[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride]
            if disjoint:
                view[...] = part
            else:
                view += part
        return (gx,)

    return _record(out, "max_pool2d", (x,), bw)


def max_pool2d_naive(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for s in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[s, ch, i * stride, j * stride]
                    for p in range(k):
                        for q in range(k):
                            best = max(best, x[s, ch, i * stride + p, j * stride + q])
                    out[s, ch, i, j] = best
    return out


# loss -----------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (N, K) logits, got {logits.shape}")
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {y.shape} != ({n},)")
    if n and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise LabelError(f"label {bad} outside [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = -logp[rows, y].mean() if n else np.zeros((), dtype=z.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=z.dtype), "softmax_cross_entropy", (logits,), bw)
