"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the result remembers its parents and a closure mapping the output
gradient to one gradient per parent; :func:`backward` walks that graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = _parents
        self._backward: Optional[Callable] = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam moments."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def reset_optimizer_state(self):
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls add to existing gradients; clear them with ``zero_grad``
    (or let the optimizer do it).
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    half = a.dtype.type(0.5)
    out = half * (1 + np.tanh(half * a.data))
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg = x < 0
    em1 = np.expm1(np.minimum(x, 0))
    out = np.where(neg, em1, x)
    slope = np.where(neg, em1 + 1, 1).astype(x.dtype)
    return _result(out, (a,), lambda g: (g * slope,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values; cuts the graph so nothing upstream receives gradient."""
    return Tensor(a.data)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "elu": elu,
    "scale": scale,
}


def elementwise(op_kind: str, *operands):
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _check_nonempty(a: Tensor, what: str):
    if a.size == 0:
        raise ValueError(f"{what} of an empty tensor")


def mean(a: Tensor) -> Tensor:
    _check_nonempty(a, "mean")
    n = a.size
    shape, dt = a.shape, a.dtype
    return _result(np.asarray(a.data.mean(dtype=dt)), (a,),
                   lambda g: (np.full(shape, g / n, dtype=dt),))


def mean_abs(a: Tensor) -> Tensor:
    _check_nonempty(a, "mean_abs")
    x = a.data
    n = x.size
    return _result(np.asarray(np.abs(x).mean(dtype=x.dtype)), (a,),
                   lambda g: (np.sign(x) * (g / n),))


def mean_sq(a: Tensor) -> Tensor:
    _check_nonempty(a, "mean_sq")
    x = a.data
    n = x.size
    return _result(np.asarray((x * x).mean(dtype=x.dtype)), (a,),
                   lambda g: (x * (2 * g / n),))


_REDUCE = {"mean": mean, "mean_abs": mean_abs, "mean_sq": mean_sq}


def reduce(op_kind: str, a: Tensor) -> Tensor:
    try:
        fn = _REDUCE[op_kind]
    except KeyError:
        raise ValueError(f"unknown reduction {op_kind!r}") from None
    return fn(a)


def add_all(terms: Sequence[Tensor]) -> Tensor:
    """Sum a list of same-shape tensors left to right."""
    if not terms:
        raise ValueError("add_all needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# --------------------------------------------------------------------------
# spatial ops
# --------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: input {x.shape} too small for weight {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)
    padded_shape = xp.shape

    def _backward(g):
        g = g.reshape(n, c_out, ho * wo)
        dx = dw = db = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            dxp = _kernels.col2im(dcols, padded_shape, k, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        if weight.requires_grad:
            dw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2))
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _result(out, (x,),
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: {t.shape} does not match {ref} outside the channel axis")
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

    return _result(out, tuple(inputs), _backward)


def avg_pool3x3(x: Tensor) -> Tensor:
    """Stride-1, unpadded 3x3 box mean."""
    if x.data.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
        raise ValueError(f"avg_pool3x3 needs H, W >= 3, got {x.shape}")
    out = _kernels.pool3_forward(np.ascontiguousarray(x.data))
    shape = x.shape
    return _result(out, (x,), lambda g: (_kernels.pool3_backward(np.ascontiguousarray(g), shape),))
