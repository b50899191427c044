"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` records the primitive that produced it together with the
values its backward rule needs. :func:`grad` walks the recorded graph from a
scalar head and returns gradients for the requested leaves without touching
the graph, so several heads of one forward pass can be differentiated in
turn.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        leaves = [n for n in _toposort(self) if not n._parents and n.requires_grad]
        for leaf, g in zip(leaves, grad(self, leaves)):
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible extents {a.shape} and {b.shape}") from None


def _toposort(root):
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


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each of ``inputs``.

    Inputs not connected to ``loss`` receive zeros. The graph is left intact.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [np.array(grads[id(x)]) if id(x) in grads else np.zeros_like(x.data) for x in inputs]


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    e = float(exponent)
    out = a.data ** e
    return _make(out, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    """Square root; the derivative at exactly zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), back, "sqrt")


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _sigmoid(x):
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = _unbroadcast(np.einsum("...i,...ij->...j", g, ad), bd.shape) if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, ad.shape), gb
        if ad.ndim == 1:
            ga = np.einsum("...j,...ij->...i", g, bd)
            gb = np.multiply.outer(ad, g) if g.ndim == 1 else ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), back, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view extents {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out), (a,), back, "slice")


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible extents {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, tensors, back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(a, axis):
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)
    return _make(np.array(out), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


# ---------------------------------------------------------------- stencils


def conv3x3(x, weight, bias=None, padding="periodic"):
    """3x3 same-size convolution (cross-correlation).

    ``x`` is (B, C_in, H, W), ``weight`` is (C_out, C_in, 3, 3), ``bias`` is
    (C_out,). Boundary values come from periodic wrap or edge replication.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"conv3x3: incompatible extents input {x.shape}, weight {weight.shape}")
    mode = kernels.padding_code(padding)
    B, C, H, W = x.shape
    cout = weight.shape[0]
    cols = kernels.im2col3x3(x.data, mode)
    wmat = weight.data.reshape(cout, C * 9)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv3x3: bias extents {bias.shape}, expected ({cout},)")
        out += bias.data[:, None]
        parents.append(bias)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, B * H * W)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = kernels.col2im3x3(wmat.T @ g2, B, C, H, W, mode) if x.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=1))
        return tuple(res)

    out = np.ascontiguousarray(out.reshape(cout, B, H, W).transpose(1, 0, 2, 3))
    return _make(out, parents, back, "conv3x3")


def darcy_flux_divergence(K, p, h):
    """div(K grad p) with arithmetic-mean face coefficients and zero-flux walls.

    ``K`` and ``p`` have shape (..., H, W).
    """
    K, p = as_tensor(K), as_tensor(p)
    if K.shape != p.shape or K.ndim < 2:
        raise ShapeError(f"darcy_stencil: incompatible extents K {K.shape}, p {p.shape}")
    shape = p.shape
    K3 = K.data.reshape(-1, *shape[-2:])
    p3 = p.data.reshape(-1, *shape[-2:])
    out = kernels.darcy_apply(K3, p3, h).reshape(shape)

    def back(g):
        gK, gp = kernels.darcy_vjp(K3, p3, g.reshape(K3.shape), h)
        return gK.reshape(shape), gp.reshape(shape)

    return _make(out, (K, p), back, "darcy_stencil")


def _wavenumbers(n, h):
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
    if n % 2 == 0:
        k[n // 2] = 0.0  # Nyquist mode has no real derivative
    return k


def spectral_derivative(a, axis, h):
    """Fourier derivative along ``axis`` of a periodic field with spacing ``h``."""
    a = as_tensor(a)
    n = a.shape[axis]
    shape = [1] * a.ndim
    shape[axis] = n
    ik = (1j * _wavenumbers(n, h)).reshape(shape)

    def apply(v):
        return np.fft.ifft(ik * np.fft.fft(v, axis=axis), axis=axis).real

    # the operator is real and antisymmetric, so its adjoint is its negation
    return _make(apply(a.data), (a,), lambda g: (-apply(g),), "spectral_d")


def central_derivative(a, axis, h):
    """Second-order periodic central difference along ``axis``."""
    a = as_tensor(a)

    def apply(v):
        return (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis)) / (2.0 * h)

    return _make(apply(a.data), (a,), lambda g: (-apply(g),), "central_d")


def custom(data, parents: Sequence[Tensor], backward: Callable, op="custom"):
    """Record a user-defined primitive (used by test stubs)."""
    return _make(np.asarray(data, dtype=np.float64), tuple(as_tensor(p) for p in parents), backward, op)
