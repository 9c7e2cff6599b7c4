"""Reverse-mode autodiff on numpy arrays with a per-call gradient tape.

Each op returns a new Tensor holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph once,
keeping intermediate gradients in a local map and accumulating only into leaf
``.grad`` arrays. Because nothing is cached on intermediate nodes, two
backward passes over graphs that share a subexpression (the joint VAD/SE
losses do this through the posterior) accumulate correctly.
"""

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    # Sum a broadcast gradient back down to the parent's shape.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- graph walk ---------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = _toposort(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = astensor(other)
        out = make_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)),
        )
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = astensor(other)
        return make_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape)),
        )

    def __rsub__(self, other):
        return astensor(other).__sub__(self)

    def __mul__(self, other):
        other = astensor(other)
        a, b = self.data, other.data
        return make_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = astensor(other)
        a, b = self.data, other.data
        return make_op(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return astensor(other).__truediv__(self)

    def __neg__(self):
        return make_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return make_op(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = astensor(other)
        a, b = self.data, other.data

        def backward(g):
            ga = g @ b.swapaxes(-1, -2)
            gb = a.swapaxes(-1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return make_op(a @ b, (self, other), backward)

    # -- elementwise --------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return make_op(y, (self,), lambda g: (g * y,))

    def log(self):
        a = self.data
        return make_op(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return make_op(y, (self,), lambda g: (g / (2 * y),))

    def tanh(self):
        y = np.tanh(self.data)
        return make_op(y, (self,), lambda g: (g * (1 - y * y),))

    def sigmoid(self):
        y = _sigmoid(self.data)
        return make_op(y, (self,), lambda g: (g * y * (1 - y),))

    def relu(self):
        a = self.data
        return make_op(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),))

    def leaky_relu(self, slope=0.01):
        a = self.data
        return make_op(
            np.where(a >= 0, a, slope * a),
            (self,),
            lambda g: (g * np.where(a >= 0, 1.0, slope),),
        )

    def abs(self):
        a = self.data
        return make_op(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def clip(self, lo, hi):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return make_op(np.clip(a, lo, hi), (self,), lambda g: (g * inside,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self.data

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, a.shape).copy(),)

        return make_op(a.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        a = self.data
        if axis is None:
            count = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= a.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self.data
        return make_op(a.reshape(shape), (self,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inverse = tuple(np.argsort(axes))
        return make_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def __getitem__(self, key):
        a = self.data

        def backward(g):
            out = np.zeros_like(a)
            np.add.at(out, key, g)
            return (out,)

        return make_op(a[key], (self,), backward)


def make_op(data, parents, backward):
    """Build an op output; records the tape only when a parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad_axis(t, axis, before, after):
    """Zero-pad one axis; the backward pass slices the pad back off."""
    t = astensor(t)
    widths = [(0, 0)] * t.data.ndim
    widths[axis] = (before, after)
    key = tuple(
        slice(before, before + t.data.shape[axis]) if i == axis else slice(None)
        for i in range(t.data.ndim)
    )
    return make_op(np.pad(t.data, widths), (t,), lambda g: (g[key],))


def _sigmoid(x):
    dtype = x.dtype if x.dtype.kind == "f" else np.dtype(np.float64)
    out = np.empty_like(x, dtype=dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Keep the open interval even where exp underflows past machine epsilon.
    tiny = np.finfo(dtype).tiny
    return np.clip(out, tiny, np.nextafter(dtype.type(1.0), dtype.type(0.0)))


def _toposort(root):
    # Iterative post-order walk; reversed, consumers come before producers.
    order = []
    seen = set()
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
        if node._backward is not None:
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order
