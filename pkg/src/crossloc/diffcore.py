"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the handful of operations the encoders and losses need are provided.
A graph is any Python callable ``graph(inputs, params) -> Tensor`` built from
these ops; ``forward_backward`` and ``gradient_check`` drive it.
"""
from __future__ import annotations

import contextlib

import numpy as np

NORM_EPS = 1e-12

_monitors: list["KinkMonitor"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class KinkMonitor:
    """Records how close a forward pass came to a non-differentiable point.

    Used by gradient checks to reject sample points where a central
    difference would straddle a ReLU/hinge/max/smooth-L1 kink.
    """

    def __init__(self):
        self.margin = np.inf

    def record(self, value):
        self.margin = min(self.margin, float(value))


@contextlib.contextmanager
def watch_kinks():
    mon = KinkMonitor()
    _monitors.append(mon)
    try:
        yield mon
    finally:
        _monitors.remove(mon)


def _record_kink(values):
    if _monitors and values.size:
        m = float(np.min(values))
        for mon in _monitors:
            mon.record(m)


# -- elementwise and linear ops -------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a, c: float):
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), back, "matmul")


def relu(a):
    a = as_tensor(a)
    _record_kink(np.abs(a.data))
    mask = a.data > 0
    # written so NaN passes through and divergence stays visible downstream
    return _make(np.where(a.data <= 0, 0.0, a.data), (a,), lambda g: (g * mask,), "relu")


def hinge(a):
    """max(0, a); kept separate from relu so graphs read like the loss formulas."""
    out = relu(a)
    out.op = "hinge"
    return out


def smooth_l1(a, beta: float = 1.0):
    a = as_tensor(a)
    t = np.abs(a.data)
    _record_kink(np.abs(t - beta))
    quad = t < beta
    val = np.where(quad, 0.5 * a.data ** 2 / beta, t - 0.5 * beta)
    return _make(val, (a,), lambda g: (g * np.where(quad, a.data / beta, np.sign(a.data)),),
                 "smooth_l1")


# -- reductions --------------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)
    out.op = "mean"
    return out


def max(a, axis=-1):  # noqa: A001
    """Max reduction; the gradient flows to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    top = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if _monitors:
        below = np.where(a.data < top, top - a.data, np.inf)
        gap = np.min(below, axis=axis)
        _record_kink(gap[np.isfinite(gap)])

    def back(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _make(np.squeeze(top, axis), (a,), back, "max")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), back, "softmax")


def norm(a, axis=-1, eps: float = NORM_EPS):
    """Euclidean norm along ``axis``; gradient is zero where the norm is <= eps."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data ** 2, axis=axis))
    safe = np.expand_dims(np.where(n > eps, n, 1.0), axis)
    live = np.expand_dims(n > eps, axis)

    def back(g):
        return (np.where(live, np.expand_dims(g, axis) * a.data / safe, 0.0),)

    return _make(n, (a,), back, "norm")


def l2_normalize(a, axis=-1, eps: float = NORM_EPS):
    """x / ||x|| along ``axis``; slices with norm <= eps map to zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data ** 2, axis=axis, keepdims=True))
    live = ~(n <= eps)  # NaN norms stay live so they propagate
    safe = np.where(live, n, 1.0)
    y = np.where(live, a.data / safe, 0.0)

    def back(g):
        proj = g - y * np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(live, proj / safe, 0.0),)

    return _make(y, (a,), back, "l2_normalize")


# -- structural ops ----------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, indices, axis=0):
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back, "take")


# -- parameters and drivers --------------------------------------------------


class ParamStore:
    """Named float64 parameters with matching gradient buffers."""

    def __init__(self, params=None):
        self.params = {}
        self.grads = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self):
        out = ParamStore()
        for name, value in self.params.items():
            out.params[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def subset(self, prefix):
        out = ParamStore()
        for name, value in self.params.items():
            if name.startswith(prefix):
                out.params[name] = value
                out.grads[name] = self.grads[name]
        return out

    def update(self, other: "ParamStore"):
        for name, value in other.items():
            self[name] = value

    def leaves(self):
        return {name: Tensor(value, requires_grad=True) for name, value in self.params.items()}


def forward_backward(graph, inputs, params: ParamStore):
    """Evaluate ``graph`` and back-propagate from its scalar output.

    Returns the output value and a new ParamStore whose ``grads`` hold the
    derivatives; ``params`` itself is not modified.
    """
    leaves = params.leaves()
    out = graph(inputs, leaves)
    if out.data.size != 1:
        raise ShapeError(f"forward_backward: graph output must be scalar, got shape {out.shape}")
    out.backward()
    result = ParamStore()
    for name, leaf in leaves.items():
        result.params[name] = params[name]
        result.grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out.data.copy(), result


def evaluate(graph, inputs, params: ParamStore) -> float:
    leaves = {name: Tensor(value) for name, value in params.items()}
    out = graph(inputs, leaves)
    if out.data.size != 1:
        raise ShapeError(f"graph output must be scalar, got shape {out.shape}")
    return out.item()


def gradient_check(graph, inputs, params: ParamStore, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    _, analytic = forward_backward(graph, inputs, params)
    worst = 0.0
    for name in params:
        p = params.params[name]
        flat = p.reshape(-1)
        ga = analytic.grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate(graph, inputs, params)
            flat[i] = orig - epsilon
            down = evaluate(graph, inputs, params)
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            worst = np.maximum(worst, abs(ga[i] - num) / np.maximum(1.0, abs(num)))
    return float(worst)


def kink_margin(graph, inputs, params: ParamStore) -> float:
    """Smallest distance of any kinked op input from its kink during a forward pass."""
    with watch_kinks() as mon:
        evaluate(graph, inputs, params)
    return mon.margin
