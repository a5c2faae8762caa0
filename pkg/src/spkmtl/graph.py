"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation evaluates eagerly and records a :class:`Node` holding its
value, its inputs and a backward rule.  :func:`backward` walks the recorded
graph in reverse topological order and accumulates gradients.

Custom-gradient nodes (the gradient reversal layers) carry their own backward
closure and set ``non_derivative=True`` so that :func:`finite_diff_check`
refuses graphs whose backward is intentionally not the derivative of the
forward.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_next_id = itertools.count()


class GraphError(Exception):
    """Raised for malformed graphs: bad shapes, non-scalar losses, refused checks."""


class ShapeError(GraphError):
    pass


class Node:
    """A value in the computation graph.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    input (``None`` for inputs that receive nothing).
    """

    __slots__ = ("id", "op", "inputs", "value", "grad", "backward_fn", "name",
                 "requires_grad", "non_derivative", "attrs")

    def __init__(self, value, op="leaf", inputs=(), backward_fn=None, name=None,
                 requires_grad=None, non_derivative=False):
        self.id = next(_next_id)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.backward_fn = backward_fn
        self.name = name
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in self.inputs)
        self.requires_grad = requires_grad
        self.non_derivative = non_derivative
        self.attrs = {}

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def label(self):
        return f"{self.op}#{self.id}" + (f"({self.name})" if self.name else "")

    def __repr__(self):
        return f"Node({self.label()}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def param(value, name=None) -> Node:
    """Trainable leaf."""
    return Node(value, op="param", name=name, requires_grad=True)


def constant(value, name=None) -> Node:
    return Node(value, op="const", name=name, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Node, b: Node, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: cannot broadcast {a.label()} {a.shape} with {b.label()} {b.shape}"
        ) from None


def _check_finite(node: Node):
    if not np.all(np.isfinite(node.value)):
        raise GraphError(f"non-finite value produced by {node.label()}")


# elementwise binary ops -----------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, "mul", (a, b), bw)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.value / b.value, b.shape)

    return Node(a.value / b.value, "div", (a, b), bw)


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, factor: float) -> Node:
    """Multiply by a detached scalar constant."""
    a = as_node(a)
    factor = float(factor)
    out = Node(a.value * factor, "scale", (a,), lambda g: (g * factor,))
    out.attrs["factor"] = factor
    return out


def power(a, exponent: float) -> Node:
    a = as_node(a)
    p = float(exponent)
    return Node(a.value ** p, "pow", (a,), lambda g: (g * p * a.value ** (p - 1),))


def _mm(a, b):
    """``a @ b`` with stacked ``a`` and 2-d ``b`` flattened into one GEMM."""
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return a @ b


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.label()} {a.shape} vs {b.label()} {b.shape}"
        )

    def bw(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = g.reshape(-1) @ av.reshape(-1, bv.shape[0])
            return ga, gb
        ga = _mm(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif av.ndim > 2 and bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return (None if ga is None else _unbroadcast(ga, av.shape)), gb

    return Node(_mm(a.value, b.value), "matmul", (a, b), bw)


# elementwise unary ops ------------------------------------------------------

def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return Node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Node:
    a = as_node(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    return Node(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def relu(a) -> Node:
    a = as_node(a)
    m = a.value > 0
    return Node(a.value * m, "relu", (a,), lambda g: (g * m,))


def identity(a) -> Node:
    a = as_node(a)
    return Node(a.value, "identity", (a,), lambda g: (g,))


# reductions and reshaping ---------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    a = as_node(a)
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(y, "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def take(a, index, axis=-1) -> Node:
    """``np.take_along_axis`` with a constant integer index array."""
    a = as_node(a)
    index = np.asarray(index)
    y = np.take_along_axis(a.value, index, axis=axis)

    def bw(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, index, g, axis=axis)
        return (out,)

    return Node(y, "take", (a,), bw)


# normalisation --------------------------------------------------------------

def softmax(a, axis=-1, mask=None) -> Node:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    a = as_node(a)
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Node(y, "softmax", (a,), bw)


def log_softmax(a, axis=-1) -> Node:
    a = as_node(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Node(y, "log_softmax", (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5) -> Node:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: {x.label()} {x.shape} vs gain {gain.shape} / bias {bias.shape}"
        )
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value

    def bw(g):
        gx_hat = g * gain.value
        n = xv.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    out = Node(y, "layer_norm", (x, gain, bias), bw)
    out.attrs["eps"] = eps
    return out


# custom-gradient extension point --------------------------------------------

def custom(value, inputs: Sequence[Node], backward_fn: Callable, op: str,
           non_derivative=False) -> Node:
    """Create a node whose backward rule is supplied explicitly.

    The engine never inspects ``backward_fn``; set ``non_derivative`` when the
    rule is deliberately not the derivative of the forward computation.
    """
    return Node(value, op, inputs, backward_fn, non_derivative=non_derivative)


# backward pass -------------------------------------------------------------

def topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Returns gradients of all named trainable leaves.  Parameters that are
    reachable but receive no gradient get zeros.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got {loss.label()} {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None or node.backward_fn is None or not node.requires_grad:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"gradient shape {gi.shape} from {node.label()} does not match "
                    f"{inp.label()} {inp.shape}"
                )
            inp.grad = gi if inp.grad is None else inp.grad + gi
    grads = {}
    for node in order:
        if node.op == "param" and node.name is not None:
            grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads


def contains_non_derivative(root: Node) -> list[Node]:
    return [n for n in topological_order(root) if n.non_derivative]


# finite differences --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked_elements: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def finite_diff_check(scalar_fn: Callable[[dict[str, Node]], Node],
                      params: dict[str, np.ndarray], eps=1e-5, tolerance=1e-4,
                      max_elements: int | None = None, floor=1e-7, rng=None) -> GradCheckReport:
    """Compare ``backward`` against central differences.

    ``scalar_fn`` receives a dict of parameter nodes and returns a scalar
    loss node.  Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_elements`` only a random subset of each tensor is perturbed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}

    def evaluate(arrs):
        return scalar_fn({k: param(v, name=k) for k, v in arrs.items()})

    loss = evaluate(arrays)
    bad = contains_non_derivative(loss)
    if bad:
        raise GraphError(
            "non-derivative backward present: " + ", ".join(n.label() for n in bad)
        )
    analytic = backward(loss)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        ga = analytic.get(name, np.zeros_like(arr)).reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(evaluate(arrays).value)
            flat[i] = orig - eps
            fm = float(evaluate(arrays).value)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked_elements[name] = len(idx)
    return report


def values(nodes: Iterable[Node]) -> list[np.ndarray]:
    return [n.value for n in nodes]
