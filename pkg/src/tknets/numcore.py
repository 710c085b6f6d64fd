"""Dense-matrix computation graph with reverse-mode differentiation.

Every value is a 2-D float64 array. Graphs are built lazily from :class:`Node`
objects; :func:`forward` evaluates a root and caches every intermediate value,
:func:`backward` then pushes d(root)/d(node) back to every node that depends on
a trainable input.

    >>> w = param(np.eye(2), "W")
    >>> x = constant([[1.0, 2.0]])
    >>> y = reduce_sum(matmul(x, w))
    >>> forward(y)
    array([[3.]])
    >>> backward(y)
    >>> w.grad
    array([[1., 1.],
           [2., 2.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXP_CLAMP = 30.0

ACTIVATIONS = ("tanh", "relu", "sin", "cos", "square", "exp")


class GraphError(ValueError):
    """Base class for graph construction and evaluation failures."""


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class NotScalarError(GraphError):
    pass


class BackwardBeforeForwardError(GraphError):
    pass


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "parents", "attrs", "name", "value", "grad", "requires_grad")

    def __init__(self, op, parents=(), attrs=None, name=None, value=None, requires_grad=False):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.name = name
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    def label(self) -> str:
        return f"{self.op}:{self.name}" if self.name else self.op

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Node({self.label()}, shape={shape})"


def _as_2d(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def constant(value, name=None) -> Node:
    return Node("input", name=name, value=_as_2d(value))


def placeholder(name) -> Node:
    """Input node whose value is assigned later via ``node.value = ...``."""
    return Node("input", name=name)


def param(value, name=None) -> Node:
    """Trainable input. The array is used as-is (not copied) when already float64 2-D."""
    if isinstance(value, np.ndarray) and value.dtype == np.float64 and value.ndim == 2:
        arr = value
    else:
        arr = _as_2d(value)
    return Node("input", name=name, value=arr, requires_grad=True)


# ---------------------------------------------------------------- op builders


def matmul(a: Node, b: Node, name=None) -> Node:
    return Node("matmul", (a, b), name=name)


def add(a: Node, b: Node, name=None) -> Node:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``'s rows."""
    return Node("add", (a, b), name=name)


def mul(a: Node, b: Node, name=None) -> Node:
    """Elementwise product of two same-shape nodes."""
    return Node("mul", (a, b), name=name)


def activation(a: Node, kind: str, name=None) -> Node:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return Node("activation", (a,), {"kind": kind}, name=name)


def tanh(a, name=None):
    return activation(a, "tanh", name)


def relu(a, name=None):
    return activation(a, "relu", name)


def sin(a, name=None):
    return activation(a, "sin", name)


def cos(a, name=None):
    return activation(a, "cos", name)


def square(a, name=None):
    return activation(a, "square", name)


def exp(a, name=None):
    """Exponential with the input clamped to +-EXP_CLAMP."""
    return activation(a, "exp", name)


def softmax(a: Node, name=None) -> Node:
    """Row-wise softmax."""
    return Node("softmax", (a,), name=name)


def log_softmax(a: Node, name=None) -> Node:
    """Row-wise log-softmax, stable for large logits."""
    return Node("log_softmax", (a,), name=name)


def neg_sqdist(a: Node, b: Node, name=None) -> Node:
    """``out[n, j] = -||a[n] - b[j]||^2`` for row sets ``a`` (n x k) and ``b`` (m x k)."""
    return Node("neg_sqdist", (a, b), name=name)


def log(a: Node, name=None) -> Node:
    return Node("log", (a,), name=name)


def mean(a: Node, name=None) -> Node:
    return Node("mean", (a,), name=name)


def reduce_sum(a: Node, name=None) -> Node:
    return Node("sum", (a,), name=name)


def scale(a: Node, factor: float, name=None) -> Node:
    return Node("scale", (a,), {"factor": float(factor)}, name=name)


def transpose(a: Node, name=None) -> Node:
    return Node("transpose", (a,), name=name)


def concat(nodes, name=None) -> Node:
    """Column-wise concatenation."""
    nodes = tuple(nodes)
    if not nodes:
        raise ValueError("concat needs at least one node")
    if len(nodes) == 1:
        return nodes[0]
    return Node("concat", nodes, name=name)


# ------------------------------------------------------------------ traversal


def topological_order(root: Node) -> list[Node]:
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _check_finite(node: Node, arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what} at node {node.label()}")


def _shape_error(node, msg):
    raise ShapeError(f"node {node.label()}: {msg}")


def _eval(node: Node) -> np.ndarray:
    op = node.op
    vals = [p.value for p in node.parents]
    if op == "matmul":
        a, b = vals
        if a.shape[1] != b.shape[0]:
            _shape_error(node, f"cannot multiply {a.shape} by {b.shape}")
        return a @ b
    if op == "add":
        a, b = vals
        if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
            _shape_error(node, f"cannot add {b.shape} to {a.shape}")
        return a + b
    if op == "mul":
        a, b = vals
        if a.shape != b.shape:
            _shape_error(node, f"elementwise product of {a.shape} and {b.shape}")
        return a * b
    if op == "activation":
        (a,) = vals
        kind = node.attrs["kind"]
        if kind == "tanh":
            return np.tanh(a)
        if kind == "relu":
            return np.maximum(a, 0.0)
        if kind == "sin":
            return np.sin(a)
        if kind == "cos":
            return np.cos(a)
        if kind == "square":
            return a * a
        return np.exp(np.clip(a, -EXP_CLAMP, EXP_CLAMP))
    if op in ("softmax", "log_softmax"):
        (a,) = vals
        shifted = a - a.max(axis=1, keepdims=True)
        if op == "softmax":
            e = np.exp(shifted)
            return e / e.sum(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if op == "neg_sqdist":
        a, b = vals
        if a.shape[1] != b.shape[1]:
            _shape_error(node, f"row dims differ: {a.shape} vs {b.shape}")
        diff = a[:, None, :] - b[None, :, :]
        return -np.einsum("nmk,nmk->nm", diff, diff)
    if op == "log":
        (a,) = vals
        if np.any(a <= 0):
            raise NonFiniteError(f"log of non-positive value at node {node.label()}")
        return np.log(a)
    if op == "mean":
        return np.array([[vals[0].mean()]])
    if op == "sum":
        return np.array([[vals[0].sum()]])
    if op == "scale":
        return node.attrs["factor"] * vals[0]
    if op == "transpose":
        return vals[0].T.copy()
    if op == "concat":
        rows = {v.shape[0] for v in vals}
        if len(rows) != 1:
            _shape_error(node, f"row counts differ: {[v.shape for v in vals]}")
        return np.concatenate(vals, axis=1)
    raise GraphError(f"unknown op {op!r}")


def forward(root: Node) -> np.ndarray:
    """Evaluate ``root``, caching every intermediate value on its node."""
    for node in topological_order(root):
        node.grad = None
        if node.op == "input":
            if node.value is None:
                raise GraphError(f"input node {node.label()} has no value")
            _check_finite(node, node.value, "input")
            continue
        node.value = _eval(node)
        _check_finite(node, node.value, "value")
    return root.value


def _needs_grad(order: list[Node]) -> set[int]:
    needs = set()
    for node in order:
        if node.requires_grad or any(id(p) in needs for p in node.parents):
            needs.add(id(node))
    return needs


def _parent_grads(node: Node, g: np.ndarray) -> list[np.ndarray]:
    op = node.op
    vals = [p.value for p in node.parents]
    if op == "matmul":
        a, b = vals
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = vals
        gb = g.sum(axis=0, keepdims=True) if b.shape != a.shape else g
        return [g, gb]
    if op == "mul":
        a, b = vals
        return [g * b, g * a]
    if op == "activation":
        (a,) = vals
        kind = node.attrs["kind"]
        y = node.value
        if kind == "tanh":
            return [g * (1.0 - y * y)]
        if kind == "relu":
            return [g * (a > 0)]
        if kind == "sin":
            return [g * np.cos(a)]
        if kind == "cos":
            return [-g * np.sin(a)]
        if kind == "square":
            return [2.0 * g * a]
        return [g * y * (np.abs(a) < EXP_CLAMP)]
    if op == "softmax":
        y = node.value
        return [y * (g - (g * y).sum(axis=1, keepdims=True))]
    if op == "log_softmax":
        p = np.exp(node.value)
        return [g - p * g.sum(axis=1, keepdims=True)]
    if op == "neg_sqdist":
        a, b = vals
        ga = -2.0 * (g.sum(axis=1, keepdims=True) * a - g @ b)
        gb = -2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
        return [ga, gb]
    if op == "log":
        return [g / vals[0]]
    if op == "mean":
        a = vals[0]
        return [np.full_like(a, g[0, 0] / a.size)]
    if op == "sum":
        return [np.full_like(vals[0], g[0, 0])]
    if op == "scale":
        return [node.attrs["factor"] * g]
    if op == "transpose":
        return [g.T.copy()]
    if op == "concat":
        out, start = [], 0
        for v in vals:
            out.append(g[:, start:start + v.shape[1]])
            start += v.shape[1]
        return out
    raise GraphError(f"unknown op {op!r}")


def backward(root: Node) -> None:
    """Fill ``.grad`` on every node upstream of a trainable input.

    The root must be 1 x 1 and :func:`forward` must have run on this graph.
    Nodes with several consumers accumulate their incoming gradients.
    """
    order = topological_order(root)
    for node in order:
        if node.value is None:
            raise BackwardBeforeForwardError(f"node {node.label()} has no value; run forward first")
    if root.value.shape != (1, 1):
        raise NotScalarError(f"backward needs a 1x1 root, got {root.value.shape}")
    needs = _needs_grad(order)
    for node in order:
        node.grad = np.zeros_like(node.value) if id(node) in needs else None
    if root.grad is None:
        return
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is None or not node.parents:
            continue
        for p, pg in zip(node.parents, _parent_grads(node, node.grad)):
            if p.grad is not None:
                p.grad += pg
    for node in order:
        if node.grad is not None:
            _check_finite(node, node.grad, "gradient")


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optim_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """Apply one SGD or bias-corrected Adam update.

    Returns a new parameter dict; ``state`` is advanced in place and returned.
    Parameters missing from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    state.step += 1
    new = dict(params)
    if state.kind == "sgd":
        for name, g in grads.items():
            new[name] = params[name] - state.lr * g
        return new, state
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state
