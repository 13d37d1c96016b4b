"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Node`` records its value, parents and a closure that scatters the
output adjoint to the parents. ``backward`` runs the closures in reverse
topological order; afterwards the graph is released and a second backward
on the same root raises ``StaleGraphError``. ``Parameter`` is a leaf whose
gradient buffer persists across steps (an optimizer zeroes it).

Everything is float64. Forward passes are deterministic; gradients are
accumulated in graph order, never via unordered reductions.
"""

import numpy as np

from ..errors import ScfregError, StaleGraphError


class Node:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "_consumed")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._consumed = False
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Node(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Node):
    """Trainable leaf: named value with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.data = np.array(value, dtype=np.float64)  # owned, mutable
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def as_node(x) -> Node:
    """Wrap a constant; Nodes pass through."""
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable Parameter's grad.

    ``root`` must be scalar. The recorded graph is cleared afterwards;
    rerun the forward pass before calling backward again.
    """
    if root.data.ndim != 0:
        raise ScfregError(f"backward needs a scalar root, got shape {root.data.shape}")
    if root._consumed:
        raise StaleGraphError("backward already ran on this graph; rerun the forward pass")
    root._consumed = True
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if not isinstance(node, Parameter):
            # release graph memory; a second backward now has no closures
            node._backward = None
            node._parents = ()
            node.requires_grad = False
            if node is not root:
                node.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, out_data, da, db):
    a, b = as_node(a), as_node(b)
    needs = a.requires_grad or b.requires_grad

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(db(g), b.data.shape))

    return Node(out_data, (a, b), bw if needs else None)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(
        a, b, a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def scale(a, c: float) -> Node:
    a = as_node(a)

    def bw(g):
        a.accumulate(c * g)

    return Node(a.data * c, (a,), bw if a.requires_grad else None)


def sum_all(a) -> Node:
    a = as_node(a)

    def bw(g):
        a.accumulate(np.full(a.data.shape, g))

    return Node(a.data.sum(), (a,), bw if a.requires_grad else None)


def mean_all(a) -> Node:
    a = as_node(a)
    n = a.data.size

    def bw(g):
        a.accumulate(np.full(a.data.shape, g / n))

    return Node(a.data.mean(), (a,), bw if a.requires_grad else None)


def sum_axes(a, axes) -> Node:
    a = as_node(a)
    axes = tuple(axes)

    def bw(g):
        a.accumulate(np.broadcast_to(np.expand_dims(g, axes), a.data.shape).copy())

    return Node(a.data.sum(axis=axes), (a,), bw if a.requires_grad else None)


def relu(a) -> Node:
    a = as_node(a)
    mask = a.data > 0

    def bw(g):
        a.accumulate(g * mask)

    return Node(a.data * mask, (a,), bw if a.requires_grad else None)


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = as_node(a)
    factor = np.where(a.data > 0, 1.0, slope)

    def bw(g):
        a.accumulate(g * factor)

    return Node(a.data * factor, (a,), bw if a.requires_grad else None)


def reshape(a, shape) -> Node:
    a = as_node(a)
    orig = a.data.shape

    def bw(g):
        a.accumulate(g.reshape(orig))

    return Node(a.data.reshape(shape), (a,), bw if a.requires_grad else None)


def concat(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.data.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for n, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if n.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                n.accumulate(g[tuple(sl)])

    needs = any(n.requires_grad for n in nodes)
    return Node(np.concatenate([n.data for n in nodes], axis=axis), tuple(nodes),
                bw if needs else None)


def linear(x, w, b) -> Node:
    """Row-wise affine map: x [M, in] -> x @ w.T + b, w [out, in], b [out]."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    out = x.data @ w.data.T + b.data

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            w.accumulate(g.T @ x.data)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    needs = x.requires_grad or w.requires_grad or b.requires_grad
    return Node(out, (x, w, b), bw if needs else None)


def gather_rows(x, indices) -> Node:
    """Select rows of ``x`` by an integer index array; the adjoint
    scatter-adds back into the source rows."""
    x = as_node(x)
    indices = np.asarray(indices)

    def bw(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, indices, g)
        x.accumulate(buf)

    return Node(x.data[indices], (x,), bw if x.requires_grad else None)
