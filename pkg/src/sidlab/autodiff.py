"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Var wraps an ndarray plus the closure needed to push gradients to its
parents. Graphs are built per loss evaluation and discarded after
backward(); there is no persistent tape. Only the operations the
training losses actually use are provided — elementwise arithmetic with
numpy broadcasting, reductions, row concat/slice, and custom fused ops
registered through from_op (the dense-network kernel lives in sidlab.nn).
"""

import numpy as np

from .errors import NumericError


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """Node in the backward graph: a value plus, when it requires grad,
    the parents and vector-Jacobian product that produced it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "name")

    # keep numpy from absorbing Var into object arrays; `ndarray op Var`
    # then falls back to the reflected Var operator
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def detach(self):
        """Constant view of this node; gradients do not flow through it."""
        return Var(self.value)

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) node into every leaf."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed needs a scalar node")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in order:
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += pg

    # -- operator sugar ---------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return vmean(self, axis=axis)

    def __repr__(self):
        tag = self.name or ("leaf" if self._vjp is None else "op")
        return f"Var({tag}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Reverse topological order (root first), iterative to spare recursion."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def from_op(value, parents, vjp, name=None):
    """Register a custom op. `vjp(g)` must return one gradient (or None)
    per parent, already shaped like that parent's value."""
    parents = tuple(p for p in parents if isinstance(p, Var))
    if any(p.requires_grad for p in parents):
        return Var(value, requires_grad=True, parents=parents, vjp=vjp, name=name)
    return Var(value, name=name)


def _binary(a, b, out, vjp_a, vjp_b, name):
    parents = []
    grads = []
    if isinstance(a, Var) and a.requires_grad:
        parents.append(a)
        grads.append(vjp_a)
    if isinstance(b, Var) and b.requires_grad:
        parents.append(b)
        grads.append(vjp_b)
    if not parents:
        return Var(out)

    def vjp(g):
        return [fn(g) for fn in grads]

    return Var(out, requires_grad=True, parents=tuple(parents), vjp=vjp, name=name)


def add(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, np.shape(av)),
        lambda g: _unbroadcast(g, np.shape(bv)),
        "add",
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av - bv,
        lambda g: _unbroadcast(g, np.shape(av)),
        lambda g: _unbroadcast(-g, np.shape(bv)),
        "sub",
    )


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, np.shape(av)),
        lambda g: _unbroadcast(g * av, np.shape(bv)),
        "mul",
    )


def div(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av / bv,
        lambda g: _unbroadcast(g / bv, np.shape(av)),
        lambda g: _unbroadcast(-g * av / (bv * bv), np.shape(bv)),
        "div",
    )


def power(a, p):
    av = _val(a)
    out = av ** p
    if not (isinstance(a, Var) and a.requires_grad):
        return Var(out)
    return Var(out, requires_grad=True, parents=(a,),
               vjp=lambda g: [g * p * av ** (p - 1)], name="pow")


def absolute(a):
    av = _val(a)
    if not (isinstance(a, Var) and a.requires_grad):
        return Var(np.abs(av))
    return Var(np.abs(av), requires_grad=True, parents=(a,),
               vjp=lambda g: [g * np.sign(av)], name="abs")


def vsum(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not (isinstance(a, Var) and a.requires_grad):
        return Var(out)

    def vjp(g):
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, av.shape).copy()]

    return Var(out, requires_grad=True, parents=(a,), vjp=vjp, name="sum")


def vmean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def vconcat(parts):
    """Concatenate along axis 0 (batch stacking for paired CFG branches)."""
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])
    parents = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var) and p.requires_grad]
    if not parents:
        return Var(out)

    def vjp(g):
        return [g[offsets[i]:offsets[i + 1]] for i, _ in parents]

    return Var(out, requires_grad=True, parents=tuple(p for _, p in parents),
               vjp=vjp, name="vconcat")


def rows(a, start, stop):
    """Row slice a[start:stop] along axis 0."""
    av = _val(a)
    out = av[start:stop]
    if not (isinstance(a, Var) and a.requires_grad):
        return Var(out)

    def vjp(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return [full]

    return Var(out, requires_grad=True, parents=(a,), vjp=vjp, name="rows")


def check_finite(x, name):
    """Raise NumericError naming the offending tensor if x has NaN/inf."""
    v = _val(x)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite values in tensor '{name}'")
    return x
