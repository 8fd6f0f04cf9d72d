"""Dense reverse-mode differentiation over numpy arrays.

Expressions are built lazily: constructing an ``Expr`` records the operation
and its children but computes nothing.  ``evaluate`` runs the forward pass for
a set of input bindings and caches every intermediate value; ``backward`` then
accumulates gradients for all trainable leaves.  A graph can be re-evaluated
with new bindings any number of times, so a model builds its graph once and
reuses it for every mini-batch.
"""

from __future__ import annotations

import math

import numpy as np

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand shapes are inconsistent at a given node."""


class UnboundInput(KeyError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Expr:
    __slots__ = ("kind", "children", "attrs", "name", "requires_grad", "value", "_order")

    def __init__(self, kind, children=(), attrs=None, name=None, requires_grad=False):
        self.kind = kind
        self.children = tuple(children)
        self.attrs = attrs or {}
        self.name = name
        self.requires_grad = requires_grad
        self.value = None
        self._order = None

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Expr({self.kind}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return Expr("index", (self,), {"key": key})

    @property
    def T(self):
        return transpose(self)


def as_expr(x):
    if isinstance(x, Expr):
        return x
    return const(x)


def input(name, requires_grad=False):  # noqa: A001 - mirrors the node kind
    return Expr("input", name=name, requires_grad=requires_grad)


def param(name):
    return Expr("input", name=name, requires_grad=True)


def const(value, name=None):
    e = Expr("const", name=name)
    e.attrs["value"] = np.asarray(value, dtype=np.float64)
    return e


def matmul(a, b):
    return Expr("matmul", (as_expr(a), as_expr(b)))


def add(a, b):
    return Expr("add", (as_expr(a), as_expr(b)))


def sub(a, b):
    return Expr("sub", (as_expr(a), as_expr(b)))


def hadamard(a, b):
    return Expr("hadamard", (as_expr(a), as_expr(b)))


def sigmoid(a):
    return Expr("sigmoid", (as_expr(a),))


def tanh(a):
    return Expr("tanh", (as_expr(a),))


def relu(a):
    return Expr("relu", (as_expr(a),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    return Expr("leaky_relu", (as_expr(a),), {"slope": slope})


def softmax_over_set(a, mask=None):
    """Softmax along the last axis restricted to ``mask`` (zeros elsewhere)."""
    m = None if mask is None else np.asarray(mask, dtype=bool)
    return Expr("softmax_set", (as_expr(a),), {"mask": m})


def concat(items, axis=-1):
    return Expr("concat", tuple(as_expr(x) for x in items), {"axis": axis})


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return Expr("sum", (as_expr(a),), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return Expr("mean", (as_expr(a),), {"axis": axis, "keepdims": keepdims})


def scale(a, c):
    return Expr("scale", (as_expr(a),), {"c": float(c)})


def square(a):
    return Expr("square", (as_expr(a),))


def transpose(a, axes=None):
    return Expr("transpose", (as_expr(a),), {"axes": axes})


def reshape(a, shape):
    return Expr("reshape", (as_expr(a),), {"shape": tuple(shape)})


def einsum(subscripts, a, b):
    """Two-operand einsum.  Every index of an operand must appear in the
    output or in the other operand (no implicit reductions of a lone index)."""
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        for ch in own:
            if ch not in out and ch not in other:
                raise ValueError(f"einsum index {ch!r} is reduced from a single operand")
    return Expr("einsum", (as_expr(a), as_expr(b)), {"sa": sa, "sb": sb, "out": out})


# ---------------------------------------------------------------------------
# forward / backward rules


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _softmax_set(x, mask):
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    m = np.broadcast_to(mask, x.shape)
    masked = np.where(m, x, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(m, np.exp(np.where(m, x - top, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def _fw(node, vals):
    k, at = node.kind, node.attrs
    if k == "matmul":
        a, b = vals
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        return np.matmul(a, b)
    if k == "add":
        return vals[0] + vals[1]
    if k == "sub":
        return vals[0] - vals[1]
    if k == "hadamard":
        return vals[0] * vals[1]
    if k == "sigmoid":
        return _sigmoid(vals[0])
    if k == "tanh":
        return np.tanh(vals[0])
    if k == "relu":
        return np.maximum(vals[0], 0.0)
    if k == "leaky_relu":
        x = vals[0]
        return np.where(x > 0, x, at["slope"] * x)
    if k == "softmax_set":
        mask = at["mask"]
        if mask is not None and mask.shape != vals[0].shape[-mask.ndim:]:
            raise ShapeError(f"mask {mask.shape} does not match logits {vals[0].shape}")
        return _softmax_set(vals[0], mask)
    if k == "concat":
        return np.concatenate(vals, axis=at["axis"])
    if k == "sum":
        return np.sum(vals[0], axis=at["axis"], keepdims=at["keepdims"])
    if k == "mean":
        return np.mean(vals[0], axis=at["axis"], keepdims=at["keepdims"])
    if k == "scale":
        return at["c"] * vals[0]
    if k == "square":
        return vals[0] * vals[0]
    if k == "transpose":
        axes = at["axes"]
        if axes is None:
            return _swap(vals[0])
        return np.transpose(vals[0], axes)
    if k == "reshape":
        return np.reshape(vals[0], at["shape"])
    if k == "index":
        return vals[0][at["key"]]
    if k == "einsum":
        return np.einsum(f"{at['sa']},{at['sb']}->{at['out']}", vals[0], vals[1])
    raise ValueError(f"unknown node kind {k!r}")


def _bw(node, g, out, vals):
    """Gradients of the node output w.r.t. each child, given upstream ``g``."""
    k, at = node.kind, node.attrs
    if k == "matmul":
        a, b = vals
        return (_unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape))
    if k == "add":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))
    if k == "sub":
        return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))
    if k == "hadamard":
        a, b = vals
        return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
    if k == "sigmoid":
        return (g * out * (1.0 - out),)
    if k == "tanh":
        return (g * (1.0 - out * out),)
    if k == "relu":
        return (g * (vals[0] > 0),)
    if k == "leaky_relu":
        return (g * np.where(vals[0] > 0, 1.0, at["slope"]),)
    if k == "softmax_set":
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    if k == "concat":
        axis = at["axis"]
        sizes = [v.shape[axis] for v in vals]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    if k in ("sum", "mean"):
        x = vals[0]
        axis = at["axis"]
        if not at["keepdims"] and axis is not None:
            g = np.expand_dims(g, axis)
        if k == "mean":
            n = x.size if axis is None else math.prod(
                x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))
            )
            g = g / n
        return (np.broadcast_to(g, x.shape).copy(),)
    if k == "scale":
        return (at["c"] * g,)
    if k == "square":
        return (2.0 * vals[0] * g,)
    if k == "transpose":
        axes = at["axes"]
        if axes is None:
            return (_swap(g),)
        return (np.transpose(g, np.argsort(axes)),)
    if k == "reshape":
        return (np.reshape(g, vals[0].shape),)
    if k == "index":
        full = np.zeros_like(vals[0])
        np.add.at(full, at["key"], g)
        return (full,)
    if k == "einsum":
        sa, sb, so = at["sa"], at["sb"], at["out"]
        a, b = vals
        return (np.einsum(f"{so},{sb}->{sa}", g, b), np.einsum(f"{so},{sa}->{sb}", g, a))
    raise ValueError(f"no gradient rule for {k!r}")


# ---------------------------------------------------------------------------
# graph traversal


def topo_order(root):
    if root._order is not None:
        return root._order
    order, seen = [], set()
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
        for child in reversed(node.children):
            if id(child) not in seen:
                stack.append((child, False))
    root._order = order
    return order


def leaves(root):
    """Input leaves reachable from ``root`` keyed by name."""
    out = {}
    for node in topo_order(root):
        if node.kind == "input":
            out[node.name] = node
    return out


def evaluate(expr, bindings):
    """Forward pass.  Every input leaf must be bound by name."""
    for node in topo_order(expr):
        if node.kind == "input":
            try:
                v = bindings[node.name]
            except KeyError:
                raise UnboundInput(f"input '{node.name}' is not bound") from None
            node.value = np.asarray(v, dtype=np.float64)
        elif node.kind == "const":
            node.value = node.attrs["value"]
        else:
            vals = [c.value for c in node.children]
            try:
                node.value = _fw(node, vals)
            except ShapeError as exc:
                raise ShapeError(f"{node!r}: {exc}") from None
            except (ValueError, IndexError) as exc:
                shapes = ", ".join(str(v.shape) for v in vals)
                raise ShapeError(f"{node!r} with operand shapes {shapes}: {exc}") from None
    return expr.value


def backward(expr):
    """Reverse accumulation from a scalar root; returns {param name: gradient}."""
    if expr.value is None:
        raise ValueError("evaluate must run before backward")
    if expr.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {expr.value.shape}")
    order = topo_order(expr)
    needs = {}
    for node in order:
        if node.kind == "input":
            needs[id(node)] = node.requires_grad
        else:
            needs[id(node)] = any(needs[id(c)] for c in node.children)
    grads = {id(expr): np.ones_like(expr.value)}
    store = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.kind == "input":
            if node.requires_grad:
                if g is None:
                    g = np.zeros_like(node.value)
                store[node.name] = store[node.name] + g if node.name in store else g
            continue
        if g is None or not needs[id(node)] or not node.children:
            continue
        child_grads = _bw(node, g, node.value, [c.value for c in node.children])
        for child, cg in zip(node.children, child_grads):
            if not needs[id(child)]:
                continue
            key = id(child)
            if key in grads:
                grads[key] = grads[key] + cg
            else:
                grads[key] = cg
    return store


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive moment optimizer with decoupled weight decay.

    The decay term shrinks parameters by ``lr * l2 * theta`` per step,
    independently of the adaptive scaling.
    """

    def __init__(self, lr, l2=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if l2 < 0:
            raise ValueError("l2 must be nonnegative")
        self.lr, self.l2 = lr, l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, theta in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(theta)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.l2:
                update = update + self.l2 * theta
            theta -= self.lr * update
        return params


def optimizer_step(params, grads, lr, l2=0.0, state=None):
    """Functional wrapper around :class:`Adam`; returns (params, state)."""
    if state is None:
        state = Adam(lr, l2)
    state.lr, state.l2 = lr, l2
    state.step(params, grads)
    return params, state
