"""Reverse-mode differentiation over dense float64 arrays.

Values are computed eagerly. Every result that depends on a tensor with
``requires_grad`` records its parents and a local gradient rule, and is
appended to the innermost active :class:`Tape`. ``backward`` walks the tape
(or a topological sort of the graph) in reverse.

Gradients accumulate only into leaves (tensors without parents), so calling
``backward`` twice without zeroing doubles leaf gradients, matching the usual
framework semantics.
"""

from __future__ import annotations

import numpy as np

_TAPES = []


class ShapeError(ValueError):
    pass


class Tape:
    """Records nodes in creation order; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss):
        backward(loss, tape=self)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "rule", "op", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.rule = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad=False, name=None):
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad, name)


def constant(value):
    return Tensor(value, requires_grad=False)


def make_node(value, parents, rule, op):
    """Build a result tensor.

    ``rule(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.rule = rule
        out.op = op
        if _TAPES:
            _TAPES[-1].record(out)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) == 2 and len(sb) == 2:
        rows_ok = sa[0] == sb[0] or 1 in (sa[0], sb[0])
        cols_ok = sa[1] == sb[1] or 1 in (sa[1], sb[1])
        if rows_ok and cols_ok:
            return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "add")
    return make_node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "sub")
    return make_node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    """Elementwise product (row/column broadcasting allowed)."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "mul")
    return make_node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def scale(a, c):
    a = tensor(a)
    c = float(c)
    return make_node(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = tensor(a), tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return make_node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        "matmul",
    )


def transpose(a):
    a = tensor(a)
    return make_node(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def relu(a):
    a = tensor(a)
    mask = a.value > 0
    return make_node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = tensor(a)
    x = a.value
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(a):
    a = tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (a,), rule, "softmax_rows")


def reshape(a, shape):
    a = tensor(a)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return make_node(value, (a,), lambda g: (g.reshape(old),), "reshape")


def concat_cols(items):
    items = [tensor(x) for x in items]
    rows = {x.shape[0] for x in items}
    if len(rows) != 1 or any(x.value.ndim != 2 for x in items):
        raise ShapeError(f"concat_cols: incompatible shapes {[x.shape for x in items]}")
    widths = np.cumsum([0] + [x.shape[1] for x in items])

    def rule(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(items)))

    return make_node(np.concatenate([x.value for x in items], axis=1), tuple(items), rule, "concat_cols")


def stack_rows(items):
    """Row-wise concatenation, used to assemble a ``T x ...`` series from steps."""
    items = [tensor(x) for x in items]
    cols = {x.shape[1] for x in items}
    if len(cols) != 1 or any(x.value.ndim != 2 for x in items):
        raise ShapeError(f"stack_rows: incompatible shapes {[x.shape for x in items]}")
    heights = np.cumsum([0] + [x.shape[0] for x in items])

    def rule(g):
        return tuple(g[heights[i] : heights[i + 1]] for i in range(len(items)))

    return make_node(np.concatenate([x.value for x in items], axis=0), tuple(items), rule, "stack_rows")


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = tensor(a)
    return make_node(np.array(a.value.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a):
    a = tensor(a)
    n = a.size
    return make_node(np.array(a.value.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def square(a):
    a = tensor(a)
    return make_node(a.value**2, (a,), lambda g: (2.0 * a.value * g,), "square")


def sqrt(a):
    a = tensor(a)
    r = np.sqrt(a.value)
    return make_node(r, (a,), lambda g: (g / (2.0 * np.where(r > 0, r, np.inf)),), "sqrt")


def abs(a):  # noqa: A001
    a = tensor(a)
    return make_node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def _topo(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    loss = tensor(loss)
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        order = [n for n in tape.nodes]
        if loss not in order:
            order.append(loss)
    else:
        order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.parents:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=float)
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def grad_check(f, params, step=1e-5, tol=1e-4, floor=1e-6):
    """Compare analytic gradients of ``f(*params)`` with central differences.

    ``f`` must return a scalar Tensor. Returns a dict with the per-parameter
    maximum relative error ``|a - n| / max(|a|, |n|, floor)`` and ``passed``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f(*params)
    tape.backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, a in zip(params, analytic):
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(*params).value)
            flat[i] = orig - step
            down = float(f(*params).value)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        errors.append(float((np.abs(a - num) / denom).max()) if a.size else 0.0)
    for p in params:
        p.zero_grad()
    return {"max_rel_error": errors, "passed": all(e < tol for e in errors)}
