"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Everything is a (rows, cols) matrix; scalars are 1x1, vectors are single-row
or single-column matrices. Operations build a flat tape of Nodes in creation
order, which is already a valid topological order, so the backward sweep is a
single reversed pass over the tape. Gradients accumulate additively, so a node
consumed twice receives the sum of both contributions.

Recording happens only inside a ``with Tape():`` block; outside of one, the
same functions run forward-only, which keeps inference cheap. A tape and its
nodes belong to a single thread; independent tapes may run concurrently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class EmptyReductionError(ValueError):
    """Reduction over an empty input."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


class Node:
    """One value in the computation graph.

    ``value`` is a 2-D float64 array. ``grad`` stays ``None`` until the
    backward sweep first writes to it. Nodes created with ``const=True`` never
    receive gradient contributions (used for input data and literals).
    """

    __slots__ = ("value", "grad", "const", "_backward")

    def __init__(self, value, const: bool = False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"Node value must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.const = const
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, const={self.const})"

    # Small amount of sugar; the named functions below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    """Leaf node that never accumulates gradient."""
    return Node(value, const=True)


_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class Tape:
    """Records nodes in creation order for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, root: Node):
        """Accumulate d(root)/d(node) into node.grad for every ancestor.

        ``root`` must be a scalar (1x1) node recorded on this tape. Call at
        most once per tape; a second call would double-accumulate.
        """
        if root.value.shape != (1, 1):
            raise DimensionError(
                f"backward root must be scalar 1x1, got {root.value.shape}"
            )
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _record(node: Node, backward: Callable | None) -> Node:
    stack = _tape_stack()
    if stack:
        node._backward = backward
        stack[-1].nodes.append(node)
    return node


def _recording() -> bool:
    return bool(_tape_stack())


def _acc(node: Node, g):
    if node.const:
        return
    if node.grad is None:
        node.grad = np.array(g)  # copy: g may alias a consumer's grad buffer
    else:
        node.grad += g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    """Matrix product (p x q) @ (q x r) -> (p x r)."""
    (p, q), (q2, r) = a.value.shape, b.value.shape
    if q != q2:
        raise DimensionError(f"matmul inner dimensions differ: {a.value.shape} vs {b.value.shape}")
    if q == 1:
        # outer product: broadcasting multiply beats the BLAS call here and
        # produces identical bits (each output is a single product)
        out = Node(a.value * b.value)
    else:
        out = Node(a.value @ b.value)
    if not _recording():
        return out
    av, bv = a.value, b.value

    def bk(g):
        if not a.const:
            _acc(a, g @ bv.T)
        if not b.const:
            _acc(b, av.T @ g)

    return _record(out, bk)


def _bias_pair(a: Node, b: Node):
    """Classify shapes for add: equal, or matrix + single-row bias."""
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return "equal"
    if sb[0] == 1 and sa[1] == sb[1]:
        return "bias_b"
    if sa[0] == 1 and sa[1] == sb[1]:
        return "bias_a"
    raise DimensionError(f"incompatible shapes for add: {sa} vs {sb}")


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; the only broadcast allowed is matrix + row vector."""
    mode = _bias_pair(a, b)
    out = Node(a.value + b.value)
    if not _recording():
        return out

    def bk(g):
        if mode == "equal":
            _acc(a, g)
            _acc(b, g)
        elif mode == "bias_b":
            _acc(a, g)
            if not b.const:
                _acc(b, g.sum(axis=0, keepdims=True))
        else:
            if not a.const:
                _acc(a, g.sum(axis=0, keepdims=True))
            _acc(b, g)

    return _record(out, bk)


def sub(a: Node, b: Node) -> Node:
    """Elementwise difference; shapes must match exactly."""
    if a.value.shape != b.value.shape:
        raise DimensionError(f"incompatible shapes for sub: {a.value.shape} vs {b.value.shape}")
    out = Node(a.value - b.value)
    if not _recording():
        return out

    def bk(g):
        _acc(a, g)
        if not b.const:
            _acc(b, -g)

    return _record(out, bk)


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.value.shape != b.value.shape:
        raise DimensionError(f"incompatible shapes for mul: {a.value.shape} vs {b.value.shape}")
    out = Node(a.value * b.value)
    if not _recording():
        return out
    av, bv = a.value, b.value

    def bk(g):
        if not a.const:
            _acc(a, g * bv)
        if not b.const:
            _acc(b, g * av)

    return _record(out, bk)


def scale(a: Node, c: float) -> Node:
    """Multiply by a python-float constant."""
    c = float(c)
    out = Node(a.value * c)
    if not _recording():
        return out

    def bk(g):
        _acc(a, g * c)

    return _record(out, bk)


def sigmoid(a: Node) -> Node:
    # two-branch form avoids overflow in exp for large |x|
    x = a.value
    v = np.empty_like(x)
    pos = x >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    v[~pos] = ex / (1.0 + ex)
    out = Node(v)
    if not _recording():
        return out

    def bk(g):
        _acc(a, g * (v * (1.0 - v)))

    return _record(out, bk)


def tanh(a: Node) -> Node:
    v = np.tanh(a.value)
    out = Node(v)
    if not _recording():
        return out

    def bk(g):
        _acc(a, g * (1.0 - v * v))

    return _record(out, bk)


def sqrt(a: Node) -> Node:
    """Elementwise square root; input must be nonnegative."""
    if np.any(a.value < 0):
        raise ValueError("sqrt of negative input")
    v = np.sqrt(a.value)
    out = Node(v)
    if not _recording():
        return out

    def bk(g):
        _acc(a, g / (2.0 * v))

    return _record(out, bk)


def div_by_scalar(a: Node, s: Node) -> Node:
    """Divide a matrix by a scalar (1x1) node; gradient flows to both."""
    if s.value.shape != (1, 1):
        raise DimensionError(f"divisor must be 1x1, got {s.value.shape}")
    sv = float(s.value[0, 0])
    if sv == 0.0:
        raise ZeroDivisionError("division by zero scalar node")
    out = Node(a.value / sv)
    if not _recording():
        return out
    av = a.value

    def bk(g):
        _acc(a, g / sv)
        if not s.const:
            _acc(s, np.array([[-(g * av).sum() / (sv * sv)]]))

    return _record(out, bk)


def transpose(a: Node) -> Node:
    out = Node(a.value.T.copy())
    if not _recording():
        return out

    def bk(g):
        _acc(a, g.T)

    return _record(out, bk)


def rowsoftmax(a: Node) -> Node:
    """Row-wise softmax with per-row max subtraction; rows sum to 1."""
    x = a.value
    if not np.all(np.isfinite(x)):
        raise ValueError("rowsoftmax requires finite input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    v = e / e.sum(axis=1, keepdims=True)
    out = Node(v)
    if not _recording():
        return out

    def bk(g):
        _acc(a, (g - (g * v).sum(axis=1, keepdims=True)) * v)

    return _record(out, bk)


def sum_rows(a: Node) -> Node:
    """Sum over rows: (p x q) -> (1 x q)."""
    if a.value.size == 0:
        raise EmptyReductionError("sum_rows of empty input")
    out = Node(a.value.sum(axis=0, keepdims=True))
    if not _recording():
        return out
    p = a.value.shape[0]

    def bk(g):
        _acc(a, np.broadcast_to(g, (p, g.shape[1])))

    return _record(out, bk)


def mean_rows(a: Node) -> Node:
    """Mean over rows: (p x q) -> (1 x q)."""
    if a.value.size == 0:
        raise EmptyReductionError("mean_rows of empty input")
    p = a.value.shape[0]
    out = Node(a.value.mean(axis=0, keepdims=True))
    if not _recording():
        return out

    def bk(g):
        _acc(a, np.broadcast_to(g / p, (p, g.shape[1])))

    return _record(out, bk)


def sum_all(a: Node) -> Node:
    """Total sum: (p x q) -> (1 x 1)."""
    if a.value.size == 0:
        raise EmptyReductionError("sum_all of empty input")
    out = Node(np.array([[a.value.sum()]]))
    if not _recording():
        return out
    shp = a.value.shape

    def bk(g):
        _acc(a, np.full(shp, g[0, 0]))

    return _record(out, bk)


def concat_cols(a: Node, b: Node) -> Node:
    """Column-wise juxtaposition (p x q1), (p x q2) -> (p x (q1+q2))."""
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(
            f"concat_cols row counts differ: {a.value.shape} vs {b.value.shape}"
        )
    out = Node(np.concatenate([a.value, b.value], axis=1))
    if not _recording():
        return out
    q1 = a.value.shape[1]

    def bk(g):
        _acc(a, g[:, :q1])
        _acc(b, g[:, q1:])

    return _record(out, bk)


def gather_rows(x: Node, idx: Sequence[int]) -> Node:
    """Copy rows in ``idx`` order; backward scatters, unselected rows get 0."""
    p = x.value.shape[0]
    idx = [int(i) for i in idx]
    for i in idx:
        if not 0 <= i < p:
            raise IndexError(f"gather_rows index {i} out of range for {p} rows")
    if len(set(idx)) != len(idx):
        raise IndexError(f"gather_rows indices must be distinct, got {idx}")
    ia = np.asarray(idx, dtype=np.intp)
    out = Node(x.value[ia])
    if not _recording():
        return out
    shp = x.value.shape

    def bk(g):
        if not x.const:
            buf = np.zeros(shp)
            buf[ia] = g
            _acc(x, buf)

    return _record(out, bk)


def softmax_xent(logits: Node, label: int) -> Node:
    """Cross-entropy -log softmax(logits)[label] for a 1xC logit row."""
    lv = logits.value
    if lv.shape[0] != 1 or lv.shape[1] < 2:
        raise DimensionError(f"logits must be 1xC with C >= 2, got {lv.shape}")
    c = lv.shape[1]
    label = int(label)
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    m = lv.max()
    e = np.exp(lv - m)
    z = e.sum()
    loss = math.log(z) + m - lv[0, label]
    out = Node(np.array([[loss]]))
    if not _recording():
        return out
    sm = e / z

    def bk(g):
        if not logits.const:
            d = sm.copy()
            d[0, label] -= 1.0
            _acc(logits, d * g[0, 0])

    return _record(out, bk)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f: Callable[[Node], Node], theta, h: float = 1e-5) -> float:
    """Compare reverse-mode and central-difference gradients of ``f``.

    ``f`` maps a single Node (shaped like ``theta``) to a scalar Node. Returns
    the max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2:
        raise DimensionError(f"theta must be 2-D, got shape {theta.shape}")

    def value_at(arr) -> float:
        out = f(Node(arr))  # outside any tape: forward-only
        v = float(out.value[0, 0])
        if not math.isfinite(v):
            raise EvaluationError("function evaluated to a non-finite value")
        return v

    with Tape() as tape:
        leaf = Node(theta.copy())
        out = f(leaf)
        if out.value.shape != (1, 1):
            raise DimensionError("gradcheck target must produce a scalar node")
        if not math.isfinite(float(out.value[0, 0])):
            raise EvaluationError("function evaluated to a non-finite value")
        tape.backward(out)
    g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(theta)

    g_fd = np.zeros_like(theta)
    flat = theta.copy()
    for i in range(theta.shape[0]):
        for j in range(theta.shape[1]):
            orig = flat[i, j]
            flat[i, j] = orig + h
            up = value_at(flat)
            flat[i, j] = orig - h
            down = value_at(flat)
            flat[i, j] = orig
            g_fd[i, j] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


OP_CHECK_NAMES = (
    "matmul", "add", "sub", "mul", "scale", "sigmoid", "tanh", "sqrt", "div",
    "transpose", "softmax", "sum_rows", "mean_rows", "sum_all", "concat",
    "gather", "xent",
)


def standard_op_checks(ops: Sequence[str] | None = None, n_points: int = 10,
                       seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every operation's backward rule.

    Each named check builds a small scalar-valued expression that routes the
    checked parameter through the op (through both operand slots where the op
    has two differentiable inputs) and returns the worst relative error over
    ``n_points`` random draws. ``ops`` restricts which of OP_CHECK_NAMES run.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)

    def rand(shape):
        return rng.standard_normal(shape)

    def chk_matmul():
        B, A = constant(rand((4, 2))), constant(rand((3, 4)))
        left = gradcheck(lambda th: sum_all(tanh(matmul(th, B))), rand((3, 4)), h)
        right = gradcheck(lambda th: sum_all(tanh(matmul(A, th))), rand((4, 2)), h)
        return max(left, right)

    def chk_add():
        M, bias = constant(rand((3, 4))), constant(rand((1, 4)))
        full = gradcheck(lambda th: sum_all(tanh(add(th, M))), rand((3, 4)), h)
        asbias = gradcheck(lambda th: sum_all(tanh(add(M, th))), rand((1, 4)), h)
        return max(full, asbias)

    def chk_sub():
        M = constant(rand((3, 4)))
        a = gradcheck(lambda th: sum_all(tanh(sub(th, M))), rand((3, 4)), h)
        b = gradcheck(lambda th: sum_all(tanh(sub(M, th))), rand((3, 4)), h)
        return max(a, b)

    def chk_mul():
        M = constant(rand((3, 4)))
        return gradcheck(lambda th: sum_all(tanh(mul(th, M))), rand((3, 4)), h)

    def chk_scale():
        c = float(rng.uniform(-2.0, 2.0))
        return gradcheck(lambda th: sum_all(tanh(scale(th, c))), rand((3, 4)), h)

    def chk_sigmoid():
        return gradcheck(lambda th: sum_all(sigmoid(th)), rand((3, 4)), h)

    def chk_tanh():
        return gradcheck(lambda th: sum_all(tanh(th)), rand((3, 4)), h)

    def chk_sqrt():
        theta = np.abs(rand((3, 4))) + 0.5
        return gradcheck(lambda th: sum_all(sqrt(th)), theta, h)

    def chk_div():
        # theta feeds both the numerator and (via its sum of squares) the divisor
        one = constant(np.ones((1, 1)))

        def f(th):
            s = add(sum_all(mul(th, th)), one)
            return sum_all(tanh(div_by_scalar(th, s)))

        return gradcheck(f, rand((3, 4)), h)

    def chk_transpose():
        B = constant(rand((3, 2)))
        return gradcheck(lambda th: sum_all(tanh(matmul(transpose(th), B))), rand((3, 4)), h)

    def chk_softmax():
        C = constant(rand((3, 4)))
        return gradcheck(lambda th: sum_all(mul(rowsoftmax(th), C)), rand((3, 4)), h)

    def chk_sum_rows():
        return gradcheck(lambda th: sum_all(tanh(sum_rows(th))), rand((3, 4)), h)

    def chk_mean_rows():
        return gradcheck(lambda th: sum_all(tanh(mean_rows(th))), rand((3, 4)), h)

    def chk_sum_all():
        return gradcheck(lambda th: sum_all(mul(th, th)), rand((3, 4)), h)

    def chk_concat():
        B = constant(rand((3, 2)))
        a = gradcheck(lambda th: sum_all(tanh(concat_cols(th, B))), rand((3, 4)), h)
        b = gradcheck(lambda th: sum_all(tanh(concat_cols(B, th))), rand((3, 4)), h)
        return max(a, b)

    def chk_gather():
        idx = rng.permutation(5)[:3]
        return gradcheck(lambda th: sum_all(tanh(gather_rows(th, idx))), rand((5, 4)), h)

    def chk_xent():
        label = int(rng.integers(0, 4))
        return gradcheck(lambda th: softmax_xent(th, label), rand((1, 4)), h)

    registry = {
        "matmul": chk_matmul, "add": chk_add, "sub": chk_sub, "mul": chk_mul,
        "scale": chk_scale, "sigmoid": chk_sigmoid, "tanh": chk_tanh,
        "sqrt": chk_sqrt, "div": chk_div, "transpose": chk_transpose,
        "softmax": chk_softmax, "sum_rows": chk_sum_rows,
        "mean_rows": chk_mean_rows, "sum_all": chk_sum_all,
        "concat": chk_concat, "gather": chk_gather, "xent": chk_xent,
    }
    if ops is not None:
        unknown = sorted(set(ops) - set(registry))
        if unknown:
            raise KeyError(f"unknown op checks: {unknown} (known: {sorted(registry)})")
        registry = {name: registry[name] for name in registry if name in set(ops)}
    return {name: max(fn() for _ in range(n_points)) for name, fn in registry.items()}
