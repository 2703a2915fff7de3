"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run on a :class:`Tape`: every op appends its
output node, so the tape is in topological order by construction and
:func:`backward` is a single reverse sweep. Gradients accumulate with ``+=``
because a node (e.g. a token-embedding table) may feed many consumers.

Weights passed to :func:`linear` and :func:`gru_cell` may carry a leading
batch axis (``[B, k, n]`` instead of ``[k, n]``). Tiling a parameter that way
makes the sweep produce per-example gradients, which the enumeration oracle
uses to measure estimator variance without one backward pass per sample.
"""

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DimensionError, DomainError, NumericalError

CHECK_FINITE = True
_EXP_MAX = 709.0


class Tape:
    """Nodes in creation order."""

    def __init__(self):
        self.nodes = []

    def leaf(self, value, requires_grad=False, name=None):
        return Node(np.array(value, dtype=np.float64), self, (), requires_grad, name)

    def param(self, value, name=None):
        return self.leaf(value, True, name)

    def constant(self, value):
        return Node(np.asarray(value, dtype=np.float64), self, (), False)

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "tape", "name", "index")

    def __init__(self, value, tape, parents=(), requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.value.shape} requires_grad={self.requires_grad}>"

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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a Node")
    return tape


def _as_node(x, tape):
    if isinstance(x, Node):
        return x
    return tape.constant(np.asarray(x, dtype=np.float64))


def _make(value, tape, parents):
    if CHECK_FINITE and not np.isfinite(value).all():
        raise NumericalError("non-finite value produced in forward pass")
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Node(value, tape, live, bool(live))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root):
    """Fill ``.grad`` of every requires_grad node with dRoot/dNode."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
    nodes = root.tape.nodes[: root.index + 1]
    for node in nodes:
        if node.requires_grad:
            node.grad = np.zeros_like(node.value)
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes):
        if not node.parents:
            continue
        g = node.grad
        for parent, fn in node.parents:
            parent.grad += fn(g)
    if CHECK_FINITE:
        for node in nodes:
            if node.requires_grad and not np.isfinite(node.grad).all():
                raise NumericalError("non-finite gradient in backward pass")


# ----------------------------------------------------------------- elementwise


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    return _make(
        a.value + b.value,
        tape,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    return _make(
        a.value - b.value,
        tape,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))),
    )


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        tape,
        ((a, lambda g: _unbroadcast(g * bv, a.shape)), (b, lambda g: _unbroadcast(g * av, b.shape))),
    )


def neg(a):
    return _make(-a.value, a.tape, ((a, lambda g: -g),))


def tanh(a):
    y = np.tanh(a.value)
    return _make(y, a.tape, ((a, lambda g: g * (1.0 - y * y)),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.value))
    return _make(y, a.tape, ((a, lambda g: g * y * (1.0 - y)),))


def exp(a):
    if (a.value > _EXP_MAX).any():
        raise DomainError("exp overflow: operand exceeds 709")
    y = np.exp(a.value)
    return _make(y, a.tape, ((a, lambda g: g * y),))


def log(a):
    x = a.value
    if (x <= 0).any():
        raise DomainError("log of non-positive value")
    return _make(np.log(x), a.tape, ((a, lambda g: g / x),))


def relu(a):
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), a.tape, ((a, lambda g: g * on),))


def detach(a):
    """Same value, no gradient path."""
    return a.tape.constant(a.value.copy())


def straight_through(forward_value, a):
    """Carry ``forward_value`` forward while routing gradients to ``a`` unchanged.

    Equivalent to ``forward_value + (a - detach(a))`` but exact: the forward
    value is stored verbatim, so one-hot rows stay exactly one-hot.
    """
    value = np.asarray(forward_value, dtype=np.float64)
    if value.shape != a.shape:
        raise DimensionError(f"straight_through shape mismatch: {value.shape} vs {a.shape}")
    return _make(value.copy(), a.tape, ((a, lambda g: g),))


# ------------------------------------------------------------------ reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), a.tape, ((a, fn),))


def mean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -------------------------------------------------------------------- linear


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, tape, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def _mm(x, w):
    if w.ndim == 2:
        return x @ w
    return np.einsum("bk,bkn->bn", x, w)


def _mm_grads(x, w, g):
    """Grads of x @ w w.r.t. (x, w); w may be tiled per example."""
    if w.ndim == 2:
        return g @ w.T, x.T @ g
    return np.einsum("bn,bkn->bk", g, w), x[:, :, None] * g[:, None, :]


def linear(x, w, b=None):
    """``x @ w + b`` for ``x`` of shape [B, k]; ``w`` is [k, n] or [B, k, n]."""
    tape = _tape_of(x, w, b)
    x, w = _as_node(x, tape), _as_node(w, tape)
    if x.ndim != 2 or w.shape[-2] != x.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    xv, wv = x.value, w.value
    out = _make(
        _mm(xv, wv),
        tape,
        ((x, lambda g: _mm_grads(xv, wv, g)[0]), (w, lambda g: _mm_grads(xv, wv, g)[1])),
    )
    if b is not None:
        out = add(out, b)
    return out


def transpose(a):
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D node")
    return _make(a.value.T.copy(), a.tape, ((a, lambda g: g.T),))


def reshape(a, shape):
    old = a.shape
    return _make(a.value.reshape(shape), a.tape, ((a, lambda g: g.reshape(old)),))


# ------------------------------------------------------------------- softmax


def softmax(z, axis=-1):
    shifted = z.value - z.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, z.tape, ((z, lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True))),))


def log_softmax(z, axis=-1):
    shifted = z.value - z.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, z.tape, ((z, lambda g: g - p * g.sum(axis=axis, keepdims=True)),))


# ------------------------------------------------------------------ indexing


def gather(x, indices):
    """``x[i, indices[i]]`` for 2-D ``x``; ``x[indices]`` for 1-D ``x``."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    if x.ndim == 2:
        rows = np.arange(shape[0])
        if idx.shape != (shape[0],):
            raise DimensionError("gather needs one index per row")

        def fn(g):
            out = np.zeros(shape)
            out[rows, idx] = g
            return out

        return _make(x.value[rows, idx], x.tape, ((x, fn),))

    def fn1(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _make(x.value[idx], x.tape, ((x, fn1),))


# ------------------------------------------------------------------- cosine


def l2_normalize(x):
    """Scale each vector along the last axis to unit length."""
    v = x.value
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise DegenerateInputError("cannot normalize a zero vector")
    y = v / norm
    return _make(y, x.tape, ((x, lambda g: (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm),))


def cosine(u, v):
    """Cosine similarity along the last axis."""
    return sum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


def cosine_matrix(u, v):
    """Entry (i, j) is cosine(u[i], v[j])."""
    return matmul(l2_normalize(u), transpose(l2_normalize(v)))


# ----------------------------------------------------------------------- GRU

GRU_WEIGHTS = ("wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn")


def gru_cell(x, h, weights, mask=None):
    """One gated-recurrent-unit step.

    ``weights`` maps the names in :data:`GRU_WEIGHTS` to nodes. ``mask`` is an
    optional constant [B] 0/1 array; rows with mask 0 keep their previous state.
    """
    tape = _tape_of(x, h)
    wz, uz, bz, wr, ur, br, wn, un, bn = (weights[k] for k in GRU_WEIGHTS)
    xv, hv = x.value, h.value
    az = _mm(xv, wz.value) + _mm(hv, uz.value) + bz.value
    ar = _mm(xv, wr.value) + _mm(hv, ur.value) + br.value
    xn = _mm(xv, wn.value) + bn.value
    hn = np.ascontiguousarray(_mm(hv, un.value))
    hv_c = np.ascontiguousarray(hv)
    m = None if mask is None else np.ascontiguousarray(mask, dtype=np.float64)
    z, r, n, h_new = kernels.gru_gates_forward(
        np.ascontiguousarray(az), np.ascontiguousarray(ar), np.ascontiguousarray(xn), hn, hv_c, m
    )
    cache = {}

    def gates(g):
        if cache.get("g") is not g:
            cache["g"] = g
            cache["res"] = kernels.gru_gates_backward(np.ascontiguousarray(g), z, r, n, hn, hv_c, m)
        return cache["res"]

    def gx(g):
        g_az, g_ar, g_xn, _, _ = gates(g)
        return (
            _mm_grads(xv, wz.value, g_az)[0]
            + _mm_grads(xv, wr.value, g_ar)[0]
            + _mm_grads(xv, wn.value, g_xn)[0]
        )

    def gh(g):
        g_az, g_ar, _, g_hn, g_h = gates(g)
        return (
            g_h
            + _mm_grads(hv, uz.value, g_az)[0]
            + _mm_grads(hv, ur.value, g_ar)[0]
            + _mm_grads(hv, un.value, g_hn)[0]
        )

    def wgrad(inp, w, slot):
        return lambda g: _mm_grads(inp, w.value, gates(g)[slot])[1]

    def bgrad(b, slot):
        return lambda g: _unbroadcast(gates(g)[slot], b.shape)

    parents = (
        (x, gx),
        (h, gh),
        (wz, wgrad(xv, wz, 0)),
        (uz, wgrad(hv, uz, 0)),
        (bz, bgrad(bz, 0)),
        (wr, wgrad(xv, wr, 1)),
        (ur, wgrad(hv, ur, 1)),
        (br, bgrad(br, 1)),
        (wn, wgrad(xv, wn, 2)),
        (un, wgrad(hv, un, 3)),
        (bn, bgrad(bn, 2)),
    )
    return _make(h_new, tape, parents)


def gru_cell_reference(x, h, weights, mask=None):
    """Unfused GRU step built from primitive ops; used to check :func:`gru_cell`."""
    w = weights
    z = sigmoid(add(add(linear(x, w["wz"]), linear(h, w["uz"])), w["bz"]))
    r = sigmoid(add(add(linear(x, w["wr"]), linear(h, w["ur"])), w["br"]))
    n = tanh(add(add(linear(x, w["wn"]), w["bn"]), mul(r, linear(h, w["un"]))))
    cand = add(mul(sub(1.0, z), n), mul(z, h))
    if mask is None:
        return cand
    m = np.asarray(mask, dtype=np.float64)[:, None]
    return add(h, mul(sub(cand, h), m))


# -------------------------------------------------------------- verification


def finite_difference_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + eps
            hi = float(f(*arrays))
            a[i] = orig - eps
            lo = float(f(*arrays))
            a[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
