"""
Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. Operations build `Node`s that remember their
parents and a vector-Jacobian rule; a `Tape` records the nodes created while
it is active, in creation order, which is a topological order of the graph.
`Tape.backward(root)` walks that record in reverse exactly once.

The op set is closed and has no general broadcasting: biases are added with
an explicit ones-column matmul, per-column scaling goes through `scale_cols`.
Any op whose forward value (or backward gradient) is not finite raises
`NonFiniteError` immediately, naming the op.

One tape belongs to one thread. The active tape is held in a context
variable, so independent tapes can be built concurrently in separate threads.
"""
import contextvars
import logging

import numpy as np
from scipy.special import expit

from specmatch.exceptions import ConfigError, NumericalError

logger = logging.getLogger(__name__)

_active_tape = contextvars.ContextVar('specmatch_active_tape', default=None)


class ShapeMismatchError(ConfigError):
    pass


class NonFiniteError(NumericalError):
    pass


class TapeError(ConfigError):
    pass


def _as_matrix(value):
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise ShapeMismatchError(f'values must be at most 2-D, got shape {array.shape}')
    return array


class Node:
    """
    A matrix value in the graph.

    Leaves have no parents. `grad` is allocated on first accumulation and has
    the shape of `value`.
    """

    __slots__ = ('value', 'grad', 'parents', 'backward_rule', 'op', 'requires_grad', 'name')

    def __init__(self, value, parents=(), backward_rule=None, op='leaf', requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        if self.value.shape != (1, 1):
            raise ShapeMismatchError(f'item() needs a 1x1 node, got {self.value.shape}')
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, gradient):
        if self.grad is None:
            self.grad = np.array(gradient, dtype=np.float64, copy=True)
        else:
            self.grad += gradient

    def __repr__(self):
        label = f' {self.name!r}' if self.name else ''
        return f'<Node{label} {self.op} {self.value.shape}>'


def leaf(value, requires_grad=True, name=None):
    """A differentiable input (parameter or feature matrix)."""
    node = Node(_check_finite(_as_matrix(value).copy(), 'leaf'), requires_grad=requires_grad, name=name)
    _record(node)
    return node


def constant(value, name=None):
    """A value gradients never flow into."""
    return leaf(value, requires_grad=False, name=name)


def as_node(value):
    return value if isinstance(value, Node) else constant(value)


def _check_finite(array, op):
    if not np.isfinite(array).all():
        raise NonFiniteError(f'{op}: non-finite value produced')
    return array


def _record(node):
    tape = _active_tape.get()
    if tape is not None:
        tape.nodes.append(node)


def make_op(value, parents, backward_rule, op):
    """
    Register the result of an op. `backward_rule(g)` returns one gradient (or
    None) per parent for upstream gradient g.
    """
    value = _check_finite(_as_matrix(value), op)
    requires_grad = any(p.requires_grad for p in parents)
    node = Node(value, parents, backward_rule if requires_grad else None, op, requires_grad)
    _record(node)
    return node


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(f'{op}: shapes {a.shape} and {b.shape} differ')


class Tape:
    """
    Ordered record of the nodes built during one forward pass.

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def clear(self):
        self.nodes = []

    def backward(self, root):
        """
        Populate `.grad` on every requires_grad leaf reachable from `root`.

        Leaf gradients accumulate across calls; call `zero_grad()` on the
        leaves (or build fresh leaves) between iterations.
        """
        if root.value.shape != (1, 1):
            raise TapeError(f'backward needs a scalar (1x1) root, got {root.value.shape}')
        if not root.requires_grad:
            return
        if root.is_leaf:
            root.accumulate(np.ones((1, 1)))
            return
        if not any(node is root for node in reversed(self.nodes)):
            raise TapeError('root was not recorded on this tape')

        # leaves may predate the tape (parameters), so they are fed directly
        upstream = {id(root): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = upstream.pop(id(node), None)
            if g is None or node.is_leaf:
                continue
            parent_grads = node.backward_rule(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _check_finite(np.asarray(pg, dtype=np.float64), f'{node.op} backward')
                if pg.shape != parent.value.shape:
                    raise ShapeMismatchError(
                        f'{node.op} backward: gradient shape {pg.shape} != value shape {parent.value.shape}'
                    )
                if parent.is_leaf:
                    parent.accumulate(pg)
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg


def backward(tape, root):
    tape.backward(root)


# --- linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f'matmul: shapes {a.shape} and {b.shape} are not aligned')
    av, bv = a.value, b.value

    def rule(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return make_op(av @ bv, (a, b), rule, 'matmul')


def transpose(a):
    a = as_node(a)
    return make_op(a.value.T.copy(), (a,), lambda g: (g.T,), 'transpose')


def right_mul_const(a, k):
    """a @ K for a constant matrix K."""
    a = as_node(a)
    k = _as_matrix(k)
    if a.shape[1] != k.shape[0]:
        raise ShapeMismatchError(f'right_mul_const: shapes {a.shape} and {k.shape} are not aligned')
    return make_op(a.value @ k, (a,), lambda g: (g @ k.T,), 'right_mul_const')


def left_mul_const(k, a):
    """K @ a for a constant matrix K."""
    a = as_node(a)
    k = _as_matrix(k)
    if k.shape[1] != a.shape[0]:
        raise ShapeMismatchError(f'left_mul_const: shapes {k.shape} and {a.shape} are not aligned')
    return make_op(k @ a.value, (a,), lambda g: (k.T @ g,), 'left_mul_const')


# --- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, 'add')
    return make_op(a.value + b.value, (a, b), lambda g: (g, g), 'add')


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, 'sub')
    return make_op(a.value - b.value, (a, b), lambda g: (g, -g), 'sub')


def hadamard(a, b):
    a, b = as_node(a), as_node(b)
    _same_shape(a, b, 'hadamard')
    av, bv = a.value, b.value
    return make_op(av * bv, (a, b), lambda g: (g * bv, g * av), 'hadamard')


def scale(a, c):
    a = as_node(a)
    c = float(c)
    return make_op(a.value * c, (a,), lambda g: (g * c,), 'scale')


def scale_cols(a, v):
    """Multiply column j of `a` by v[0, j]; `v` is a 1 x cols node or constant."""
    a, v = as_node(a), as_node(v)
    if v.shape != (1, a.shape[1]):
        raise ShapeMismatchError(f'scale_cols: scale shape {v.shape} does not fit {a.shape}')
    av, vv = a.value, v.value

    def rule(g):
        return (g * vv, np.sum(g * av, axis=0, keepdims=True))

    return make_op(av * vv, (a, v), rule, 'scale_cols')


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return make_op(out, (a,), lambda g: (g * out,), 'exp')


def relu(a):
    a = as_node(a)
    mask = a.value > 0
    return make_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), 'relu')


def softplus(a):
    a = as_node(a)
    av = a.value
    return make_op(np.logaddexp(0.0, av), (a,), lambda g: (g * expit(av),), 'softplus')


# --- reductions and row-wise ops ------------------------------------------

def sum(a):  # noqa: A001 - part of the op vocabulary
    a = as_node(a)
    shape = a.shape
    return make_op(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), 'sum')


def frobenius_sq(a):
    a = as_node(a)
    av = a.value
    return make_op(np.array([[np.sum(av * av)]]), (a,), lambda g: (2.0 * g[0, 0] * av,), 'frobenius_sq')


def row_l2_normalize(a, eps=1e-12):
    """x / max(||x||, eps) per row."""
    if not eps > 0:
        raise ValueError('row_l2_normalize needs eps > 0')
    a = as_node(a)
    av = a.value
    norms = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    clipped = norms <= eps
    denom = np.where(clipped, eps, norms)
    out = av / denom

    def rule(g):
        radial = np.sum(g * out, axis=1, keepdims=True)
        grad = (g - np.where(clipped, 0.0, out * radial)) / denom
        return (grad,)

    return make_op(out, (a,), rule, 'row_l2_normalize')


def softmax_rows(a):
    a = as_node(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return make_op(out, (a,), rule, 'softmax_rows')


def logsumexp_rows_masked(a, mask):
    """
    rows x 1 column of log(sum_j exp(a_ij)) over entries where mask is True.
    Each row must keep at least one entry.
    """
    a = as_node(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeMismatchError(f'logsumexp_rows_masked: mask {mask.shape} does not fit {a.shape}')
    empty = ~mask.any(axis=1)
    if empty.any():
        raise ShapeMismatchError(
            f'logsumexp_rows_masked: rows {np.flatnonzero(empty)[:10].tolist()} are fully masked'
        )
    masked = np.where(mask, a.value, -np.inf)
    peak = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    total = e.sum(axis=1, keepdims=True)
    out = peak + np.log(total)
    weights = e / total

    return make_op(out, (a,), lambda g: (g * weights,), 'logsumexp_rows_masked')


def topk_indices(values, p):
    """
    Column indices of the p largest entries per row, in descending value
    order; ties go to the lower column index.
    """
    values = np.asarray(values)
    n_rows, n_cols = values.shape
    if not 1 <= p <= n_cols:
        raise ShapeMismatchError(f'top-{p} needs 1 <= p <= {n_cols}')

    if p == n_cols:
        candidates = np.broadcast_to(np.arange(n_cols), values.shape)
        order = np.argsort(-values, axis=1, kind='stable')
        return np.take_along_axis(np.ascontiguousarray(candidates), order, axis=1)

    partition = np.argpartition(-values, p - 1, axis=1)[:, :p]
    threshold = np.take_along_axis(values, partition, axis=1).min(axis=1, keepdims=True)
    above = values > threshold
    need = p - above.sum(axis=1, keepdims=True)
    at = values == threshold
    selected = above | (at & (np.cumsum(at, axis=1) <= need))

    columns = np.nonzero(selected)[1].reshape(n_rows, p)
    picked = np.take_along_axis(values, columns, axis=1)
    order = np.argsort(-picked, axis=1, kind='stable')
    return np.take_along_axis(columns, order, axis=1)


def mean_topk_rows(a, p, indices=None):
    """
    rows x 1 column of the mean of each row's p largest entries. The selected
    index set is a constant for the backward pass.
    """
    a = as_node(a)
    if indices is None:
        indices = topk_indices(a.value, p)
    indices = np.asarray(indices)
    if indices.shape != (a.shape[0], p):
        raise ShapeMismatchError(f'mean_topk_rows: indices {indices.shape} do not fit ({a.shape[0]}, {p})')
    picked = np.take_along_axis(a.value, indices, axis=1)
    shape = a.shape

    def rule(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, indices, np.broadcast_to(g / p, indices.shape), axis=1)
        return (grad,)

    return make_op(picked.mean(axis=1, keepdims=True), (a,), rule, 'mean_topk_rows')


def gather_rows(a, idx):
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def rule(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return make_op(a.value[idx], (a,), rule, 'gather_rows')
