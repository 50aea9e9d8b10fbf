"""Minimal dense tensor engine with reverse-mode differentiation.

Everything is float64 and row-major. Graphs are define-by-run: each
operation returns a new node holding its value, its parents, and a
closure that maps the output gradient to parent gradients. ``backward``
walks the graph once in reverse topological order, so gradients are
exact and deterministic for a given graph.

Only the operations the ranking model and the residual quantizer need
are provided; there is no broadcasting beyond the row-vector adds those
models use.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(ValueError):
    """The computation graph is used outside its contract."""


class Tensor:
    """A node in the computation graph.

    ``value`` is the shaped float64 array; ``data`` exposes the flat
    row-major view. Leaf tensors created with ``requires_grad=True`` are
    trainable parameters; ``backward`` fills their ``grad``.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=""):
        arr = np.asarray(value, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.value = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self):
        return self.value.reshape(-1)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag}, requires_grad={self.requires_grad})"


def parameter(value, name=""):
    """A trainable leaf tensor."""
    return Tensor(value, requires_grad=True, name=name)


def constant(value, name=""):
    """A non-trainable leaf tensor (also used to stop gradients)."""
    return Tensor(value, requires_grad=False, name=name)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children order; deterministic for a given graph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``grad`` of every reachable tensor with
    ``requires_grad``; call ``zero_grads`` between optimizer steps.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    _accumulate(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for p, g in zip(node.parents, parent_grads):
            if p.requires_grad and g is not None:
                _accumulate(p, g)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    out = av @ bv

    def back(g):
        return g @ bv.T, av.T @ g

    return Tensor(out, parents=(a, b), backward=back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting the row max."""
    av = a.value
    if av.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {av.shape}")
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return ((g - (g * s).sum(axis=1, keepdims=True)) * s,)

    return Tensor(s, parents=(a,), backward=back)


LAYERNORM_EPS = 1e-5


def layernorm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization to zero mean and unit population variance.

    The variance denominator is the row width d (population variance),
    and 1e-5 sits inside the square root, so a constant row maps to the
    bias without dividing by zero.
    """
    av = a.value
    if av.ndim != 2:
        raise DimensionError(f"layernorm expects a matrix, got shape {av.shape}")
    d = av.shape[1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise DimensionError("layernorm gain/bias must be vectors of the row width")
    mu = av.mean(axis=1, keepdims=True)
    centered = av - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = centered * inv
    out = xhat * gain.value + bias.value

    def back(g):
        gx = g * gain.value
        # d/dx of (x - mu(x)) * inv(x): the two mean reductions fold into
        # the usual three-term layernorm gradient.
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        da = inv * (gx - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        return da, dgain, dbias

    return Tensor(out, parents=(a, gain, bias), backward=back)


def gather_sum(table: Tensor, rows) -> Tensor:
    """Sum of the selected table rows; duplicates accumulate.

    Backward scatters the incoming gradient onto each selected row, so a
    row picked twice receives the gradient twice.
    """
    tv = table.value
    if tv.ndim != 2:
        raise DimensionError(f"gather_sum expects a matrix table, got shape {tv.shape}")
    idx = np.asarray(list(rows), dtype=np.intp)
    h = tv.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= h):
        raise IndexError(f"gather_sum: row index out of range [0, {h})")
    out = tv[idx].sum(axis=0) if idx.size else np.zeros(tv.shape[1])

    def back(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, parents=(table,), backward=back)


def gather_groups(table: Tensor, groups) -> Tensor:
    """Stack of per-group row sums: output row i sums table rows groups[i].

    An empty group yields a zero row. This is the batched form of
    ``gather_sum`` used for user histories and minibatches.
    """
    tv = table.value
    if tv.ndim != 2:
        raise DimensionError(f"gather_groups expects a matrix table, got shape {tv.shape}")
    flat = []
    seg = []
    for i, grp in enumerate(groups):
        for r in grp:
            flat.append(r)
            seg.append(i)
    idx = np.asarray(flat, dtype=np.intp)
    seg = np.asarray(seg, dtype=np.intp)
    h = tv.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= h):
        raise IndexError(f"gather_groups: row index out of range [0, {h})")
    out = np.zeros((len(groups), tv.shape[1]))
    if idx.size:
        np.add.at(out, seg, tv[idx])

    def back(g):
        gt = np.zeros_like(tv)
        if idx.size:
            np.add.at(gt, idx, g[seg])
        return (gt,)

    return Tensor(out, parents=(table,), backward=back)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def back(g):
        return g, g

    return Tensor(a.value + b.value, parents=(a, b), backward=back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def back(g):
        return g, -g

    return Tensor(a.value - b.value, parents=(a, b), backward=back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return g * bv, g * av

    return Tensor(av * bv, parents=(a, b), backward=back)


def relu(a: Tensor) -> Tensor:
    av = a.value
    mask = av > 0

    def back(g):
        return (g * mask,)

    return Tensor(np.where(mask, av, 0.0), parents=(a,), backward=back)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows; |x| > 30 saturates cleanly.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_stable(a.value)

    def back(g):
        return (g * s * (1.0 - s),)

    return Tensor(s, parents=(a,), backward=back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return Tensor(a.value * c, parents=(a,), backward=back)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.value.shape}")

    def back(g):
        return (g.T,)

    return Tensor(a.value.T, parents=(a,), backward=back)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_rows needs at least one tensor")
    width = tensors[0].value.shape[-1]
    for t in tensors:
        if t.value.ndim != 2 or t.value.shape[1] != width:
            raise DimensionError("concat_rows: all inputs must be matrices of equal width")
    sizes = [t.value.shape[0] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.vsplit(g, splits))

    return Tensor(np.vstack([t.value for t in tensors]), parents=tuple(tensors), backward=back)


def mean(a: Tensor) -> Tensor:
    n = a.value.size

    def back(g):
        return (np.full_like(a.value, g.item() / n),)

    return Tensor(np.array(a.value.mean()), parents=(a,), backward=back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        return (np.full_like(a.value, g.item()),)

    return Tensor(np.array(a.value.sum()), parents=(a,), backward=back)


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared entries, the squared Frobenius norm."""
    av = a.value

    def back(g):
        return (2.0 * g.item() * av,)

    return Tensor(np.array((av * av).sum()), parents=(a,), backward=back)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix (bias add)."""
    if a.value.ndim != 2 or v.value.shape != (a.value.shape[1],):
        raise DimensionError(f"add_rowvec: {a.value.shape} + {v.value.shape}")

    def back(g):
        return g, g.sum(axis=0)

    return Tensor(a.value + v.value, parents=(a, v), backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.value.shape} as {shape}")
    old = a.value.shape

    def back(g):
        return (g.reshape(old),)

    return Tensor(a.value.reshape(shape), parents=(a,), backward=back)


def concat_flat(tensors) -> Tensor:
    """Concatenate the flattened inputs into one vector."""
    tensors = list(tensors)
    sizes = [t.value.size for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    shapes = [t.value.shape for t in tensors]

    def back(g):
        parts = np.split(g, splits)
        return tuple(p.reshape(s) for p, s in zip(parts, shapes))

    return Tensor(np.concatenate([t.value.reshape(-1) for t in tensors]), parents=tuple(tensors), backward=back)


def pairwise_dot_upper(x: Tensor) -> Tensor:
    """All m(m-1)/2 pairwise dot products of the rows of an m-by-d matrix.

    Output order is row-major over pairs (i, j) with i < j.
    """
    xv = x.value
    if xv.ndim != 2:
        raise DimensionError(f"pairwise_dot_upper expects a matrix, got shape {xv.shape}")
    m = xv.shape[0]
    iu, ju = np.triu_indices(m, k=1)
    gram = xv @ xv.T
    out = gram[iu, ju]

    def back(g):
        s = np.zeros((m, m))
        s[iu, ju] = g
        return ((s + s.T) @ xv,)

    return Tensor(out, parents=(x,), backward=back)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy computed from logits.

    Uses the softplus identity so large logits never overflow; labels
    are plain arrays (no gradient flows to them).
    """
    z = logits.value
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: labels shape {y.shape} vs logits {z.shape}")
    n = z.size
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    out = np.array((softplus - y * z).mean())

    def back(g):
        return ((_sigmoid_stable(z) - y) * (g.item() / n),)

    return Tensor(out, parents=(logits,), backward=back)


# ---------------------------------------------------------------------------
# parameter updates


class SGD:
    """Plain gradient descent over a list of parameters."""

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.value -= self.lr * p.grad

    def zero_grad(self):
        zero_grads(self.params)


class Adam:
    """Adam with the usual defaults: betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)


def make_optimizer(kind: str, params, lr):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
