"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every primitive's vector-Jacobian product is itself written with tape
operations, so gradients computed with ``create_graph=True`` are ordinary
differentiable tensors. Differentiating a loss built from such gradients gives
exact second-order derivatives, which is what the meta-gradient needs.

Tensors without a tape are constants. An operation records onto a tape as
soon as one of its inputs lives on that tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "backward_through_gradients",
    "broadcast_to",
    "detach",
    "elu",
    "exp",
    "finite_diff_check",
    "grad",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "minimum",
    "relu",
    "reshape",
    "segment_softmax",
    "segment_sum",
    "sddmm",
    "spmm",
    "sum_to",
    "take",
    "tensor_sum",
    "transpose",
]

DEFAULT_LEAKY_SLOPE = 0.2


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """An operation produced NaN or infinity."""


class Tape:
    """Ordered record of the operations applied to its tensors.

    Node ids increase monotonically, so every node's id is greater than the
    ids of its inputs and sorting by id is a topological order.
    """

    _ids = itertools.count()

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _next_id(self) -> int:
        return next(Tape._ids)

    def leaf(self, value) -> "Tensor":
        """Register a differentiable input."""
        return Tensor(value, tape=self)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """Immutable float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "id", "parents", "vjp", "op")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape | None = None, *, _parents=(), _vjp=None, _op="leaf",
                 _check=True):
        if _op == "leaf":
            data = np.array(value, dtype=np.float64)
        else:
            data = np.asarray(value, dtype=np.float64)
        # a finite sum rules out NaN/inf cheaply; overflowing sums get the exact check
        if _check and not np.isfinite(data.sum()) and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {_op!r}")
        data.flags.writeable = False
        self.data = data
        self.tape = tape
        self.parents = _parents
        self.vjp = _vjp
        self.op = _op
        if tape is not None:
            self.id = tape._next_id()
            tape.nodes.append(self)
        else:
            self.id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "const" if self.tape is None else f"id={self.id}, op={self.op}"
        return f"Tensor({self.data!r}, {kind})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Constant copy sharing the same (read-only) buffer."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.tape = None
    out.parents = ()
    out.vjp = None
    out.op = "detach"
    out.id = -1
    return out


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(data, _op=op)
    return Tensor(data, tape, _parents=tuple(inputs), _vjp=vjp, _op=op)


# ----------------------------------------------------------------------------
# shape plumbing

def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g, out, parents, needs):
        return [broadcast_to(g, src_shape)]

    return _record(data, [x], vjp, "sum_to")


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as err:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from err
    src_shape = x.shape

    def vjp(g, out, parents, needs):
        return [sum_to(g, src_shape)]

    return _record(np.ascontiguousarray(data), [x], vjp, "broadcast_to")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"cannot reshape {src_shape} to {shape}") from err

    def vjp(g, out, parents, needs):
        return [reshape(g, src_shape)]

    return _record(data, [x], vjp, "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs at least 2 dimensions")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g, out, parents, needs):
        return [transpose(g, inverse)]

    return _record(np.transpose(x.data, axes), [x], vjp, "transpose")


def _scatter(g, key, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``getitem``: add ``g`` into zeros of ``shape`` at ``key``."""
    g = as_tensor(g)
    data = _scatter_add(g.data, key, shape)

    def vjp(gg, out, parents, needs):
        return [getitem(gg, key)]

    return _record(data, [g], vjp, "scatter")


_SEGMENT_CACHE: dict = {}


def _segment_matrix(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse ``(n, E)`` incidence matrix with a one at ``(index[e], e)``; cached per index array."""
    key = (id(index), n)
    hit = _SEGMENT_CACHE.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    m = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size))
    if len(_SEGMENT_CACHE) > 256:
        _SEGMENT_CACHE.clear()
    _SEGMENT_CACHE[key] = (index, m)
    return m


def _scatter_add(values: np.ndarray, key, shape: tuple[int, ...]) -> np.ndarray:
    if not isinstance(key, tuple):
        key = (key,)
    arrays = [i for i, k in enumerate(key) if isinstance(k, np.ndarray)]
    if not arrays:
        data = np.zeros(shape)
        data[key] = values
        return data
    axis = arrays[0]
    if (len(arrays) == 1 and key[axis].ndim == 1 and len(key) == axis + 1
            and all(k == slice(None) for k in key[:axis])):
        index = key[axis]
        moved = np.moveaxis(values, axis, 0)
        summed = _segment_matrix(index, shape[axis]) @ moved.reshape(index.size, -1)
        return np.ascontiguousarray(np.moveaxis(summed.reshape((shape[axis],) + moved.shape[1:]), 0, axis))
    data = np.zeros(shape)
    np.add.at(data, key, values)
    return data


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape

    def vjp(g, out, parents, needs):
        return [_scatter(g, key, src_shape)]

    return _record(np.array(x.data[key]), [x], vjp, "getitem")


def take(x, index, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (indices may repeat)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    key = (slice(None),) * axis + (np.asarray(index, dtype=np.int64),)
    return getitem(x, key)


def segment_sum(x, segments, n_segments: int, axis: int = 0) -> Tensor:
    """Sum slices of ``x`` along ``axis`` that share a segment id."""
    x = as_tensor(x)
    axis = axis % x.ndim
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (x.shape[axis],):
        raise DimensionError("one segment id per entry along the reduced axis is required")
    key = (slice(None),) * axis + (segments,)
    shape = x.shape[:axis] + (n_segments,) + x.shape[axis + 1:]
    return _scatter(x, key, shape)


# ----------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, out, parents, needs):
        return [sum_to(g, sa) if needs[0] else None, sum_to(g, sb) if needs[1] else None]

    return _record(a.data + b.data, [a, b], vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, out, parents, needs):
        return [sum_to(g, sa) if needs[0] else None, sum_to(neg(g), sb) if needs[1] else None]

    return _record(a.data - b.data, [a, b], vjp, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, out, parents, needs):
        return [neg(g)]

    return _record(-a.data, [a], vjp, "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, out, parents, needs):
        pa, pb = parents
        return [sum_to(mul(g, pb), sa) if needs[0] else None,
                sum_to(mul(g, pa), sb) if needs[1] else None]

    return _record(a.data * b.data, [a, b], vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, out, parents, needs):
        _, pb = parents
        ga = sum_to(div(g, pb), sa) if needs[0] else None
        gb = sum_to(neg(div(mul(g, out), pb)), sb) if needs[1] else None
        return [ga, gb]

    return _record(a.data / b.data, [a, b], vjp, "div")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes.

    ``transpose_a`` / ``transpose_b`` swap the last two axes of an operand
    before multiplying, without recording a separate transpose.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if transpose_a and transpose_b:
        raise ValueError("transposing both operands is not supported")
    ad_ = _swap(a.data) if transpose_a else a.data
    bd_ = _swap(b.data) if transpose_b else b.data
    if ad_.shape[-1] != bd_.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad_.shape} @ {bd_.shape}")
    try:
        data = np.matmul(ad_, bd_)
    except ValueError as err:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from err
    sa, sb = a.shape, b.shape

    def vjp(g, out, parents, needs):
        pa, pb = parents
        ga = gb = None
        if transpose_a:  # out = a^T b
            if needs[0]:
                ga = sum_to(matmul(pb, g, transpose_b=True), sa)
            if needs[1]:
                gb = sum_to(matmul(pa, g), sb)
        elif transpose_b:  # out = a b^T
            if needs[0]:
                ga = sum_to(matmul(g, pb), sa)
            if needs[1]:
                gb = sum_to(matmul(g, pa, transpose_a=True), sb)
        else:
            if needs[0]:
                ga = sum_to(matmul(g, pb, transpose_b=True), sa)
            if needs[1]:
                gb = sum_to(matmul(pa, g, transpose_a=True), sb)
        return [ga, gb]

    return _record(data, [a, b], vjp, "matmul")


def _edge_scatter(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values`` (K, E, d) into (K, n, d) by edge ``index``."""
    return _scatter_add(values, (slice(None), index), values.shape[:1] + (n,) + values.shape[2:])


def spmm(weights, x, src, dst, n_out: int) -> Tensor:
    """Weighted message aggregation ``out[k, dst[e]] += weights[k, e] * x[k, src[e]]``.

    ``weights`` is ``(K, E)``, ``x`` is ``(K, N, d)``; the result is
    ``(K, n_out, d)``. Equivalent to gather, multiply and segment-sum, but
    recorded as a single node.
    """
    weights, x = as_tensor(weights), as_tensor(x)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if weights.ndim != 2 or x.ndim != 3 or weights.shape[0] != x.shape[0] or weights.shape[1] != src.size:
        raise DimensionError(f"spmm shapes incompatible: weights {weights.shape}, x {x.shape}")
    n_in = x.shape[1]
    data = _edge_scatter(x.data[:, src] * weights.data[:, :, None], dst, n_out)

    def vjp(g, out, parents, needs):
        w, xx = parents
        gw = sddmm(g, xx, dst, src) if needs[0] else None
        gx = spmm(w, g, dst, src, n_in) if needs[1] else None
        return [gw, gx]

    return _record(data, [weights, x], vjp, "spmm")


def sddmm(a, b, index_a, index_b) -> Tensor:
    """Per-edge inner products ``out[k, e] = <a[k, index_a[e]], b[k, index_b[e]]>``."""
    a, b = as_tensor(a), as_tensor(b)
    index_a = np.asarray(index_a, dtype=np.int64)
    index_b = np.asarray(index_b, dtype=np.int64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise DimensionError(f"sddmm shapes incompatible: {a.shape}, {b.shape}")
    na, nb = a.shape[1], b.shape[1]
    data = (a.data[:, index_a] * b.data[:, index_b]).sum(axis=2)

    def vjp(g, out, parents, needs):
        pa, pb = parents
        ga = spmm(g, pb, index_b, index_a, na) if needs[0] else None
        gb = spmm(g, pa, index_a, index_b, nb) if needs[1] else None
        return [ga, gb]

    return _record(data, [a, b], vjp, "sddmm")


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=True)
    kept_shape = data.shape
    if not keepdims:
        data = data.sum(axis=axis) if axis is not None else data.reshape(())

    def vjp(g, out, parents, needs):
        return [broadcast_to(reshape(g, kept_shape), src_shape)]

    return _record(data, [x], vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# ----------------------------------------------------------------------------
# elementwise nonlinearities

def exp(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g, out, parents, needs):
        return [mul(g, out)]

    return _record(np.exp(x.data), [x], vjp, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g, out, parents, needs):
        return [div(g, parents[0])]

    return _record(np.log(x.data), [x], vjp, "log")


def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky slope must lie in (0, 1)")
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)

    def vjp(g, out, parents, needs):
        return [mul(g, scale)]

    return _record(x.data * scale, [x], vjp, "leaky_relu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)

    def vjp(g, out, parents, needs):
        return [mul(g, mask)]

    return _record(x.data * mask, [x], vjp, "relu")


def elu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    mask = pos.astype(np.float64)
    data = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0.0)))

    def vjp(g, out, parents, needs):
        # derivative is 1 on the positive side and out + 1 = exp(x) elsewhere
        slope = add(mul(add(out, 1.0), 1.0 - mask), mask)
        return [mul(g, slope)]

    return _record(data, [x], vjp, "elu")


def minimum(x, bound: float) -> Tensor:
    """Elementwise ``min(x, bound)`` against a constant; saturated entries get zero gradient."""
    x = as_tensor(x)
    mask = (x.data < bound).astype(np.float64)

    def vjp(g, out, parents, needs):
        return [mul(g, mask)]

    return _record(np.minimum(x.data, bound), [x], vjp, "minimum")


def segment_softmax(scores, segments, n_segments: int | None = None) -> Tensor:
    """Softmax over the last axis of ``scores`` within groups sharing a segment id.

    Scores are shifted by their per-segment maximum before exponentiation; the
    shift is a constant, so derivatives are those of the unshifted softmax.
    """
    scores = as_tensor(scores)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (scores.shape[-1],):
        raise DimensionError("one segment id per score is required")
    if n_segments is None:
        n_segments = int(segments.max()) + 1 if segments.size else 0
    counts = np.bincount(segments, minlength=n_segments)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"segment_softmax got empty segments: {empty[:10].tolist()}")
    lead = scores.shape[:-1]
    seg_max = np.full(lead + (n_segments,), -np.inf)
    np.maximum.at(seg_max, (Ellipsis, segments), scores.data)
    shifted = scores - seg_max[..., segments]
    e = exp(shifted)
    axis = scores.ndim - 1
    denom = take(segment_sum(e, segments, n_segments, axis=axis), segments, axis=axis)
    return e / denom


# ----------------------------------------------------------------------------
# differentiation

def _reachable(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.tape is None or t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _accumulate(output: Tensor, create_graph: bool) -> dict[int, Tensor]:
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is None:
        raise ValueError("output is not recorded on a tape; nothing to differentiate")
    grads: dict[int, Tensor] = {output.id: Tensor(np.ones(output.shape))}
    for node in _reachable(output):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        if create_graph:
            parents, out = node.parents, node
        else:
            parents, out = tuple(detach(p) for p in node.parents), detach(node)
        needs = [p.tape is not None for p in node.parents]
        for p, gp, need in zip(node.parents, node.vjp(g, out, parents, needs), needs):
            if not need or gp is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = gp if prev is None else add(prev, gp)
    return grads


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to ``inputs``.

    With ``create_graph`` the returned tensors are recorded on the tape and can
    be differentiated again; otherwise they are constants.
    """
    inputs = list(inputs)
    grads = _accumulate(output, create_graph)
    result = []
    for x in inputs:
        g = grads.get(x.id) if x.tape is not None else None
        if g is None:
            g = Tensor(np.zeros(x.shape))
        elif not create_graph:
            g = detach(g)
        result.append(g)
    return result


def backward(output: Tensor) -> dict[int, np.ndarray]:
    """Gradient map from leaf node id to the gradient of ``output`` for that leaf."""
    grads = _accumulate(output, create_graph=False)
    leaves = {}
    for node in output.tape.nodes:
        if node.op == "leaf":
            g = grads.get(node.id)
            leaves[node.id] = np.array(g.data) if g is not None else np.zeros(node.shape)
    return leaves


def backward_through_gradients(outer_output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Differentiate a scalar built from recorded gradients back to the original leaves.

    The inner gradients must have been taken with ``create_graph=True``; if the
    outer scalar does not reach any of ``leaves`` through the tape, the inner
    pass was not recorded and a ``ValueError`` is raised.
    """
    if outer_output.tape is None:
        raise ValueError("outer output is not on a tape; inner gradients were not recorded")
    reach = {t.id for t in _reachable(outer_output)}
    if not any(leaf.id in reach for leaf in leaves):
        raise ValueError("outer output does not depend on the leaves; inner backward not recorded")
    return [g.data for g in grad(outer_output, leaves)]


def finite_diff_check(f: Callable[..., Tensor], point: Sequence[np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences of ``f``.

    ``f`` maps one tensor per entry of ``point`` to a scalar tensor. The
    relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = [np.array(p, dtype=np.float64) for p in point]
    tape = Tape()
    leaves = [tape.leaf(p) for p in point]
    analytic = [g.data for g in grad(f(*leaves), leaves)]

    worst = 0.0
    for k, base in enumerate(point):
        flat = base.reshape(-1)
        for idx in range(flat.size):
            values = []
            for step in (epsilon, -epsilon):
                shifted = [p.copy() for p in point]
                shifted[k].reshape(-1)[idx] += step
                values.append(f(*[Tensor(s) for s in shifted]).item())
            numeric = (values[0] - values[1]) / (2 * epsilon)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
