"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tape` records primitive operations while it is active; `grad` replays the
record backwards to produce exact adjoints. Backward rules are themselves
written in terms of primitives, so gradients of gradients work when
`create_graph=True` (required anywhere a Jacobian trace feeds a training
loss). Everything is float64; there is no GPU path and no fusion.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit as _expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is NaN or Inf."""


_node_ids = itertools.count()


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "parents", "vjp", "op", "node_id")

    def __init__(self, data, parents=(), vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents: tuple = parents
        self.vjp: Callable | None = vjp
        self.op = op
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # Operator sugar. Scalars and ndarrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return mul(self, reciprocal(_lift(other)))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return negate(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(x) -> Tensor:
    """Wrap an array or scalar as a constant leaf tensor."""
    return _lift(x)


# ---------------------------------------------------------------------------
# Recording state. Ops record parents/vjps only while a tape is active and
# recording is enabled; otherwise they return detached constants.

_active_tape: "Tape | None" = None
_recording = True


class Tape:
    """Ordered record of primitive ops for one forward (and backward) pass.

    A tape is single-owner: enter it, build the computation, call
    :func:`grad`, then drop it. Nested tapes are not supported; gradient
    graphs created with ``create_graph=True`` extend the same tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        global _recording
        self._prev = _recording
        _recording = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _recording
        _recording = self._prev
        return False


def _make(data, parents, vjp, op) -> Tensor:
    if _active_tape is not None and _recording:
        t = Tensor(data, parents=parents, vjp=vjp, op=op)
        _active_tape.nodes.append(t)
        return t
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# Broadcasting helpers.


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic.


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(negate(g), b.data.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.data.shape), _unbroadcast(mul(g, a), b.data.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def negate(a: Tensor) -> Tensor:
    def vjp(g):
        return (negate(g),)

    return _make(-a.data, (a,), vjp, "negate")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _make(a.data * c, (a,), vjp, "scale")


def reciprocal(a: Tensor) -> Tensor:
    out = _make(1.0 / a.data, (a,), None, "reciprocal")

    def vjp(g):
        return (negate(mul(g, square(out))),)

    out.vjp = vjp if out.parents else None
    return out


# ---------------------------------------------------------------------------
# Nonlinearities.


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), (a,), None, "tanh")

    def vjp(g):
        return (mul(g, sub(tensor(1.0), square(out))),)

    out.vjp = vjp if out.parents else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _make(_expit(a.data), (a,), None, "sigmoid")

    def vjp(g):
        return (mul(g, mul(out, sub(tensor(1.0), out))),)

    out.vjp = vjp if out.parents else None
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + exp(x)) computed without overflow for large |x|.
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _make(out_data, (a,), vjp, "softplus")


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, scale(a, 2.0)),)

    return _make(np.square(a.data), (a,), vjp, "square")


def sqrt(a: Tensor) -> Tensor:
    out = _make(np.sqrt(a.data), (a,), None, "sqrt")

    def vjp(g):
        return (mul(g, scale(reciprocal(out), 0.5)),)

    out.vjp = vjp if out.parents else None
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), None, "exp")

    def vjp(g):
        return (mul(g, out),)

    out.vjp = vjp if out.parents else None
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, reciprocal(a)),)

    return _make(np.log(a.data), (a,), vjp, "log")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may be stacked (..., i, k); ``b`` must be 2-D."""
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need a.ndim>=2 and b.ndim==2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b))
        k = a.data.shape[-1]
        j = b.data.shape[1]
        a2 = reshape(a, (-1, k))
        g2 = reshape(g, (-1, j))
        gb = matmul(transpose(a2), g2)
        return ga, gb

    if b.data.shape[1] == 1:
        # BLAS single-column products are not bitwise stable under row
        # permutation at small sizes; reduce each row independently instead.
        out = np.sum(a.data * b.data[:, 0], axis=-1)[..., None]
    else:
        out = a.data @ b.data
    return _make(out, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: default axes need 2-D, got {a.data.shape}")
        axes = (1, 0)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    if shape == orig:
        return a

    def vjp(g):
        return (reshape(g, orig),)

    return _make(np.reshape(a.data, shape), (a,), vjp, "reshape")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    if a.data.shape == shape:
        return a

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    # read-only view; op outputs are never written in place
    return _make(np.broadcast_to(a.data, shape), (a,), vjp, "broadcast_to")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        if keepdims:
            return (broadcast_to(g, shape),)
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
        return (broadcast_to(reshape(g, kept), shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(total))


def ordered_sum(a: Tensor, axis: int) -> Tensor:
    """Sum along ``axis`` with summands sorted ascending first.

    The result of a float sum depends on accumulation order; sorting makes
    the order a function of the value multiset alone, so permutation
    symmetries hold bitwise. The gradient equals that of a plain sum.
    """
    shape = a.data.shape
    axis = axis % len(shape)

    def vjp(g):
        kept = tuple(1 if i == axis else n for i, n in enumerate(shape))
        return (broadcast_to(reshape(g, kept), shape),)

    return _make(np.sum(np.sort(a.data, axis=axis), axis=axis), (a,), vjp, "ordered_sum")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    datas = [p.data for p in parts]
    base = datas[0].shape
    for d in datas[1:]:
        if len(d.shape) != len(base) or any(
            i != axis % len(base) and d.shape[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: mismatched shapes {[d.shape for d in datas]} on axis {axis}")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(
            slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1])) for i in range(len(parts))
        )

    return _make(np.concatenate(datas, axis=axis), parts, vjp, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    shape = a.data.shape
    axis = axis % len(shape)
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(len(shape)))

    def vjp(g):
        return (pad_zeros(g, axis, start, shape[axis] - stop),)

    return _make(a.data[idx].copy(), (a,), vjp, "slice_axis")


def pad_zeros(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    shape = a.data.shape
    axis = axis % len(shape)
    width = [(0, 0)] * len(shape)
    width[axis] = (before, after)

    def vjp(g):
        return (slice_axis(g, axis, before, before + shape[axis]),)

    return _make(np.pad(a.data, width), (a,), vjp, "pad_zeros")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of ``a`` along axis 0. ``idx`` is a constant int array."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")

    def vjp(g):
        return (scatter_add_rows(g, idx, n),)

    return _make(a.data[idx], (a,), vjp, "gather_rows")


def scatter_add_rows(a: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Accumulate rows of ``a`` into a ``num_rows``-row output at ``idx``.

    Accumulation follows the order of ``idx``, which is deterministic for a
    fixed call. Use :func:`canonical_segment_sum` where the result must be
    independent of row ordering.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for {a.data.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)

    def vjp(g):
        return (gather_rows(g, idx),)

    return _make(out, (a,), vjp, "scatter_add_rows")


def canonical_segment_sum(values: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Segment sum whose per-segment accumulation order is value-canonical.

    Rows are ordered by (segment, value columns) before accumulating, so two
    calls that differ only by a permutation of rows produce bitwise equal
    sums. Built from gather + scatter, so the gradient is exact.
    """
    idx = np.asarray(idx, dtype=np.intp)
    v = values.data
    cols = v.reshape(v.shape[0], -1) if v.ndim > 1 else v.reshape(-1, 1)
    keys = tuple(cols[:, c] for c in range(cols.shape[1] - 1, -1, -1)) + (idx,)
    order = np.lexsort(keys)
    return scatter_add_rows(gather_rows(values, order), idx[order], num_rows)


# ---------------------------------------------------------------------------
# Backward.


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    out_grad: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Adjoints of ``output`` with respect to each tensor in ``inputs``.

    ``out_grad`` seeds the backward pass (defaults to ones). With
    ``create_graph=True`` the backward computations are recorded on the
    active tape, so the returned gradients can be differentiated again.

    Requested inputs are treated as independent leaves: traversal stops at
    them, so asking for an interior node costs only the subgraph between it
    and the output. Each visited node is processed exactly once, in reverse
    construction order, which makes repeated runs bit-identical.
    """
    if out_grad is None:
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = _lift(out_grad)
        if seed.data.shape != output.data.shape:
            raise ShapeError(
                f"grad: out_grad shape {seed.data.shape} != output shape {output.data.shape}"
            )

    wanted = {id(t) for t in inputs}

    # Topological order over the parent graph, stopping at requested inputs.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if id(node) in wanted:
            continue
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    # A node matters only if an input is reachable from it; topo lists
    # parents before children, so one forward sweep settles the flags.
    relevant: set[int] = set(wanted)
    for node in topo:
        if id(node) in relevant:
            continue
        for p in node.parents:
            if id(p) in relevant:
                relevant.add(id(node))
                break

    adjoint: dict[int, Tensor] = {id(output): seed}

    global _recording
    prev = _recording
    _recording = bool(create_graph)
    try:
        for node in reversed(topo):
            if id(node) in wanted:
                continue
            g = adjoint.get(id(node))
            if g is None or node.vjp is None:
                continue
            if id(node) not in relevant:
                del adjoint[id(node)]
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in relevant:
                    continue
                acc = adjoint.get(id(p))
                adjoint[id(p)] = pg if acc is None else add(acc, pg)
            del adjoint[id(node)]
    finally:
        _recording = prev

    out = []
    for t in inputs:
        g = adjoint.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


def logsumexp(a: Tensor, axis=None) -> Tensor:
    """log(sum(exp(a))) with the usual max-shift for stability."""
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, tensor(shift))
    s = log(sum_(exp(shifted), axis=axis))
    return add(s, tensor(np.squeeze(shift, axis=axis) if axis is not None else shift.reshape(())))


def require_finite(x: Tensor | np.ndarray, what: str):
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{what} is not finite")
