"""Small dense-tensor engine with reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded and can be
differentiated with :func:`backward`. Outside a tape they simply compute, which
is what inference uses.

    >>> W = Tensor(np.zeros((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(tanh(W))
    >>> backward(tape, loss, ParamStore({"W": W}))["W"]
    array([[1., 1.],
           [1., 1.]])

Everything is float64. Broadcasting is limited to what numpy does for the
elementwise ops; gradients are reduced back onto the operand shapes.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamStore",
    "KernelError",
    "constant",
    "matmul",
    "add",
    "sub",
    "elementwise_mul",
    "scale",
    "tanh",
    "sigmoid",
    "concat",
    "stack",
    "split",
    "unstack",
    "index",
    "row_select",
    "pick",
    "reshape",
    "transpose",
    "masked_softmax",
    "log",
    "sum_",
    "neg",
    "backward",
    "clip_global_norm",
    "global_norm",
    "adagrad_step",
    "numerical_gradient",
    "max_relative_error",
]


class KernelError(ValueError):
    """Raised on shape errors, misuse of a tape, or non-finite results."""


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; every primitive called inside the block is
    appended in execution order, so the record is already topologically sorted.
    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise KernelError(f"{op} produced non-finite values")
    return arr


def _record(op: str, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    out = Tensor(_finite(out_data, op))
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), (out,), backward_fn))
    return out


def _record_multi(op: str, inputs, outs_data, backward_fn) -> list[Tensor]:
    outs = [Tensor(_finite(d, op)) for d in outs_data]
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        for o in outs:
            o.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), tuple(outs), backward_fn))
    return outs


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise KernelError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


_ROW_BLOCK = 16384


def _ordered_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A @ B`` summing over k strictly left to right for every output entry.

    BLAS picks kernels by shape and layout, so the same row can round
    differently depending on what else is in the batch. Here every entry is
    computed by the same sequence of operations, which makes each output row
    a function of its own input row only.
    """
    k, n = B.shape
    lead = A.shape[:-1]
    A2 = A.reshape(-1, k)
    m = A2.shape[0]
    out = np.zeros((m, n))
    if k == 0 or m == 0:
        return out.reshape(lead + (n,))
    AT = np.ascontiguousarray(A2.T)
    rows = max(1, _ROW_BLOCK // max(n, 1))
    tmp = np.empty((rows, n))
    for s in range(0, m, rows):
        e = min(m, s + rows)
        o, t = out[s:e], tmp[: e - s]
        np.multiply(AT[0, s:e, None], B[0], out=o)
        for j in range(1, k):
            np.multiply(AT[j, s:e, None], B[j], out=t)
            o += t
    return out.reshape(lead + (n,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and a 2-D ``b`` of shape (k, n).

    The forward value of a row does not depend on the other rows (see
    ``_ordered_matmul``); gradients use BLAS.
    """
    a, b = constant(a), constant(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise KernelError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ B.T
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = _ordered_matmul(A, B) if A.ndim > 1 else _ordered_matmul(A[None], B)[0]
    return _record("matmul", (a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "elementwise_mul")
    A, B = a.data, b.data
    return _record(
        "elementwise_mul",
        (a, b),
        A * B,
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    a = constant(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    a = constant(a)
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    a = constant(a)
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0.0):
        raise KernelError("log of a non-positive value")
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    a = constant(a)
    shape = a.shape
    if axis is None:
        return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=ax), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise KernelError(f"reshape: cannot reshape {old} into {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    a = constant(a)
    if a.data.ndim != 2:
        raise KernelError("transpose expects a matrix")
    return _record("transpose", (a,), a.data.T, lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise KernelError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise KernelError(f"stack: {exc}") from None
    ax = axis % out.ndim
    return _record("stack", tensors, out, lambda g: tuple(np.moveaxis(g, ax, 0)))


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis`` (one tape node)."""
    a = constant(a)
    ax = axis % a.data.ndim
    if a.shape[ax] % sections:
        raise KernelError(f"split: axis of size {a.shape[ax]} not divisible by {sections}")
    parts = np.split(a.data, sections, axis=ax)
    shapes = [p.shape for p in parts]

    def bw(*grads):
        return (np.concatenate([np.zeros(s) if g is None else g for g, s in zip(grads, shapes)], axis=ax),)

    return _record_multi("split", (a,), parts, bw)


def unstack(a: Tensor, axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`stack`; one tape node for all slices."""
    a = constant(a)
    ax = axis % a.data.ndim
    moved = np.moveaxis(a.data, ax, 0)
    shape = moved.shape[1:]

    def bw(*grads):
        full = np.stack([np.zeros(shape) if g is None else g for g in grads], axis=0)
        return (np.moveaxis(full, 0, ax),)

    return _record_multi("unstack", (a,), list(moved), bw)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing ``a[key]``."""
    a = constant(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record("index", (a,), a.data[key], bw)


def row_select(a: Tensor, ids) -> Tensor:
    """Gather rows of a matrix: ``a[ids]`` for an integer array ``ids`` of any shape."""
    a = constant(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise KernelError(f"row_select: id out of range for {a.shape[0]} rows")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _record("row_select", (a,), a.data[ids], bw)


def pick(a: Tensor, cols) -> Tensor:
    """``a[i, cols[i]]`` for each row ``i`` of a matrix."""
    a = constant(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise KernelError(f"pick: expected matrix and one column per row, got {a.shape}, {cols.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _record("pick", (a,), a.data[rows, cols], bw)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax along the last axis restricted to positions where ``mask`` is true.

    Masked positions come out as exactly 0.0.
    """
    scores = constant(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise KernelError(f"masked_softmax: mask shape {mask.shape} != scores shape {scores.shape}")
    if not np.all(mask.any(axis=-1)):
        raise KernelError("masked_softmax: a row has no unmasked entry")
    z = np.where(mask, scores.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # left-to-right sum: trailing masked zeros cannot change the rounding
    p = e / np.cumsum(e, axis=-1)[..., -1:]

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", (scores,), p, bw)


# ---------------------------------------------------------------------------
# differentiation and optimisation
# ---------------------------------------------------------------------------


class ParamStore(Mapping[str, Tensor]):
    """Named trainable tensors with Adagrad accumulators of matching shape."""

    def __init__(self, params: Mapping[str, Tensor | np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.accumulators: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self.accumulators[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def copy(self) -> ParamStore:
        out = ParamStore({k: Tensor(t.data.copy()) for k, t in self._params.items()})
        out.accumulators = {k: v.copy() for k, v in self.accumulators.items()}
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())


def backward(tape: Tape, loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse pass over ``tape``; returns d(loss)/d(param) for every parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if tape.consumed:
        raise KernelError("tape already consumed by a previous backward pass")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise KernelError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        outs = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in outs):
            continue
        if len(node.outputs) == 1:
            in_grads = node.backward_fn(outs[0])
        else:
            in_grads = node.backward_fn(*outs)
        for t, g in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    tape.nodes.clear()
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in params.items()}


def global_norm(gradients: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in gradients.values())))


def clip_global_norm(gradients: Mapping[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(gradients)
    if norm <= threshold:
        return dict(gradients)
    factor = threshold / norm
    return {k: g * factor for k, g in gradients.items()}


def adagrad_step(
    params: ParamStore,
    gradients: Mapping[str, np.ndarray],
    lr: float,
    eps: float = 1e-8,
) -> ParamStore:
    """In-place Adagrad update (descent direction); returns ``params``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in gradients.items():
        acc = params.accumulators[name]
        acc += g * g
        params[name].data -= lr * g / (np.sqrt(acc) + eps)
    return params


def numerical_gradient(
    fn: Callable[[], float], params: ParamStore, step: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite differences of ``fn`` w.r.t. every parameter entry."""
    out = {}
    for name, t in params.items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], floor: float = 1e-8) -> float:
    worst = 0.0
    for k in a:
        x, y = a[k], b[k]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
