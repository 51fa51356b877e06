"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives needed by the encoder and the contrastive objectives are
provided. A :class:`Tape` records every primitive whose inputs require
gradients; :func:`backward` walks the tape in exact reverse order.

Typical use::

    with Tape() as tape:
        w = as_tensor(w0, requires_grad=True)
        loss = mean_all(softmax_rows(matmul(x, w)))
    grads = backward(loss)
    grads[w]  # ndarray with w's shape
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3
MASK_VALUE = -1e9

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dualcl_active_tape", default=None
)


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "_tape")
    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, requires_grad: bool = False, tape: "Tape | None" = None):
        self.data = data
        self.requires_grad = requires_grad
        self._tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul_elem(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else as_tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; leaves created with ``requires_grad=True``
    inside the block are registered on it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, tape=self)
        self.leaves.append(t)
        return t


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientMap(dict):
    """Leaf tensor -> gradient array of identical shape (keys compare by identity)."""


def current_tape() -> "Tape | None":
    return _active_tape.get()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def tensor(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the maximum of {MAX_RANK}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"shape mismatch: shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return as_tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(array, requires_grad: bool = False) -> Tensor:
    """Wrap an array-like as a tensor; a tracked leaf when ``requires_grad``."""
    data = np.array(array, dtype=np.float64)
    if data.ndim > MAX_RANK:
        raise ShapeError(f"rank {data.ndim} exceeds the maximum of {MAX_RANK}")
    if not np.all(np.isfinite(data)):
        raise DomainError("non-finite input values")
    if not requires_grad:
        return Tensor(data)
    tape = current_tape()
    if tape is None:
        raise TapeError("requires_grad leaf created outside an active Tape")
    if tape.consumed:
        raise TapeError("tape consumed")
    return tape.leaf(data)


def _record(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    if out.ndim > MAX_RANK:
        raise ShapeError(f"{kind}: result rank {out.ndim} exceeds {MAX_RANK}")
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{kind}: non-finite result")
    tape = None
    for t in inputs:
        if t.requires_grad:
            if tape is None:
                tape = t._tape
            elif t._tape is not tape:
                raise TapeError(f"{kind}: inputs recorded on different tapes")
    if tape is None:
        return Tensor(out)
    if tape.consumed:
        raise TapeError("tape consumed")
    result = Tensor(out, requires_grad=True, tape=tape)
    tape.nodes.append(_Node(kind, inputs, result, grad_fn))
    return result


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _trailing_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, batched 3-D @ 3-D, or 3-D @ 2-D (shared right operand)."""
    x, y = a.data, b.data
    ok = (
        (x.ndim == 2 and y.ndim == 2)
        or (x.ndim == 3 and y.ndim == 3 and x.shape[0] == y.shape[0])
        or (x.ndim == 3 and y.ndim == 2)
    )
    if not ok or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {x.shape} @ {y.shape}")
    out = x @ y

    def grad_fn(g):
        ga = g @ np.swapaxes(y, -1, -2)
        if x.ndim == 3 and y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _trailing_broadcast(a.data, b.data, "add")
    bshape = b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _trailing_broadcast(a.data, b.data, "sub")
    bshape = b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -_reduce_to(g, bshape)))


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    _trailing_broadcast(a.data, b.data, "mul_elem")
    x, y = a.data, b.data
    return _record("mul_elem", (a, b), x * y, lambda g: (g * y, _reduce_to(g * x, y.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: input must be strictly positive")
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _record("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Dot product along the last axis; output drops that axis."""
    if a.shape != b.shape:
        raise ShapeError(f"dot_rows: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    out = np.einsum("...i,...i->...", x, y)
    return _record("dot_rows", (a, b), out, lambda g: (g[..., None] * y, g[..., None] * x))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (a,), out, grad_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax via max-subtracted log-sum-exp."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", (a,), out, grad_fn)


def l2norm_rows(a: Tensor) -> Tensor:
    x = a.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DomainError("l2norm_rows: zero row")
    out = x / norms

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _record("l2norm_rows", (a,), out, grad_fn)


def mean_all(a: Tensor) -> Tensor:
    x = a.data
    n = x.size
    return _record("mean_all", (a,), np.asarray(x.mean()), lambda g: (np.full(x.shape, g / n),))


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows of a 2-D tensor; output shape is ``index.shape + (d,)``."""
    x = a.data
    idx = np.asarray(index, dtype=np.intp)
    if x.ndim != 2:
        raise ShapeError("gather_rows: source must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(x)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, x.shape[1]))
        return (full,)

    return _record("gather_rows", (a,), x[idx], grad_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = parts[0].shape[1:]
    if any(p.shape[1:] != tail for p in parts):
        raise ShapeError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return _record("concat_rows", parts, out, lambda g: tuple(np.split(g, bounds, axis=0)))


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm_rows: gain/bias must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return _record("layer_norm_rows", (a, gain, bias), out, grad_fn)


def apply_mask(a: Tensor, keep) -> Tensor:
    """Add ``MASK_VALUE`` wherever the broadcastable boolean ``keep`` is False."""
    keep = np.asarray(keep, dtype=bool)
    try:
        offset = np.broadcast_to(np.where(keep, 0.0, MASK_VALUE), a.shape)
    except ValueError as exc:
        raise ShapeError(f"apply_mask: mask {keep.shape} does not fit {a.shape}") from exc
    return _record("apply_mask", (a,), a.data + offset, lambda g: (g,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose_last: needs rank >= 2")
    out = np.swapaxes(a.data, -1, -2)
    return _record("transpose_last", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """B x T x d  ->  (B*heads) x T x (d/heads)."""
    b, t, d = a.shape
    if d % n_heads:
        raise ShapeError("split_heads: heads must divide width")
    dh = d // n_heads
    out = a.data.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3).reshape(b * n_heads, t, dh)

    def grad_fn(g):
        return (g.reshape(b, n_heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, d),)

    return _record("split_heads", (a,), out, grad_fn)


def merge_heads(a: Tensor, n_heads: int) -> Tensor:
    """Inverse of :func:`split_heads`."""
    bh, t, dh = a.shape
    if bh % n_heads:
        raise ShapeError("merge_heads: leading axis not divisible by heads")
    b = bh // n_heads
    out = a.data.reshape(b, n_heads, t, dh).transpose(0, 2, 1, 3).reshape(b, t, n_heads * dh)

    def grad_fn(g):
        return (g.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3).reshape(bh, t, dh),)

    return _record("merge_heads", (a,), out, grad_fn)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elem": mul_elem,
    "scalar_mul": scalar_mul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "dot_rows": dot_rows,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "l2norm_rows": l2norm_rows,
    "mean_all": mean_all,
    "gather_rows": gather_rows,
    "concat_rows": concat_rows,
    "layer_norm_rows": layer_norm_rows,
    "apply_mask": apply_mask,
    "reshape": reshape,
    "transpose_last": transpose_last,
    "split_heads": split_heads,
    "merge_heads": merge_heads,
}


def apply(kind: str, *inputs, **params) -> Tensor:
    """Apply a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> GradientMap:
    """Accumulate d(loss)/d(leaf) for every leaf on the loss's tape.

    Leaves the loss does not depend on receive zero gradients. The tape is
    consumed afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise TapeError("loss is not recorded on any tape")
    if tape.consumed:
        raise TapeError("tape consumed")
    if not tape.nodes:
        raise TapeError("tape is empty")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64, copy=True)

    result = GradientMap()
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise DomainError("non-finite gradient")
        result[leaf] = g.reshape(leaf.shape)
    return result


# ---------------------------------------------------------------------------
# verification and randomness
# ---------------------------------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    max_rel_err: float
    passed: bool
    worst: tuple[int, tuple[int, ...]] | None = None
    rel_errs: list[np.ndarray] = field(default_factory=list, repr=False)


def _scalar_value(out) -> float:
    data = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if data.size != 1:
        raise ShapeError(f"function must return a scalar, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def finite_difference_check(
    fn: Callable[..., Tensor],
    leaves: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-6,
    analytic: Sequence[np.ndarray] | None = None,
) -> FiniteDifferenceReport:
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    ``analytic`` overrides the tape gradients (used to confirm that corrupted
    gradients are detected).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    bases = [np.array(x, dtype=np.float64) for x in leaves]

    if analytic is None:
        with Tape():
            ts = [as_tensor(b, requires_grad=True) for b in bases]
            out = fn(*ts)
        _scalar_value(out)
        gmap = backward(out)
        analytic = [gmap[t] for t in ts]
    analytic = [np.asarray(a, dtype=np.float64) for a in analytic]

    def evaluate(arrays):
        return _scalar_value(fn(*[as_tensor(a) for a in arrays]))

    worst_err, worst_at, errs = 0.0, None, []
    for li, base in enumerate(bases):
        err = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            plus = [b.copy() for b in bases]
            minus = [b.copy() for b in bases]
            plus[li][idx] += h
            minus[li][idx] -= h
            num = (evaluate(plus) - evaluate(minus)) / (2 * h)
            a = float(analytic[li][idx])
            err[idx] = abs(a - num) / max(1e-12, abs(a), abs(num))
            if err[idx] > worst_err:
                worst_err, worst_at = float(err[idx]), (li, idx)
        errs.append(err)
    return FiniteDifferenceReport(worst_err, worst_err <= tol, worst_at, errs)


def dropout_mask(shape: Sequence[int], rate: float, seed) -> Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = tuple(shape)
    if rate == 0.0:
        return Tensor(np.ones(shape))
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return Tensor(np.where(keep, 1.0 / (1.0 - rate), 0.0))
