"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradientTape`.
Outside a tape nothing is recorded, which is what evaluation uses.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, NonFiniteError, ShapeError

MASK_FILL = -1e9
# post-softmax weights below this are snapped to exact zero
WEIGHT_FLOOR = 1e-30

_TAPES: list["GradientTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable


class GradientTape:
    """Ordered record of differentiable operations.

    Recording order is forward execution order, so walking the list backwards
    is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self.nodes.append((out, parents, backward_fn))

    def gradient(self, loss: Tensor, params: Iterable[Parameter] | None = None):
        return backward(loss, self, params)


@contextmanager
def no_tape():
    """Temporarily suspend recording on every active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}", tensor_name=op)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, name=op)
    if needs and _TAPES:
        _TAPES[-1].record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: relu, add, mul, scale, concat_last_axis."""
    if kind == "relu":
        return relu(*operands)
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(*operands, **kwargs)
    if kind == "concat_last_axis":
        return concat(operands, axis=-1)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def where_mask(a, mask: np.ndarray, fill: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is False by ``fill`` (additive masking)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        keep = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError(f"mask shape {mask.shape} incompatible with {a.shape}") from None
    return _make(np.where(keep, a.data, fill), (a,), lambda g: (g * keep,), "where_mask")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; output shape splices in ``indices.shape``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")

    def bw(g):
        out = np.zeros(a.shape)
        if ax == 0:
            np.add.at(out, idx, g)
        else:
            moved = np.moveaxis(out, ax, 0)
            gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx, gm)
        return (out,)

    return _make(np.take(a.data, idx, axis=ax), (a,), bw, "take")


# ---------------------------------------------------------------------------
# reductions and products


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        grads = [(g2 @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out.reshape(*lead, weight.shape[0]), parents, bw, "linear")


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    With ``mask`` given, masked entries are filled with a large negative value
    first and their weights come out as exact zeros.
    """
    x = as_tensor(x)
    if mask is not None:
        x = where_mask(x, mask)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y[y < WEIGHT_FLOOR] = 0.0

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(f"layer_norm: gain/shift must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, shift), bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy over rows of ``logits`` [N, C]."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {t.shape} targets for {n} rows")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross_entropy: target out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over every cell, computed from logits."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    cells = x.size
    loss = (np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / cells

    def bw(g):
        return (g * (stable_sigmoid(x) - y) / cells,)

    return _make(np.asarray(loss), (logits,), bw, "bce_with_logits")


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: GradientTape, params: Iterable[Parameter] | None = None):
    """Gradients of scalar ``loss`` w.r.t. ``params``.

    Returns a dict keyed by Parameter. Parameters the loss does not depend on
    get zero gradients. When ``params`` is None every Parameter that appears
    on the tape is returned.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
            if isinstance(parent, Parameter):
                seen[key] = parent
    if params is None:
        params = list(seen.values())
    result = {}
    for p in params:
        g = grads.get(id(p))
        result[p] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
    return result


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. At least
    ``n_samples`` components (or all, if fewer exist) are probed.
    """
    with GradientTape() as tape:
        loss = f()
    analytic = backward(loss, tape, params)
    slots = [(p, i) for p in params for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(slots) > n_samples:
        pick = rng.choice(len(slots), size=n_samples, replace=False)
        slots = [slots[k] for k in sorted(pick)]
    worst = 0.0
    with no_tape():
        for p, i in slots:
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[p].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
