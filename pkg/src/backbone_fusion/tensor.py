"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op records its output on the active :class:`Tape`
(``with Tape() as tape: ...``). Outside a tape nothing is recorded, which is
the inference fast path. Broadcasting is deliberately narrow: operands must
have equal shapes, one must be a scalar, or the shorter shape must equal the
trailing axes of the longer one (leading batch axes).
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

FLOAT_TYPES = (np.float32, np.float64)
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of the ops executed during one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.node: int | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    the parent's shape.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        out.node = len(tape.nodes)
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
        out.node = None
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return math.prod(shape) == 1 and all(s == 1 for s in shape)


def check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    if (_is_scalar_shape(a) and len(a) <= len(b)) or (_is_scalar_shape(b) and len(b) <= len(a)):
        return
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar_shape(shape):
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape((-1,) + shape).sum(axis=0)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return custom_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return custom_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = a.dtype.type(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    return custom_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    return custom_op(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)),
    )


# ---------------------------------------------------------------------------
# unary maps


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return custom_op(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return custom_op(a.data * on, (a,), lambda g: (g * on,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.exp(-np.logaddexp(0, -x)).astype(x.dtype)
    return custom_op(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return custom_op(out, (a,), lambda g: (g * np.exp(-np.logaddexp(0, -x)).astype(x.dtype),))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor, approximate: str = "erf") -> Tensor:
    """GELU ``x * Phi(x)``; ``approximate="tanh"`` uses the tanh form of Phi."""
    if approximate == "tanh":
        return gelu_tanh(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return custom_op(out, (a,), backward)


_TANH_C = math.sqrt(2.0 / math.pi)


def gelu_tanh(a: Tensor) -> Tensor:
    """``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``, c = sqrt(2/pi)."""
    x = a.data
    c = x.dtype.type(_TANH_C)
    ck3 = x.dtype.type(3 * _TANH_C * 0.044715)
    x2 = x * x
    th = x2 * x.dtype.type(0.044715)
    th += 1
    th *= x
    th *= c
    th = np.tanh(th)
    half1p = th + 1
    half1p *= 0.5
    out = x * half1p

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = th * th
        np.subtract(1, d, out=d)
        d *= x2 * ck3 + c
        d *= x
        d *= 0.5
        d += half1p
        d *= g
        return (d,)

    return custom_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return custom_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; without ``axes`` the last two axes are swapped."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return custom_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(np.ascontiguousarray(out) if not basic else out, (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (embedding lookup, batch selection)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return (full,)

    return custom_op(out, (a,), backward)


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return custom_op(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return custom_op(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept), src).copy(),))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    inv = a.dtype.type(1.0 / count)
    return custom_op(
        np.asarray(out, dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g.reshape(kept) * inv, src).copy(),),
    )


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``a[..., L, d]`` restricted to ``mask[..., L]``."""
    m = np.asarray(mask, dtype=a.dtype)
    if m.shape != a.shape[:-1]:
        raise ShapeError(f"masked_mean: mask {m.shape} does not match {a.shape[:-1]}")
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise ContractError("masked_mean: a row has no unmasked positions")
    w = (m / count)[..., None]
    return custom_op((a.data * w).sum(axis=-2), (a,), lambda g: (g[..., None, :] * w,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b:
        short, long = (lead_a, lead_b) if len(lead_a) < len(lead_b) else (lead_b, lead_a)
        if long[len(long) - len(short):] != short:
            raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} are not compatible")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# normalizers


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=axis)):
            raise ContractError("softmax: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    last = axis in (-1, x.ndim - 1)
    total = row_sum if last else (lambda v: v.sum(axis=axis, keepdims=True))
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / total(e)

    def backward(g):
        return (out * (g - total(g * out)),)

    return custom_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), backward)


def row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims; a GEMV beats ``ufunc.reduce`` on short rows."""
    d = x.shape[-1]
    return (x.reshape(-1, d) @ np.ones(d, dtype=x.dtype)).reshape(x.shape[:-1] + (1,))


def row_mean(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return (x.reshape(-1, d) @ np.full(d, 1.0 / d, dtype=x.dtype)).reshape(x.shape[:-1] + (1,))


def col_sum(x: np.ndarray, d: int) -> np.ndarray:
    """Sum of all leading positions of ``x`` viewed as ``[-1, d]``."""
    x2 = x.reshape(-1, d)
    return np.ones(x2.shape[0], dtype=x.dtype) @ x2


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {a.shape}")
    x = a.data
    xc = x - row_mean(x)
    var = row_mean(xc * xc)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = col_sum(g * xhat, d)
        if bias.requires_grad:
            gb = col_sum(g, d)
        if a.requires_grad:
            dxhat = g * gain.data
            gx = dxhat - row_mean(dxhat)
            gx -= xhat * row_mean(dxhat * xhat)
            gx *= rstd
        return gx, gg, gb

    return custom_op(out.astype(x.dtype, copy=False), (a, gain, bias), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return custom_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Returns a map from leaf tensor to its (accumulated) gradient. A tape can
    be differentiated once; record a new forward pass for another backward.
    """
    tape = tape if tape is not None else active_tape()
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if tape is None or loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node] is not loss:
        raise ContractError("backward: loss was not recorded on this tape")
    if tape.consumed:
        raise ContractError("backward: tape already differentiated; record a new forward pass")
    tape.consumed = True
    leaves: dict[int, Tensor] = {}
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = node.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        node.grad = None
        for parent, gp in zip(node.parents, grads):
            if gp is None or not parent.requires_grad:
                continue
            if parent.backward_fn is None and id(parent) not in leaves:
                # first contribution this pass: drop any gradient left from an earlier tape
                leaves[id(parent)] = parent
                parent.grad = gp
                continue
            parent.grad = gp if parent.grad is None else parent.grad + gp
    loss.grad = np.ones_like(loss.data)
    return {leaf: leaf.grad for leaf in leaves.values()}


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backward() and central differences.

    ``f`` maps ``x`` to a scalar tensor. Per entry the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. ``indices``
    restricts the probe to a subset of flat positions.
    """
    if not x.requires_grad:
        x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
    backward(loss, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def param_grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    per_param: int = 4,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Finite-difference check of a closure over several parameter tensors.

    Probes ``per_param`` random entries of each parameter; returns the worst
    relative error (same definition as :func:`finite_diff_check`).
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        p.grad = None
    return worst
