"""Parameterized building blocks: linear, attention, FFN, windowed attention,
patch merging, convolution and FPN combination.

Image grids are channels-last, ``[B, H, W, d]``. Sequences are ``[..., L, d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


class Module:
    """Container whose trainable tensors are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# linear / norm / ffn


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = xavier_uniform(rng, (d_out, d_in), d_in, d_out, dtype)
        self.bias = zeros((d_out,), dtype)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(p: Linear, x: Tensor) -> Tensor:
    """``x @ W.T + b`` over the last axis."""
    w, b = p.weight, p.bias
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not end in d_in={w.shape[1]}")
    xd = x.data
    # 2-D GEMMs: numpy loops over leading axes otherwise
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ w.data.T + b.data).reshape(xd.shape[:-1] + (w.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data).reshape(xd.shape) if x.requires_grad else None
        gw = (g2.T @ x2) if w.requires_grad else None
        gb = T.col_sum(g2, g2.shape[1]) if b.requires_grad else None
        return gx, gw, gb

    return T.custom_op(out, (x, w, b), backward)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gain = ones((d,), dtype)
        self.bias = zeros((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class FFN(Module):
    """linear -> gelu -> linear with a 4x hidden expansion."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float64, expansion: int = 4, gelu: str = "erf"):
        self.fc1 = Linear(d, expansion * d, rng, dtype)
        self.fc2 = Linear(expansion * d, d, rng, dtype)
        self.gelu = gelu

    def __call__(self, x: Tensor) -> Tensor:
        return ffn_forward(self, x)


def ffn_forward(p: FFN, x: Tensor) -> Tensor:
    return p.fc2(T.gelu(p.fc1(x), p.gelu))


# ---------------------------------------------------------------------------
# attention


class Attention(Module):
    """Multi-head attention parameters.

    Queries come from width ``d`` and keys/values from width ``d_kv``
    (defaults to ``d``); a cross-attention block reading another modality
    sets ``d_kv`` to the producer's width.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64, d_kv: int | None = None):
        if d % heads:
            raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d_kv, d, rng, dtype)
        self.v = Linear(d_kv, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, q_src: Tensor, kv_src: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return multi_head_attention(self, q_src, kv_src, mask)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = x.reshape(*lead, length, heads, d // heads)
    n = len(lead)
    return x.transpose(list(range(n)) + [n + 1, n, n + 2])


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    x = x.transpose(list(range(n)) + [n + 1, n, n + 2])
    return x.reshape(*lead, length, heads * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention on head-split tensors ``[..., h, L, dh]``.

    ``mask`` is boolean, broadcastable to ``[..., Lq, Lk]`` (True = may attend);
    a head axis is inserted before broadcasting.
    """
    dh = q.shape[-1]
    scores = T.scale(q @ k.transpose(), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = np.expand_dims(mask, axis=-3)
    try:
        probs = T.softmax(scores, axis=-1, mask=mask)
    except ContractError as exc:
        raise ContractError("attention: a query row has every key masked") from exc
    return probs @ v


def multi_head_attention(p: Attention, q_src: Tensor, kv_src: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Project, attend per head with scale ``1/sqrt(d/h)``, merge, project out."""
    if q_src.shape[:-2] != kv_src.shape[:-2]:
        raise ShapeError(f"attention: batch axes differ, {q_src.shape} vs {kv_src.shape}")
    q = split_heads(p.q(q_src), p.heads)
    k = split_heads(p.k(kv_src), p.heads)
    v = split_heads(p.v(kv_src), p.heads)
    return p.o(merge_heads(attend(q, k, v, mask)))


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


# ---------------------------------------------------------------------------
# windowed attention over image grids


@dataclass(frozen=True)
class WindowConfig:
    window: int
    shift: int = 0

    def __post_init__(self):
        if not 0 <= self.shift < self.window:
            raise ValueError(f"shift {self.shift} must lie in [0, window={self.window})")


@lru_cache(maxsize=64)
def shifted_window_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Boolean ``[nW, w*w, w*w]`` mask for cyclically shifted windows.

    After rolling by ``-shift`` the last window row/column mixes pixels from
    opposite image borders; tokens may attend only within their own region.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    cuts_h = (slice(0, height - window), slice(height - window, height - shift), slice(height - shift, height))
    cuts_w = (slice(0, width - window), slice(width - window, width - shift), slice(width - shift, width))
    region = 0
    for sh in cuts_h:
        for sw in cuts_w:
            labels[sh, sw] = region
            region += 1
    win = labels.reshape(height // window, window, width // window, window)
    win = win.transpose(0, 2, 1, 3).reshape(-1, window * window)
    return win[:, :, None] == win[:, None, :]


def window_partition(grid: Tensor, window: int) -> Tensor:
    b, h, w, d = grid.shape
    x = grid.reshape(b, h // window, window, w // window, window, d)
    x = x.transpose([0, 1, 3, 2, 4, 5])
    return x.reshape(b * (h // window) * (w // window), window * window, d)


def window_merge(windows: Tensor, b: int, h: int, w: int, window: int) -> Tensor:
    d = windows.shape[-1]
    x = windows.reshape(b, h // window, w // window, window, window, d)
    x = x.transpose([0, 1, 3, 2, 4, 5])
    return x.reshape(b, h, w, d)


def window_attention(cfg: WindowConfig, p: Attention, grid: Tensor) -> Tensor:
    """Self-attention confined to ``w x w`` windows, optionally shifted."""
    b, h, w, _ = grid.shape
    win, shift = cfg.window, cfg.shift
    if h % win or w % win:
        raise ShapeError(f"window_attention: grid {h}x{w} not divisible by window {win}")
    x = T.roll(grid, (-shift, -shift), (1, 2)) if shift else grid
    windows = window_partition(x, win)
    mask = None
    if shift:
        m = shifted_window_mask(h, w, win, shift)
        mask = np.broadcast_to(m[None], (b,) + m.shape).reshape(-1, *m.shape[1:])
    out = multi_head_attention(p, windows, windows, mask)
    out = window_merge(out, b, h, w, win)
    return T.roll(out, (shift, shift), (1, 2)) if shift else out


def patch_merging(grid: Tensor, p: Linear) -> Tensor:
    """Concatenate each 2x2 neighbourhood (tl, tr, bl, br) and project 4d -> 2d."""
    b, h, w, d = grid.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merging: grid {h}x{w} has an odd extent")
    x = grid.reshape(b, h // 2, 2, w // 2, 2, d)
    x = x.transpose([0, 1, 3, 2, 4, 5]).reshape(b, h // 2, w // 2, 4 * d)
    return p(x)


def patchify(pixels: Tensor, patch: int) -> Tensor:
    """``[B, H, W, C]`` pixels -> ``[B, H/p, W/p, p*p*C]`` patch vectors."""
    b, h, w, c = pixels.shape
    x = pixels.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose([0, 1, 3, 2, 4, 5]).reshape(b, h // patch, w // patch, patch * patch * c)


# ---------------------------------------------------------------------------
# convolution / FPN


class Conv2d(Module):
    """Stride-1, same-padded ``k x k`` convolution on channels-last grids."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64, k: int = 3):
        self.weight = xavier_uniform(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out, dtype)
        self.bias = zeros((c_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Sliding-window matmul: gather each ``k x k`` patch, multiply by the kernel."""
    b, h, w, c = x.shape
    k, _, c_in, c_out = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input channels {c} vs kernel {weight.shape}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.stack([xp[:, i : i + h, j : j + w, :] for i in range(k) for j in range(k)], axis=3)
    cols = cols.reshape(b * h * w, k * k * c)
    wmat = weight.data.reshape(k * k * c, c_out)
    out = (cols @ wmat + bias.data).reshape(b, h, w, c_out)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(b, h, w, k * k, c)
            gp = np.zeros_like(xp)
            for t in range(k * k):
                i, j = divmod(t, k)
                gp[:, i : i + h, j : j + w, :] += dcols[:, :, :, t, :]
            gx = gp[:, pad : pad + h, pad : pad + w, :]
        return gx, gw, gb

    return T.custom_op(out, (x, weight, bias), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[B, H, W, d]``."""
    b, h, w, d = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return T.custom_op(out, (x,), lambda g: (g.reshape(b, h, 2, w, 2, d).sum(axis=(2, 4)),))


class FPN(Module):
    def __init__(self, widths: list[int], d_fpn: int, rng: np.random.Generator, dtype=np.float64):
        self.lateral = [Linear(d, d_fpn, rng, dtype) for d in widths]
        self.smooth = [Conv2d(d_fpn, d_fpn, rng, dtype) for _ in widths]

    def __call__(self, features: list[Tensor]) -> list[Tensor]:
        return fpn_combine(features, self)


def fpn_combine(features: list[Tensor], p: FPN) -> list[Tensor]:
    """Lateral 1x1 projections, top-down nearest-upsampled sums, 3x3 smoothing.

    ``features`` runs fine to coarse; each level must be half the previous.
    """
    if not features or len(features) != len(p.lateral):
        raise ShapeError(f"fpn: got {len(features)} levels for {len(p.lateral)} laterals")
    for fine, coarse in zip(features, features[1:]):
        if (fine.shape[1], fine.shape[2]) != (2 * coarse.shape[1], 2 * coarse.shape[2]):
            raise ShapeError(f"fpn: level {coarse.shape} is not half of {fine.shape}")
    merged: list[Tensor] = [None] * len(features)
    top = p.lateral[-1](features[-1])
    merged[-1] = top
    for i in range(len(features) - 2, -1, -1):
        merged[i] = p.lateral[i](features[i]) + upsample2x(merged[i + 1])
    return [conv(m) for conv, m in zip(p.smooth, merged)]
