import math

import numpy as np
import pytest

from backbone_fusion import tensor as T
from backbone_fusion.nn import (
    FFN,
    FPN,
    Attention,
    Conv2d,
    LayerNorm,
    Linear,
    WindowConfig,
    causal_mask,
    patch_merging,
    patchify,
    shifted_window_mask,
    upsample2x,
    window_attention,
)
from backbone_fusion.tensor import ContractError, ShapeError, Tensor

from conftest import leaf, weights_like

COMPOSITE_TOL = 1e-3


def np_lin(p, x):
    return x @ p.weight.data.T + p.bias.data


def np_mha(p, xq, xkv, mask=None):
    """Loop-over-heads reference attention on plain arrays."""
    q, k, v = np_lin(p.q, xq), np_lin(p.k, xkv), np_lin(p.v, xkv)
    d = q.shape[-1]
    dh = d // p.heads
    outs = []
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(dh)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        outs.append((e / e.sum(axis=-1, keepdims=True)) @ v[..., sl])
    return np_lin(p.o, np.concatenate(outs, axis=-1))


def test_linear_matches_matmul(rng):
    lin = Linear(5, 3, rng)
    x = rng.standard_normal((2, 4, 5))
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ lin.weight.data.T + lin.bias.data, atol=1e-12)
    with pytest.raises(ShapeError):
        lin(Tensor(np.ones((2, 4))))


def test_single_head_attention_oracle(rng):
    p = Attention(6, 1, rng)
    x = rng.standard_normal((2, 5, 6))
    q, k, v = (np_lin(m, x) for m in (p.q, p.k, p.v))
    s = q @ np.swapaxes(k, 1, 2) / math.sqrt(6)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    want = np_lin(p.o, a @ v)
    np.testing.assert_allclose(p(Tensor(x), Tensor(x)).data, want, atol=1e-12)


def test_multi_head_cross_attention_oracle(rng):
    p = Attention(8, 4, rng, d_kv=6)
    xq, xkv = rng.standard_normal((3, 4, 8)), rng.standard_normal((3, 7, 6))
    mask = rng.random((3, 4, 7)) < 0.6
    mask[..., 0] = True
    np.testing.assert_allclose(p(Tensor(xq), Tensor(xkv), mask).data, np_mha(p, xq, xkv, mask), atol=1e-12)


def test_causal_attention_ignores_future(rng):
    p = Attention(8, 2, rng)
    x = rng.standard_normal((1, 6, 8))
    y = x.copy()
    y[0, 4:] += 5.0
    m = causal_mask(6)
    a = p(Tensor(x), Tensor(x), m).data
    b = p(Tensor(y), Tensor(y), m).data
    np.testing.assert_allclose(a[0, :4], b[0, :4], atol=1e-12)


def test_attention_rejects_fully_masked_row(rng):
    p = Attention(4, 1, rng)
    x = Tensor(rng.standard_normal((1, 2, 4)))
    with pytest.raises(ContractError):
        p(x, x, np.array([[[True, True], [False, False]]]))


def test_attention_heads_must_divide(rng):
    with pytest.raises(ShapeError):
        Attention(6, 4, rng)


# -- windows ----------------------------------------------------------------


def brute_force_window_mask(h, w, win, shift):
    """Full [HW, HW] mask: same window after the cyclic shift and same source region."""

    def region(i, n):
        r = (i - shift) % n  # rolled coordinate of original index i
        if not shift:
            return r // win, 0
        band = 0 if r < n - win else (1 if r < n - shift else 2)
        return r // win, band

    cells = [(i, j) for i in range(h) for j in range(w)]
    m = np.zeros((h * w, h * w), bool)
    for a, (i1, j1) in enumerate(cells):
        for b, (i2, j2) in enumerate(cells):
            m[a, b] = region(i1, h) == region(i2, h) and region(j1, w) == region(j2, w)
    return m


@pytest.mark.parametrize("shift", [0, 2])
def test_window_attention_matches_masked_full_attention(shift, rng):
    h = w = 8
    win = 4
    p = Attention(8, 2, rng)
    grid = rng.standard_normal((2, h, w, 8))
    got = window_attention(WindowConfig(win, shift), p, Tensor(grid)).data
    flat = grid.reshape(2, h * w, 8)
    want = np_mha(p, flat, flat, brute_force_window_mask(h, w, win, shift)).reshape(2, h, w, 8)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shifted_window_mask_rows_are_symmetric_and_nonempty():
    m = shifted_window_mask(8, 8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert np.array_equal(m, np.swapaxes(m, 1, 2))
    assert m.any(axis=-1).all()
    # the top-left window never wraps, so it is unmasked
    assert m[0].all() and not m[-1].all()


def test_window_config_rejects_bad_shift():
    with pytest.raises(ValueError):
        WindowConfig(4, 4)


def test_window_attention_needs_divisible_grid(rng):
    with pytest.raises(ShapeError):
        window_attention(WindowConfig(4), Attention(4, 1, rng), Tensor(np.zeros((1, 6, 8, 4))))


def test_window_attention_gradients(rng):
    p = Attention(4, 2, rng)
    for shift in (0, 1):
        x = leaf(rng, 1, 4, 4, 4)
        w = weights_like(rng, x)
        f = lambda t: T.reduce_sum(window_attention(WindowConfig(2, shift), p, t) * w)
        assert T.finite_diff_check(f, x) < COMPOSITE_TOL
        assert T.param_grad_check(lambda: f(x), p.parameters(), rng) < COMPOSITE_TOL


# -- patches, merging, conv, FPN ---------------------------------------------


def test_patchify_layout(rng):
    px = rng.standard_normal((1, 8, 8, 3))
    got = patchify(Tensor(px), 4).data
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(got[0, i, j], px[0, 4 * i : 4 * i + 4, 4 * j : 4 * j + 4].reshape(-1))


def test_patch_merging_oracle(rng):
    lin = Linear(12, 6, rng)
    grid = rng.standard_normal((2, 4, 4, 3))
    got = patch_merging(Tensor(grid), lin).data
    assert got.shape == (2, 2, 2, 6)
    for b in range(2):
        for i in range(2):
            for j in range(2):
                tl, tr = grid[b, 2 * i, 2 * j], grid[b, 2 * i, 2 * j + 1]
                bl, br = grid[b, 2 * i + 1, 2 * j], grid[b, 2 * i + 1, 2 * j + 1]
                want = np.concatenate([tl, tr, bl, br]) @ lin.weight.data.T + lin.bias.data
                np.testing.assert_allclose(got[b, i, j], want, atol=1e-12)
    with pytest.raises(ShapeError):
        patch_merging(Tensor(np.zeros((1, 3, 4, 3))), lin)


def np_conv(x, weight, bias):
    b, h, w, _ = x.shape
    k = weight.shape[0]
    pad = k // 2
    out = np.zeros((b, h, w, weight.shape[-1])) + bias
    for i in range(h):
        for j in range(w):
            for di in range(k):
                for dj in range(k):
                    ii, jj = i + di - pad, j + dj - pad
                    if 0 <= ii < h and 0 <= jj < w:
                        out[:, i, j] += x[:, ii, jj] @ weight[di, dj]
    return out


def test_conv2d_oracle_and_gradients(rng):
    conv = Conv2d(3, 2, rng)
    conv.bias.data = rng.standard_normal(2)
    x = rng.standard_normal((2, 5, 4, 3))
    np.testing.assert_allclose(conv(Tensor(x)).data, np_conv(x, conv.weight.data, conv.bias.data), atol=1e-12)
    xt = leaf(rng, 1, 4, 4, 3)
    w = weights_like(rng, conv(xt))
    f = lambda t: T.reduce_sum(conv(t) * w)
    assert T.finite_diff_check(f, xt) < COMPOSITE_TOL
    assert T.param_grad_check(lambda: f(xt), conv.parameters(), rng) < COMPOSITE_TOL


def test_upsample_and_gradient(rng):
    x = leaf(rng, 1, 2, 3, 2)
    up = upsample2x(x).data
    assert up.shape == (1, 4, 6, 2)
    assert up[0, 3, 5, 1] == x.data[0, 1, 2, 1]
    w = weights_like(rng, upsample2x(x))
    assert T.finite_diff_check(lambda t: T.reduce_sum(upsample2x(t) * w), x) < 1e-6


def test_fpn_hand_unrolled(rng):
    fpn = FPN([2, 4, 8], 3, rng)
    for c in fpn.smooth:
        c.bias.data = rng.standard_normal(3)
    f0, f1, f2 = rng.standard_normal((1, 8, 8, 2)), rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 2, 2, 8))
    up = lambda a: a.repeat(2, axis=1).repeat(2, axis=2)
    m2 = np_lin(fpn.lateral[2], f2)
    m1 = np_lin(fpn.lateral[1], f1) + up(m2)
    m0 = np_lin(fpn.lateral[0], f0) + up(m1)
    want = [np_conv(m, c.weight.data, c.bias.data) for m, c in zip((m0, m1, m2), fpn.smooth)]
    got = fpn([Tensor(f0), Tensor(f1), Tensor(f2)])
    for g, wnt in zip(got, want):
        np.testing.assert_allclose(g.data, wnt, atol=1e-12)


def test_fpn_shape_checks(rng):
    fpn = FPN([2, 4], 3, rng)
    with pytest.raises(ShapeError):
        fpn([Tensor(np.zeros((1, 4, 4, 2)))])
    with pytest.raises(ShapeError):
        fpn([Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 3, 3, 4)))])


def test_fpn_gradients(rng):
    fpn = FPN([2, 4], 3, rng)
    feats = [leaf(rng, 1, 4, 4, 2), leaf(rng, 1, 2, 2, 4)]
    ws = [weights_like(rng, Tensor(np.zeros((1, 4, 4, 3)))), weights_like(rng, Tensor(np.zeros((1, 2, 2, 3))))]

    def loss(a, b):
        outs = fpn([a, b])
        return T.reduce_sum(outs[0] * ws[0]) + T.reduce_sum(outs[1] * ws[1])

    assert T.finite_diff_check(lambda t: loss(t, feats[1]), feats[0]) < COMPOSITE_TOL
    assert T.finite_diff_check(lambda t: loss(feats[0], t), feats[1]) < COMPOSITE_TOL
    assert T.param_grad_check(lambda: loss(*feats), fpn.parameters(), rng) < COMPOSITE_TOL


def test_layer_norm_and_ffn_modules(rng):
    ln = LayerNorm(6)
    x = rng.standard_normal((3, 6))
    y = ln(Tensor(x)).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)
    for kind in ("erf", "tanh"):
        ffn = FFN(6, rng, gelu=kind)
        xt = leaf(rng, 2, 6)
        w = weights_like(rng, xt)
        f = lambda t: T.reduce_sum(ffn(t) * w)
        assert T.finite_diff_check(f, xt) < COMPOSITE_TOL
        assert T.param_grad_check(lambda: f(xt), ffn.parameters(), rng) < COMPOSITE_TOL


def test_named_parameters_are_unique_and_stable(rng):
    fpn = FPN([2, 4], 3, rng)
    names = [n for n, _ in fpn.named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in fpn.named_parameters()]
    assert "lateral.0.weight" in names and "smooth.1.bias" in names
