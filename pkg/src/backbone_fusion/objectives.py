"""Training losses and target assignment.

Coarse objectives: image-text contrastive (ITC), masked language modeling
(MLM) and image-text matching (ITM) with negatives drawn in proportion to the
contrastive similarities. Fine objectives: focal word-region alignment over
grounding scores, centerness BCE and GIoU box loss, with fixed-radius center
sampling for positives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import ContractError, ShapeError, Tensor
from .vocab import MASK_ID, SPECIAL_IDS

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
CENTER_RADIUS = 1.5
# max box side ranges per FPN level (fine to coarse), in pixels
LEVEL_SIZE_RANGES = ((0.0, 12.0), (12.0, 24.0), (24.0, math.inf))


# ---------------------------------------------------------------------------
# shared


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over leading positions."""
    x = logits.data
    c = x.shape[-1]
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    x2 = x.reshape(-1, c)
    if t.shape[0] != x2.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for logits {logits.shape}")
    w = np.ones(t.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no positions carry weight")
    shifted = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - shifted[rows, t]
    loss = np.asarray((w * nll).sum() / total, dtype=x.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return ((p * (w / total)[:, None] * g).reshape(x.shape).astype(x.dtype),)

    return T.custom_op(loss, (logits,), backward)


def binary_cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE between ``sigmoid(logits)`` and soft targets in [0, 1]."""
    t = np.asarray(targets, dtype=logits.dtype)
    per = T.softplus(logits) - logits * Tensor(t)
    return T.reduce_mean(per)


# ---------------------------------------------------------------------------
# image-text contrastive


@dataclass
class SimilarityMatrix:
    """``values[i, j]``: similarity of image i and text j. The loss divides by a
    temperature stored as ``log(1/temperature)``."""

    values: Tensor
    log_inv_temp: Tensor

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def logits(self) -> Tensor:
        return self.values * T.exp(self.log_inv_temp)


def similarity(image_emb: Tensor, text_emb: Tensor, log_inv_temp: Tensor) -> SimilarityMatrix:
    return SimilarityMatrix(image_emb @ text_emb.transpose(), log_inv_temp)


def itc_loss(sim: SimilarityMatrix) -> Tensor:
    """Symmetric InfoNCE with the diagonal as positives."""
    n = sim.n
    if n < 2 or sim.values.shape != (n, n):
        raise ContractError(f"itc_loss needs an N x N matrix with N >= 2, got {sim.values.shape}")
    logits = sim.logits()
    labels = np.arange(n)
    i2t = cross_entropy(logits, labels)
    t2i = cross_entropy(logits.transpose(), labels)
    return T.scale(i2t + t2i, 0.5)


def sample_hard_negatives(
    sim: SimilarityMatrix, rng: np.random.Generator, exclude: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one negative text per image and one negative image per text.

    Row i's partner is drawn from the softmax of its off-diagonal logits
    (similarity / temperature); the positive is never drawn. ``exclude[i, j]``
    marks further pairs that count as matches (e.g. duplicate captions) and
    are skipped unless a row has nothing else.
    """
    n = sim.n
    if n < 2:
        raise ContractError("sample_hard_negatives needs N >= 2")
    logits = np.asarray(sim.values.data, dtype=np.float64) * math.exp(float(sim.log_inv_temp.data))
    ex = None if exclude is None else np.asarray(exclude, dtype=bool)
    return _draw_off_diagonal(logits, rng, ex), _draw_off_diagonal(logits.T, rng, None if ex is None else ex.T)


def _draw_off_diagonal(logits: np.ndarray, rng: np.random.Generator, exclude: np.ndarray | None = None) -> np.ndarray:
    n = logits.shape[0]
    x = logits.copy()
    np.fill_diagonal(x, -np.inf)
    if exclude is not None:
        blocked = exclude | np.eye(n, dtype=bool)
        usable = ~blocked.all(axis=1)
        x[usable[:, None] & blocked] = -np.inf
    p = np.exp(x - x.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(n)[:, None] * cdf[:, -1:]
    picks = np.minimum((cdf <= u).sum(axis=1), n - 1)
    # float round-off can land on a zero-width bin; step to the nearest live one
    for i in np.nonzero(p[np.arange(n), picks] == 0)[0]:
        live = np.nonzero(p[i] > 0)[0]
        picks[i] = live[np.argmin(np.abs(live - picks[i]))]
    return picks


def random_negatives(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform in-batch negatives (ITM without hard mining)."""
    off = rng.integers(1, n, size=(2, n))
    idx = np.arange(n)
    return (idx + off[0]) % n, (idx + off[1]) % n


# ---------------------------------------------------------------------------
# masked language modeling


@dataclass
class MlmBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    masked: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


def mask_tokens(ids, rng: np.random.Generator, rate: float = 0.15, vocab_size: int | None = None) -> MlmBatch:
    """Mask each non-special token with probability ``rate``.

    Masked positions become ``[mask]`` 80% of the time, a random non-special
    word 10%, and stay unchanged 10%.
    """
    from .vocab import VOCAB_SIZE

    vocab_size = VOCAB_SIZE if vocab_size is None else vocab_size
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ~np.isin(ids, list(SPECIAL_IDS))
    masked = eligible & (rng.random(ids.shape) < rate)
    roll = rng.random(ids.shape)
    random_words = rng.integers(len(SPECIAL_IDS), vocab_size, size=ids.shape)
    inputs = ids.copy()
    inputs[masked & (roll < 0.8)] = MASK_ID
    swap = masked & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = random_words[swap]
    return MlmBatch(inputs, ids.copy(), masked)


def mlm_loss(logits: Tensor, batch: MlmBatch) -> Tensor:
    """Mean cross-entropy over masked positions; 0 when nothing is masked
    (check ``batch.num_masked``)."""
    if logits.shape[:-1] != batch.labels.shape:
        raise ShapeError(f"mlm_loss: logits {logits.shape} vs labels {batch.labels.shape}")
    if batch.num_masked == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    return cross_entropy(logits, batch.labels, batch.masked)


class MlmHead(Module):
    def __init__(self, d: int, vocab_size: int, rng, dtype):
        self.norm = LayerNorm(d, dtype)
        self.out = Linear(d, vocab_size, rng, dtype)

    def __call__(self, text_feats: Tensor) -> Tensor:
        return self.out(self.norm(text_feats))


# ---------------------------------------------------------------------------
# image-text matching


class ItmHead(Module):
    """Binary match classifier over [pooled text ; pooled top image] features."""

    def __init__(self, d_in: int, rng, dtype):
        self.out = Linear(d_in, 2, rng, dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.out(pooled)


def itm_loss(pair_logits: Tensor, is_match) -> Tensor:
    """Two-way cross-entropy; class 1 means matched."""
    labels = np.asarray(is_match, dtype=np.int64).reshape(-1)
    logits = pair_logits if pair_logits.ndim == 2 else pair_logits.reshape(1, 2)
    return cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# boxes


Box = tuple[float, float, float, float]


def _check_box(b: Box) -> None:
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ContractError(f"degenerate box {b}")


def box_area(b: Box) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a: Box, b: Box) -> float:
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (box_area(a) + box_area(b) - inter)


def giou(a: Box, b: Box) -> float:
    """IoU minus the share of the enclosing box not covered by the union."""
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    enclosing = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (enclosing - union) / enclosing


def giou_loss(a: Box, b: Box) -> float:
    return 1.0 - giou(a, b)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def giou_loss_ltrb(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean ``1 - GIoU`` for boxes given as (l, t, r, b) distances from a shared
    location. Both boxes contain the location, so the intersection is never
    empty and the formula stays smooth."""
    tgt = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != tgt.shape or pred.shape[-1] != 4:
        raise ShapeError(f"giou_loss_ltrb: pred {pred.shape} vs target {tgt.shape}")
    pl, pt, pr, pb = (pred[:, i] for i in range(4))
    tl, tt, tr, tb = (tgt[:, i] for i in range(4))
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    inter = (T.minimum(pl, tl) + T.minimum(pr, tr)) * (T.minimum(pt, tt) + T.minimum(pb, tb))
    union = area_p + area_t - inter
    enclosing = (T.maximum(pl, tl) + T.maximum(pr, tr)) * (T.maximum(pt, tt) + T.maximum(pb, tb))
    g = inter / union - (enclosing - union) / enclosing
    return T.reduce_mean(1.0 - g)


def centerness(location, box: Box) -> float:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) for a location inside ``box``."""
    _check_box(box)
    x, y = location
    left, top, right, bottom = x - box[0], y - box[1], box[2] - x, box[3] - y
    if min(left, top, right, bottom) < 0:
        raise ContractError(f"location {location} lies outside box {box}")
    return math.sqrt((min(left, right) / max(left, right)) * (min(top, bottom) / max(top, bottom)))


def centerness_targets(ltrb: np.ndarray) -> np.ndarray:
    ltrb = np.asarray(ltrb, dtype=np.float64)
    lr, tb = ltrb[:, [0, 2]], ltrb[:, [1, 3]]
    return np.sqrt((lr.min(1) / lr.max(1)) * (tb.min(1) / tb.max(1)))


# ---------------------------------------------------------------------------
# target assignment


def level_locations(side: int, stride: int) -> np.ndarray:
    """Cell centers (x, y) of a ``side x side`` grid in row-major order."""
    c = (np.arange(side) + 0.5) * stride
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


@dataclass
class Assignment:
    """Per location (all FPN levels concatenated): target index or -1."""

    target: np.ndarray
    locations: np.ndarray
    strides: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.target >= 0

    def ltrb(self, boxes: np.ndarray) -> np.ndarray:
        """Distances from each positive location to its target's sides."""
        pos = self.positive
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[self.target[pos]]
        loc = self.locations[pos]
        return np.stack([loc[:, 0] - b[:, 0], loc[:, 1] - b[:, 1], b[:, 2] - loc[:, 0], b[:, 3] - loc[:, 1]], axis=1)


def assign_targets(
    levels: list[tuple[np.ndarray, int]],
    boxes: np.ndarray,
    radius: float = CENTER_RADIUS,
    size_ranges=LEVEL_SIZE_RANGES,
) -> Assignment:
    """Fixed-radius center sampling.

    A location is positive for a box if it lies strictly inside the box,
    within ``radius * stride`` of the box center along both axes, and the
    box's longer side falls in that level's ``(lo, hi]`` range. Ties go to the
    smaller box.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    all_loc, all_stride, all_target = [], [], []
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    side = np.maximum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    cx, cy = (boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2
    for (loc, stride), (lo, hi) in zip(levels, size_ranges):
        x, y = loc[:, 0:1], loc[:, 1:2]
        inside = (x > boxes[:, 0]) & (x < boxes[:, 2]) & (y > boxes[:, 1]) & (y < boxes[:, 3])
        near = (np.abs(x - cx) <= radius * stride) & (np.abs(y - cy) <= radius * stride)
        in_range = (side > lo) & (side <= hi)
        ok = inside & near & in_range[None, :]
        cost = np.where(ok, area[None, :], np.inf)
        target = np.where(ok.any(axis=1), cost.argmin(axis=1) if boxes.size else 0, -1)
        all_loc.append(loc)
        all_stride.append(np.full(loc.shape[0], stride))
        all_target.append(target)
    return Assignment(np.concatenate(all_target), np.concatenate(all_loc), np.concatenate(all_stride))


# ---------------------------------------------------------------------------
# fine-grained losses


def positive_token_map(assignment_target: np.ndarray, spans: list[tuple[int, int]], length: int) -> np.ndarray:
    """``[R, L]`` 0/1 map: region r is positive for every token of its target's span."""
    pos = np.zeros((assignment_target.shape[0], length))
    for r in np.nonzero(assignment_target >= 0)[0]:
        start, end = spans[assignment_target[r]]
        pos[r, start:end] = 1.0
    return pos


def grounding_loss(
    scores: Tensor,
    positives: np.ndarray,
    token_valid: np.ndarray | None = None,
    num_positive_regions: int | None = None,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> Tensor:
    """Sigmoid focal loss over region x token logits.

    ``positives`` marks (region, token) entries that should fire. The sum over
    valid entries is divided by the number of positive regions (at least 1).
    """
    pos = np.asarray(positives, dtype=scores.dtype)
    if pos.shape != scores.shape:
        raise ShapeError(f"grounding_loss: positives {pos.shape} vs scores {scores.shape}")
    valid = np.ones(scores.shape, dtype=scores.dtype)
    if token_valid is not None:
        valid = np.broadcast_to(np.expand_dims(np.asarray(token_valid, dtype=scores.dtype), -2), scores.shape)
    if num_positive_regions is None:
        num_positive_regions = int((pos.max(axis=-1) > 0).sum())
    p = T.sigmoid(scores)
    q = 1.0 - p
    pos_w = Tensor(alpha * pos * valid)
    neg_w = Tensor((1.0 - alpha) * (1.0 - pos) * valid)
    if gamma == 2.0:
        pos_mod, neg_mod = q * q, p * p
    else:
        pos_mod, neg_mod = T.power(q, gamma), T.power(p, gamma)
    per = pos_w * pos_mod * T.softplus(-scores) + neg_w * neg_mod * T.softplus(scores)
    return T.scale(T.reduce_sum(per), 1.0 / max(1, num_positive_regions))


def focal_reference(logit: float, positive: bool, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> float:
    """Scalar focal term, for hand checks."""
    p = 1.0 / (1.0 + math.exp(-logit))
    if positive:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p**gamma * math.log(1 - p)
