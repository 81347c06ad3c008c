"""Downstream heads: classification, grounding/detection, retrieval with
re-ranking and ensembling, and autoregressive captioning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import (
    EncoderOutput,
    FusionEncoder,
    TextState,
    fused_coattention_layer,
    merged_attention_layer,
    plain_layer,
    pooled_pair_features,
)
from .nn import FPN, Conv2d, LayerNorm, Linear, Module
from .objectives import (
    MlmHead,
    assign_targets,
    binary_cross_entropy_logits,
    centerness_targets,
    cross_entropy,
    giou_loss_ltrb,
    grounding_loss,
    iou_matrix,
    level_locations,
    positive_token_map,
)
from .tensor import ContractError, ShapeError, Tensor
from .vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID

# ---------------------------------------------------------------------------
# classification


class ClassifierHead(Module):
    """Two-layer MLP over [pooled text ; pooled top image] fused features."""

    def __init__(self, d_in: int, n_labels: int, rng, dtype, hidden: int = 128):
        self.fc1 = Linear(d_in, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_labels, rng, dtype)

    def __call__(self, enc: EncoderOutput) -> Tensor:
        return classify(self, enc)


def classify(head: ClassifierHead, enc: EncoderOutput) -> Tensor:
    if enc.mode != "fused" or enc.text_feats is None:
        raise ContractError("classify needs fused-mode encoder output")
    return head.fc2(T.gelu(head.fc1(pooled_pair_features(enc))))


# ---------------------------------------------------------------------------
# grounding / detection


@dataclass
class RegionFeatures:
    """Per FPN location, all levels concatenated fine to coarse."""

    features: Tensor  # [B, R, d] region rows
    ltrb: Tensor  # [B, R, 4] distances to box sides, pixels
    ctr_logits: Tensor  # [B, R]
    locations: np.ndarray  # [R, 2] (x, y)
    strides: np.ndarray  # [R]

    def boxes(self, canvas: float) -> np.ndarray:
        """Decoded ``[B, R, 4]`` boxes clipped to the canvas."""
        d = self.ltrb.data
        loc = self.locations[None]
        out = np.stack([loc[..., 0] - d[..., 0], loc[..., 1] - d[..., 1], loc[..., 0] + d[..., 2], loc[..., 1] + d[..., 3]], -1)
        return np.clip(out, 0.0, canvas)


class GroundingHead(Module):
    """FPN plus a shared convolutional tower with box, centerness and region outputs."""

    def __init__(self, widths, text_width: int, patch_size: int, image_size: int, rng, dtype, d_fpn: int = 32, depth: int = 4):
        self.fpn = FPN(list(widths), d_fpn, rng, dtype)
        self.tower = [Conv2d(d_fpn, d_fpn, rng, dtype) for _ in range(depth)]
        self.tower_norms = [LayerNorm(d_fpn, dtype) for _ in range(depth)]
        self.box_out = Conv2d(d_fpn, 4, rng, dtype)
        self.ctr_out = Conv2d(d_fpn, 1, rng, dtype)
        self.region_out = Conv2d(d_fpn, text_width, rng, dtype)
        # small output kernels: grounding logits start near the prior, boxes near 2 strides
        self.region_out.weight.data *= 0.1
        self.box_out.weight.data *= 0.1
        # exp(bias) * stride = 2 strides: a plausible half-size at start
        self.level_bias = Tensor(np.full(len(widths), math.log(2.0), dtype=dtype), requires_grad=True)
        # sigmoid(bias) = 0.01 prior on region-token matches
        self.logit_bias = Tensor(np.asarray(-math.log(99.0), dtype=dtype), requires_grad=True)
        self.strides = [patch_size * 2**i for i in range(len(widths))]
        self.image_size = image_size

    @classmethod
    def for_encoder(cls, enc: FusionEncoder, rng, d_fpn: int = 32) -> "GroundingHead":
        c = enc.cfg
        return cls(c.image_widths, c.text_width, c.patch_size, c.image_size, rng, enc.dtype, d_fpn)

    def __call__(self, image_feats: list[Tensor]) -> RegionFeatures:
        levels = self.fpn(image_feats)
        feats, ltrbs, ctrs, locs, strides = [], [], [], [], []
        for i, x in enumerate(levels):
            b, h, w, _ = x.shape
            for conv, norm in zip(self.tower, self.tower_norms):
                x = T.relu(norm(conv(x)))
            raw = self.box_out(x) + self.level_bias[i]
            ltrbs.append(T.scale(T.exp(raw), float(self.strides[i])).reshape(b, h * w, 4))
            ctrs.append(self.ctr_out(x).reshape(b, h * w))
            feats.append(self.region_out(x).reshape(b, h * w, -1))
            locs.append(level_locations(h, self.strides[i]))
            strides.append(np.full(h * w, self.strides[i]))
        return RegionFeatures(
            T.concat(feats, axis=1),
            T.concat(ltrbs, axis=1),
            T.concat(ctrs, axis=1),
            np.concatenate(locs),
            np.concatenate(strides),
        )

    def level_grid(self, regions: RegionFeatures) -> list[tuple[np.ndarray, int]]:
        out, start = [], 0
        for s in self.strides:
            n = int((regions.strides == s).sum())
            out.append((regions.locations[start : start + n], s))
            start += n
        return out


def grounding_score(regions: RegionFeatures, enc: EncoderOutput) -> Tensor:
    """Region-token dot products, ``[B, R, L]`` (or ``[R, L]`` unbatched)."""
    r, t = regions.features, enc.text_feats
    if r.shape[-1] != t.shape[-1]:
        raise ShapeError(f"grounding_score: region width {r.shape[-1]} vs token width {t.shape[-1]}")
    return r @ t.transpose()


def grounding_losses(head: GroundingHead, regions: RegionFeatures, enc: EncoderOutput, boxes, spans) -> dict[str, Tensor]:
    """Word-region alignment, centerness and GIoU losses for a batch.

    ``boxes[b]`` / ``spans[b]`` list image b's targets.
    """
    logits = grounding_score(regions, enc) + head.logit_bias
    b, r, length = logits.shape
    grid = head.level_grid(regions)
    positives = np.zeros((b, r, length))
    pos_index, ltrb_targets = [], []
    for i in range(b):
        a = assign_targets(grid, np.asarray(boxes[i]))
        positives[i] = positive_token_map(a.target, spans[i], length)
        pos = np.nonzero(a.positive)[0]
        pos_index.append(i * r + pos)
        ltrb_targets.append(a.ltrb(np.asarray(boxes[i])))
    pos_index = np.concatenate(pos_index)
    losses = {"grounding": grounding_loss(logits, positives, enc.text_valid, num_positive_regions=len(pos_index))}
    if len(pos_index):
        target = np.concatenate(ltrb_targets)
        ltrb = T.take(regions.ltrb.reshape(b * r, 4), pos_index, axis=0)
        ctr = T.take(regions.ctr_logits.reshape(b * r), pos_index, axis=0)
        losses["centerness"] = binary_cross_entropy_logits(ctr, centerness_targets(target))
        losses["giou"] = giou_loss_ltrb(ltrb, target)
    return losses


@dataclass
class Detection:
    span: tuple[int, int]
    box: tuple[float, float, float, float]
    score: float


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices by descending score."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    for i in order:
        if keep and np.any(iou_matrix(boxes[i], boxes[keep])[0] >= iou_thresh):
            continue
        keep.append(int(i))
    return keep


def detect(
    head: GroundingHead,
    regions: RegionFeatures,
    enc: EncoderOutput,
    spans: list[tuple[int, int]],
    score_thresh: float = 0.05,
    nms_iou: float = 0.6,
    index: int = 0,
    max_per_span: int = 10,
) -> list[Detection]:
    """Score every location against each phrase span, then NMS per span.

    Phrase score = sigmoid(mean grounding logit over the span) x sigmoid(centerness).
    """
    if not spans:
        raise ContractError("detect needs at least one phrase span (empty caption)")
    logits = (grounding_score(regions, enc) + head.logit_bias).data[index]
    ctr = 1.0 / (1.0 + np.exp(-regions.ctr_logits.data[index].astype(np.float64)))
    boxes = regions.boxes(head.image_size)[index]
    out: list[Detection] = []
    for start, end in spans:
        if not 0 <= start < end <= logits.shape[1]:
            raise ContractError(f"span {(start, end)} outside caption of length {logits.shape[1]}")
        s = 1.0 / (1.0 + np.exp(-logits[:, start:end].astype(np.float64).mean(axis=1))) * ctr
        cand = np.nonzero(s > score_thresh)[0]
        if not len(cand):
            continue
        keep = nms(boxes[cand], s[cand], nms_iou)[:max_per_span]
        out.extend(Detection((start, end), tuple(float(v) for v in boxes[cand[k]]), float(s[cand[k]])) for k in keep)
    return out


def category_prompt(names: list[str]) -> tuple[str, list[tuple[int, int]]]:
    """Detection as grounding: "red square . blue circle ." plus token spans (bos at 0)."""
    words: list[str] = []
    spans = []
    for name in names:
        start = len(words) + 1
        words.extend(name.split())
        spans.append((start, len(words) + 1))
        words.append(".")
    return " ".join(words), spans


def write_detections(path, image_id, detections: list[Detection], mode: str = "a") -> None:
    """Append one JSON line per detection: image id, box, phrase span, score."""
    with open(path, mode, encoding="utf-8") as fh:
        for d in detections:
            rec = {"image_id": image_id, "box": list(d.box), "span": list(d.span), "score": d.score}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# retrieval


def rank_desc(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by lower index (per row)."""
    scores = np.asarray(scores)
    idx = np.broadcast_to(np.arange(scores.shape[-1]), scores.shape)
    return np.lexsort((idx, -scores), axis=-1)


@dataclass
class RetrievalResult:
    i2t: np.ndarray  # [n, k] text indices per image
    i2t_scores: np.ndarray
    t2i: np.ndarray  # [m, k] image indices per text
    t2i_scores: np.ndarray
    clamped: bool


def retrieve_dual(img_embs, txt_embs, k: int) -> RetrievalResult:
    """Exact cosine top-k in both directions (rows must be L2-normalized)."""
    a = np.asarray(img_embs.data if isinstance(img_embs, Tensor) else img_embs, dtype=np.float64)
    b = np.asarray(txt_embs.data if isinstance(txt_embs, Tensor) else txt_embs, dtype=np.float64)
    scores = a @ b.T
    clamped = k > min(scores.shape)
    ki = min(k, scores.shape[1])
    kt = min(k, scores.shape[0])
    i2t = rank_desc(scores)[:, :ki]
    t2i = rank_desc(scores.T)[:, :kt]
    return RetrievalResult(
        i2t,
        np.take_along_axis(scores, i2t, 1),
        t2i,
        np.take_along_axis(scores.T, t2i, 1),
        clamped,
    )


def ensemble_rank(dual_scores, fusion_scores, counter=None) -> np.ndarray:
    """Rank every candidate by dual + fusion score (rows are queries)."""
    dual_scores = np.asarray(dual_scores, dtype=np.float64)
    fusion_scores = np.asarray(fusion_scores, dtype=np.float64)
    if dual_scores.shape != fusion_scores.shape:
        raise ShapeError(f"ensemble_rank: {dual_scores.shape} vs {fusion_scores.shape}")
    return rank_desc(dual_scores + fusion_scores)


def rerank_topk(dual_scores, fusion_scorer: Callable[[int, np.ndarray], np.ndarray], k: int) -> np.ndarray:
    """Re-score each query's dual top-k with ``dual + fusion``.

    The re-scored candidates keep the first k ranks, ordered by the sum; the
    rest follow in dual order. ``fusion_scorer(query, candidates)`` returns
    one fused score per candidate.
    """
    dual_scores = np.asarray(dual_scores, dtype=np.float64)
    ranking = rank_desc(dual_scores)
    if k <= 0:
        return ranking
    out = ranking.copy()
    for q in range(dual_scores.shape[0]):
        top = ranking[q, :k]
        fused = np.asarray(fusion_scorer(q, top), dtype=np.float64)
        summed = dual_scores[q, top] + fused
        order = np.lexsort((top, -summed))
        out[q, : len(top)] = top[order]
    return out


class FusionScorer:
    """ITM match log-odds of the fused encoder on (image, text) pairs.

    Lower (never fused) layers are computed once per image and per text;
    each scored pair counts as one fused backbone pass.
    """

    def __init__(self, encoder: FusionEncoder, itm_head, pixels: np.ndarray, token_ids: np.ndarray, batch: int = 256):
        self.encoder = encoder
        self.itm_head = itm_head
        self.batch = batch
        self.image_top = encoder.image_lower(pixels).top
        self.text = encoder.text_lower(token_ids)

    def score_pairs(self, images: np.ndarray, texts: np.ndarray) -> np.ndarray:
        images, texts = np.asarray(images), np.asarray(texts)
        out = np.empty(len(images))
        for s in range(0, len(images), self.batch):
            ii, tt = images[s : s + self.batch], texts[s : s + self.batch]
            img = T.take(self.image_top, ii, axis=0)
            state = TextState(T.take(self.text.hidden, tt, axis=0), self.text.valid[tt])
            i_out, t_out = self.encoder.top_fused(img, state)
            self.encoder.counter.fused += len(ii)
            enc = EncoderOutput(image_feats=[i_out], text_feats=t_out, text_valid=state.valid, mode="fused")
            logits = self.itm_head(pooled_pair_features(enc)).data
            out[s : s + len(ii)] = logits[:, 1] - logits[:, 0]
        return out

    def image_to_text(self, q: int, candidates: np.ndarray) -> np.ndarray:
        return self.score_pairs(np.full(len(candidates), q), candidates)

    def text_to_image(self, q: int, candidates: np.ndarray) -> np.ndarray:
        return self.score_pairs(candidates, np.full(len(candidates), q))

    def full_matrix(self) -> np.ndarray:
        n, m = self.image_top.shape[0], self.text.hidden.shape[0]
        ii, tt = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
        return self.score_pairs(ii.reshape(-1), tt.reshape(-1)).reshape(n, m)


# ---------------------------------------------------------------------------
# captioning


@dataclass(frozen=True)
class CaptionerConfig:
    variant: str = "seq2seq"
    beam: int = 5
    max_len: int = 22

    def __post_init__(self):
        if self.variant not in ("seq2seq", "ladder"):
            raise ValueError(f"caption variant must be seq2seq or ladder, got {self.variant!r}")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")


@dataclass
class ImageMemory:
    """What the decoder's cross-attention reads: the final image layer
    (seq2seq) or the image state entering each fused block (ladder)."""

    per_layer: list[Tensor]


def image_memory(encoder: FusionEncoder, cfg: CaptionerConfig, pixels) -> ImageMemory:
    state = encoder.image_lower(pixels)
    blocks = [b for b in encoder.image.stages[-1].blocks if b.fused]
    if cfg.variant == "seq2seq":
        final = encoder.image_top_dual(state)
        return ImageMemory([final] * len(blocks))
    x, per_layer = state.top, []
    for blk in blocks:
        per_layer.append(x)
        x = plain_layer(blk, x)
    return ImageMemory(per_layer)


def decoder_logits(encoder: FusionEncoder, lm_head: MlmHead, memory: ImageMemory, token_ids) -> Tensor:
    """Causal text pass where fused blocks read only the image (no image-side update)."""
    state = encoder.text_lower(token_ids, causal=True)
    x = state.hidden
    mask = state.self_mask
    img_blocks = [b for b in encoder.image.stages[-1].blocks if b.fused]
    txt_blocks = [b for b in encoder.text.layers if b.fused]
    for ib, tb, mem in zip(img_blocks, txt_blocks, memory.per_layer):
        if mem.shape[0] != x.shape[0]:
            mem = T.take(mem, np.zeros(x.shape[0], dtype=np.int64), axis=0) if mem.shape[0] == 1 else mem
        if encoder.cfg.strategy == "merged_attention":
            x, _ = merged_attention_layer(tb, ib, x, mem, state.valid, None, x_causal=True)
        else:
            x = fused_coattention_layer(tb, x, mem, mask, None)
    return lm_head(encoder.text.final_norm(x))


def caption_train_step(encoder: FusionEncoder, lm_head: MlmHead, cfg: CaptionerConfig, pixels, token_ids) -> Tensor:
    """Teacher-forced next-token cross-entropy over real (non-pad) targets."""
    ids = np.asarray(token_ids)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    logits = decoder_logits(encoder, lm_head, image_memory(encoder, cfg, pixels), inputs)
    return cross_entropy(logits, targets, targets != PAD_ID)


def caption_decode(encoder: FusionEncoder, lm_head: MlmHead, cfg: CaptionerConfig, pixels) -> list[int]:
    """Beam search for one image; returns generated ids (eos excluded).

    Hypotheses are expanded by cumulative log-probability; finished ones are
    ranked by log-probability divided by their token count (eos included).
    ``beam=1`` is greedy argmax decoding.
    """
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = px[None]
    memory = image_memory(encoder, cfg, px)
    alive: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    finished: list[tuple[list[int], float]] = []
    max_len = min(cfg.max_len, encoder.cfg.max_text_len - 1)
    for _ in range(max_len):
        ids = np.array([seq for seq, _ in alive], dtype=np.int64)
        logits = decoder_logits(encoder, lm_head, memory, ids).data[:, -1, :].astype(np.float64)
        logp = logits - logits.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        logp[:, [PAD_ID, BOS_ID, MASK_ID]] = -np.inf
        cands = []
        for b, (seq, score) in enumerate(alive):
            top = np.lexsort((np.arange(logp.shape[1]), -logp[b]))[: cfg.beam]
            cands.extend((score + logp[b, t], b, int(t)) for t in top)
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        alive = []
        for score, b, tok in cands[: cfg.beam]:
            seq = ids[b].tolist() + [tok]
            if tok == EOS_ID:
                finished.append((seq, score))
            else:
                alive.append((seq, score))
        if not alive:
            break
    pool = finished if finished else alive
    best = max(pool, key=lambda h: (h[1] / (len(h[0]) - 1), -pool.index(h)))
    return [t for t in best[0][1:] if t != EOS_ID]
