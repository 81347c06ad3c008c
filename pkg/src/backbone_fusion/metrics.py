"""Evaluation metrics: retrieval recall, grounding recall, AP and BLEU-4."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .objectives import iou


def recall_at_k(rankings, gold, k: int) -> float:
    """Fraction of queries whose gold item is among the first ``k`` ranked."""
    rankings = [list(r) for r in rankings]
    if not rankings:
        return 0.0
    hits = sum(1 for ranked, g in zip(rankings, gold) if g in ranked[:k])
    return hits / len(rankings)


def grounding_recall(preds, targets, iou_thresh: float = 0.5, ks=(1, 5, 10)) -> dict[str, float]:
    """Phrase-grounding Recall@k.

    ``preds[i]`` is the score-ranked box list for phrase i and ``targets[i]``
    its gold box. A phrase is a hit at k if any of its top-k boxes has
    IoU >= ``iou_thresh`` (inclusive) with the gold.
    """
    n = len(targets)
    out = {}
    for k in ks:
        hits = 0
        for boxes, gold in zip(preds, targets):
            if any(iou(tuple(b), tuple(gold)) >= iou_thresh - 1e-12 for b in list(boxes)[:k]):
                hits += 1
        out[f"R@{k}"] = hits / n if n else 0.0
    return out


def average_precision(preds, golds, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP for one class.

    ``preds``: iterable of (image_id, box, score); ``golds``: iterable of
    (image_id, box). Each gold matches at most one prediction, highest
    scores first.
    """
    golds = list(golds)
    if not golds:
        return 0.0
    by_image: dict = {}
    for img, box in golds:
        by_image.setdefault(img, []).append(tuple(box))
    used = {img: [False] * len(b) for img, b in by_image.items()}
    ordered = sorted(preds, key=lambda p: -p[2])
    tp = np.zeros(len(ordered))
    for i, (img, box, _) in enumerate(ordered):
        best, best_j = iou_thresh - 1e-12, -1
        for j, g in enumerate(by_image.get(img, [])):
            if used[img][j]:
                continue
            v = iou(tuple(box), g)
            if v >= best:
                best, best_j = v, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[i] = 1
    if not len(ordered):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(golds)
    precision = ctp / np.arange(1, len(ordered) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references) -> float:
    """Corpus BLEU-4: clipped 1-4-gram precisions, uniform weights, brevity
    penalty, no smoothing. ``references[i]`` is one token list or a list of them."""
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        refs = [list(refs)] if refs and not isinstance(refs[0], (list, tuple)) else [list(r) for r in refs]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(0, len(cand) - n + 1)
    if min(total) == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def accuracy(pred_labels, gold_labels) -> float:
    pred = np.asarray(pred_labels)
    gold = np.asarray(gold_labels)
    return float((pred == gold).mean()) if gold.size else 0.0
