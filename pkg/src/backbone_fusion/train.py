"""Training and evaluation runs: coarse and fine pre-training, task
fine-tuning, evaluation. Every run writes into one directory holding a
checkpoint, newline-delimited metric records and an advisory lock."""
from __future__ import annotations

import fcntl
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .adapters import (
    CaptionerConfig,
    ClassifierHead,
    FusionScorer,
    GroundingHead,
    caption_decode,
    caption_train_step,
    classify,
    detect,
    grounding_losses,
    rank_desc,
    rerank_topk,
    retrieve_dual,
)
from .checkpoint import Checkpoint, CheckpointError
from .config import TASKS, Config, ConfigError
from .data import ANSWERS, Record, generate_dataset, pad_ids, read_dataset, stack_pixels
from .metrics import accuracy, average_precision, bleu4, grounding_recall, recall_at_k
from .model import EncoderOutput, FusionConfig, FusionEncoder, TextState, pooled_pair_features
from .nn import Module
from .objectives import (
    ItmHead,
    cross_entropy,
    MlmHead,
    itc_loss,
    itm_loss,
    mask_tokens,
    mlm_loss,
    random_negatives,
    sample_hard_negatives,
    similarity,
)
from .optim import AdamW, ParamGroup, linear_warmup_decay
from .rng import make_rng
from .tensor import Tensor
from .vocab import EOS_ID, VOCAB_SIZE, DataError

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.ndjson"
LOCK_NAME = ".lock"
HEAD_PREFIXES = ("itm_head.", "mlm_head.", "od_head.", "cls_head.")
MLM_PROBE_SEED = 12345


class RunLockedError(RuntimeError):
    """Another process holds the run directory."""


# ---------------------------------------------------------------------------
# model bundle


class Model(Module):
    """Encoder plus task heads. Parameter names carry the head prefix."""

    def __init__(self, arch: FusionConfig, seed: int, heads: tuple[str, ...] = (), dtype=np.float32):
        self.encoder = FusionEncoder(arch, make_rng(seed, "init", "encoder"), dtype)
        pooled = arch.text_width + arch.image_widths[-1]
        self.mlm_head = MlmHead(arch.text_width, arch.vocab_size, make_rng(seed, "init", "mlm_head"), dtype)
        self.itm_head = ItmHead(pooled, make_rng(seed, "init", "itm_head"), dtype)
        if "od" in heads:
            self.od_head = GroundingHead.for_encoder(self.encoder, make_rng(seed, "init", "od_head"))
        if "cls" in heads:
            self.cls_head = ClassifierHead(pooled, len(ANSWERS), make_rng(seed, "init", "cls_head"), dtype)


def param_groups(model: Model, cfg: Config) -> list[ParamGroup]:
    """Two learning-rate groups.

    Coarse stage and fine-tuning: backbones vs fusion modules and heads. The
    contrastive temperature rides with the fast group; at the backbone rate
    it cannot travel far enough in a short run to sharpen the logits.

    Fine stage: the language backbone vs everything else. Without the slow
    text rate the grounding loss collapses every token onto one direction.
    """
    slow, fast = ([], []), ([], [])
    for name, p in model.named_parameters():
        fusion = ".fuse_" in name or name.startswith(HEAD_PREFIXES) or name == "encoder.logit_scale"
        if cfg.stage == "fine":
            is_slow = name.startswith("encoder.text.") and ".fuse_" not in name
        else:
            is_slow = not fusion
        dst = slow if is_slow else fast
        dst[0].append(name)
        dst[1].append(p)
    lr_slow, lr_fast = (cfg.lr_fine_text, cfg.lr_fine) if cfg.stage == "fine" else (cfg.lr_backbone, cfg.lr_fusion)
    return [
        ParamGroup(slow[0], slow[1], lr_slow, cfg.weight_decay),
        ParamGroup(fast[0], fast[1], lr_fast, cfg.weight_decay),
    ]


# ---------------------------------------------------------------------------
# run-directory plumbing


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    fh = open(out / LOCK_NAME, "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RunLockedError(f"run directory {out} is in use by another process") from None
        yield
    finally:
        fh.close()


class MetricsLog:
    """Append-only ``{"name", "step", "value"}`` lines."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, step: int, name: str, value: float) -> None:
        self._fh.write(json.dumps({"name": name, "step": int(step), "value": float(value)}, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RunResult:
    out: Path
    checkpoint: Path
    metrics: Path
    summary: dict

    @property
    def checkpoint_hash(self) -> str:
        return ckpt_io.file_hash(self.checkpoint)


def load_records(path: str | None, seed: int, count: int) -> list[Record]:
    if path:
        return read_dataset(path)
    return generate_dataset(seed, count)


def _init_from(model: Model, init, want_stage: str | tuple[str, ...] | None) -> Checkpoint | None:
    if init is None:
        return None
    ck = init if isinstance(init, Checkpoint) else ckpt_io.load(init)
    want = (want_stage,) if isinstance(want_stage, str) else want_stage
    if want and ck.stage not in want:
        raise CheckpointError(
            f"checkpoint stage is {ck.stage!r} but this run needs {' or '.join(want)}; "
            f"run {'pretrain-fine' if 'fine' in want else 'pretrain-coarse'} first"
        )
    arch = ck.meta.get("arch")
    if arch is not None and FusionConfig.from_dict(arch) != model.encoder.cfg:
        raise CheckpointError("checkpoint architecture differs from the configured one")
    ckpt_io.load_into(model, ck.params, fresh_ok=HEAD_PREFIXES, ignore_ok=HEAD_PREFIXES)
    return ck


def _save(model: Model, opt: AdamW | None, path: Path, cfg: Config, stage: str, step: int, task: str | None, init_stage=None) -> str:
    meta = {
        "arch": model.encoder.cfg.to_dict(),
        "config": cfg.to_dict(),
        "stage": stage,
        "task": task,
        "step": step,
        "init_stage": init_stage,
        "param_names": [n for n, _ in model.named_parameters()],
    }
    return ckpt_io.save(path, Checkpoint(ckpt_io.state_of(model), meta, opt.state() if opt else {}))


class Trainer:
    """Shared optimisation loop: ``loss_fn(step, batch_idx) -> dict of losses``."""

    def __init__(self, model: Model, cfg: Config, n_items: int, log: MetricsLog):
        self.model = model
        self.cfg = cfg
        self.opt = AdamW(param_groups(model, cfg))
        self.n_items = n_items
        self.order_rng = make_rng(cfg.seed, "order")
        self.log = log
        self._perm: list[int] = []

    def next_batch(self) -> np.ndarray:
        b = min(self.cfg.batch_size, self.n_items)
        out = []
        while len(out) < b:
            if not self._perm:
                self._perm = list(self.order_rng.permutation(self.n_items))
            out.append(self._perm.pop())
        return np.asarray(out)

    def run(self, loss_fn, steps: int, hook=None) -> dict[str, float]:
        last: dict[str, float] = {}
        for step in range(steps):
            idx = self.next_batch()
            with T.Tape() as tape:
                losses = loss_fn(step, idx)
                total = None
                for v in losses.values():
                    total = v if total is None else total + v
            grads = T.backward(total, tape)
            self.opt.step({id(p): g for p, g in grads.items()}, linear_warmup_decay(step, steps, self.cfg.warmup_steps))
            last = {k: float(v.data) for k, v in losses.items()}
            last["loss"] = float(total.data)
            for name in sorted(last):
                self.log.write(step, name, last[name])
            if hook is not None:
                hook(step)
        return last


# ---------------------------------------------------------------------------
# coarse pre-training


def _duplicate_captions(ids: np.ndarray) -> np.ndarray:
    return (ids[:, None, :] == ids[None, :, :]).all(axis=-1)


def coarse_losses(model: Model, cfg: Config, pixels, ids: np.ndarray, rng: np.random.Generator) -> dict[str, Tensor]:
    """ITC / MLM / ITM losses for one batch; image lower layers are shared."""
    enc = model.encoder
    istate = enc.image_lower(pixels)
    clean = enc.text_lower(ids)
    losses: dict[str, Tensor] = {}
    n = ids.shape[0]
    sim = None
    if cfg.itc or cfg.itm_hard:
        img_emb = enc.embed_image(enc.image_top_dual(istate))
        txt_emb = enc.embed_text(enc.text_top_dual(clean), clean.valid)
        sim = similarity(img_emb, txt_emb, enc.logit_scale)
        if cfg.itc:
            losses["itc"] = itc_loss(sim)
    if cfg.mlm:
        batch = mask_tokens(ids, rng, 0.15, cfg.arch.vocab_size)
        if batch.num_masked:
            _, t = enc.top_fused(istate.top, enc.text_lower(batch.input_ids))
            losses["mlm"] = mlm_loss(model.mlm_head(t), batch)
    if cfg.itm or cfg.itm_hard:
        if cfg.itm_hard:
            neg_txt, neg_img = sample_hard_negatives(sim, rng, _duplicate_captions(ids))
        else:
            neg_txt, neg_img = random_negatives(n, rng)
        # one positive and one negative pairing per instance; even instances
        # swap in a negative text, odd ones a negative image
        ar = np.arange(n)
        even = ar % 2 == 0
        img_idx = np.concatenate([ar, np.where(even, ar, neg_img)])
        txt_idx = np.concatenate([ar, np.where(even, neg_txt, ar)])
        state = TextState(T.take(clean.hidden, txt_idx, axis=0), clean.valid[txt_idx])
        i_out, t_out = enc.top_fused(T.take(istate.top, img_idx, axis=0), state)
        out = EncoderOutput(image_feats=[i_out], text_feats=t_out, text_valid=state.valid, mode="fused")
        labels = np.concatenate([np.ones(n), np.zeros(n)])
        losses["itm"] = itm_loss(model.itm_head(pooled_pair_features(out)), labels)
    return losses


def mlm_probe(model: Model, pixels, ids: np.ndarray, batch: int = 64) -> float:
    """MLM loss on a fixed masking of the given captions (no gradients)."""
    enc = model.encoder
    mb = mask_tokens(ids, make_rng(MLM_PROBE_SEED, "mlm-probe"), 0.15, enc.cfg.vocab_size)
    num = den = 0.0
    for s in range(0, len(ids), batch):
        sl = slice(s, s + batch)
        k = int(mb.masked[sl].sum())
        if not k:
            continue
        istate = enc.image_lower(pixels[sl])
        _, t = enc.top_fused(istate.top, enc.text_lower(mb.input_ids[sl]))
        sub = type(mb)(mb.input_ids[sl], mb.labels[sl], mb.masked[sl])
        num += float(mlm_loss(model.mlm_head(t), sub).data) * k
        den += k
    return num / max(den, 1.0)


def unique_caption_subset(records: list[Record], size: int) -> list[int]:
    seen, out = set(), []
    for i, r in enumerate(records):
        if r.caption not in seen:
            seen.add(r.caption)
            out.append(i)
        if len(out) == size:
            break
    return out


def itc_probe(model: Model, records: list[Record], size: int = 16) -> dict[str, float]:
    """Dual-encoder R@1 in both directions on ``size`` pairs with distinct captions."""
    idx = unique_caption_subset(records, size)
    sub = [records[i] for i in idx]
    enc = model.encoder
    out = enc.encode(stack_pixels(sub), pad_ids([r.token_ids for r in sub]), mode="dual")
    res = retrieve_dual(out.image_emb, out.text_emb, 1)
    gold = np.arange(len(sub))
    return {
        "itc_probe_i2t_r1": recall_at_k(res.i2t, gold, 1),
        "itc_probe_t2i_r1": recall_at_k(res.t2i, gold, 1),
    }


def run_pretrain_coarse(cfg: Config, out, records: list[Record] | None = None, init=None) -> RunResult:
    if cfg.stage != "coarse":
        raise ConfigError(f"pretrain-coarse needs stage=coarse, config says {cfg.stage!r}")
    out = Path(out)
    records = records if records is not None else load_records(cfg.train_data, cfg.data_seed, cfg.n_train)
    pixels = stack_pixels(records)
    ids = pad_ids([r.token_ids for r in records], cfg.arch.max_text_len)
    with run_lock(out):
        model = Model(cfg.arch, cfg.seed)
        _init_from(model, init, "coarse")
        log = MetricsLog(out / METRICS_NAME)
        summary: dict = {}
        try:
            summary["mlm_probe_initial"] = mlm_probe(model, pixels, ids)
            log.write(0, "mlm_probe", summary["mlm_probe_initial"])
            trainer = Trainer(model, cfg, len(records), log)
            rng = make_rng(cfg.seed, "coarse-objectives")
            last = trainer.run(lambda step, b: coarse_losses(model, cfg, pixels[b], ids[b], rng), cfg.steps)
            summary.update({f"final_{k}": v for k, v in last.items()})
            summary["mlm_probe_final"] = mlm_probe(model, pixels, ids)
            log.write(cfg.steps, "mlm_probe", summary["mlm_probe_final"])
            for k, v in itc_probe(model, records).items():
                summary[k] = v
                log.write(cfg.steps, k, v)
            summary["gates"] = model.encoder.gates()
        finally:
            log.close()
        _save(model, trainer.opt, out / CHECKPOINT_NAME, cfg, "coarse", cfg.steps, None)
    return RunResult(out, out / CHECKPOINT_NAME, out / METRICS_NAME, summary)


# ---------------------------------------------------------------------------
# fine-grained pre-training


def _check_grounded(records: list[Record]) -> None:
    for r in records:
        if not r.boxes or len(r.boxes) != len(r.spans):
            raise DataError(f"record {r.index} has no grounding boxes; the fine stage needs image-text-box data")


def fine_losses(model: Model, pixels, ids, records: list[Record]) -> dict[str, Tensor]:
    out = model.encoder.encode(pixels, ids, mode="fused")
    regions = model.od_head(out.image_feats)
    return grounding_losses(model.od_head, regions, out, [r.boxes for r in records], [r.spans for r in records])


def grounding_eval(model: Model, records: list[Record], batch: int = 32) -> dict[str, float]:
    """Phrase-grounding Recall@1/5/10 and phrase-level AP at IoU 0.5."""
    enc, head = model.encoder, model.od_head
    preds, golds, ap_preds, ap_golds = [], [], [], []
    for s in range(0, len(records), batch):
        sub = records[s : s + batch]
        out = enc.encode(stack_pixels(sub), pad_ids([r.token_ids for r in sub]), mode="fused")
        regions = head(out.image_feats)
        for j, r in enumerate(sub):
            dets = detect(head, regions, out, r.spans, score_thresh=-1.0, index=j)
            for k, (span, box) in enumerate(zip(r.spans, r.boxes)):
                mine = [d for d in dets if d.span == tuple(span)]
                preds.append([d.box for d in mine])
                golds.append(box)
                ap_golds.append(((r.index, k), box))
                ap_preds.extend(((r.index, k), d.box, d.score) for d in mine)
    rec = grounding_recall(preds, golds)
    return {"grounding_R@1": rec["R@1"], "grounding_R@5": rec["R@5"], "grounding_R@10": rec["R@10"], "AP": average_precision(ap_preds, ap_golds)}


def run_pretrain_fine(cfg: Config, out, init=None, records: list[Record] | None = None) -> RunResult:
    if cfg.stage != "fine":
        raise ConfigError(f"pretrain-fine needs stage=fine, config says {cfg.stage!r}")
    out = Path(out)
    records = records if records is not None else load_records(cfg.train_data, cfg.data_seed, cfg.n_train)
    _check_grounded(records)
    pixels = stack_pixels(records)
    ids = pad_ids([r.token_ids for r in records], cfg.arch.max_text_len)
    with run_lock(out):
        model = Model(cfg.arch, cfg.seed, heads=("od",))
        ck = _init_from(model, init, "coarse")
        fresh = sorted(n for n, _ in model.named_parameters() if ck is not None and n not in ck.params)
        log = MetricsLog(out / METRICS_NAME)
        summary: dict = {"init": "coarse" if ck is not None else "none", "fresh_params": fresh}
        try:
            trainer = Trainer(model, cfg, len(records), log)

            def hook(step):
                if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                    for k, v in grounding_eval(model, records).items():
                        log.write(step + 1, k, v)

            last = trainer.run(lambda step, b: fine_losses(model, pixels[b], ids[b], [records[i] for i in b]), cfg.steps, hook)
            summary.update({f"final_{k}": v for k, v in last.items()})
            summary.update(grounding_eval(model, records))
            for k in ("grounding_R@1", "AP"):
                log.write(cfg.steps, k, summary[k])
            summary["gates"] = model.encoder.gates()
        finally:
            log.close()
        _save(model, trainer.opt, out / CHECKPOINT_NAME, cfg, "fine", cfg.steps, None, summary["init"])
    return RunResult(out, out / CHECKPOINT_NAME, out / METRICS_NAME, summary)


# ---------------------------------------------------------------------------
# task fine-tuning


_TASK_STAGE = {"classify": "coarse", "retrieval": "coarse", "caption": "coarse", "grounding": "fine"}
_TASK_HEADS = {"classify": ("cls",), "retrieval": (), "caption": (), "grounding": ("od",)}


def _caption_cfg(cfg: Config) -> CaptionerConfig:
    return CaptionerConfig(variant=cfg.caption_variant, beam=cfg.beam, max_len=cfg.arch.max_text_len - 1)


def task_losses(task: str, model: Model, cfg: Config, records: list[Record], rng) -> dict[str, Tensor]:
    px = stack_pixels(records)
    if task == "classify":
        q = pad_ids([r.question_ids for r in records])
        out = model.encoder.encode(px, q, mode="fused")
        return {"cls": cross_entropy(classify(model.cls_head, out), [r.label for r in records])}
    if task == "caption":
        ids = pad_ids([r.token_ids for r in records])
        return {"caption": caption_train_step(model.encoder, model.mlm_head, _caption_cfg(cfg), px, ids)}
    if task == "retrieval":
        ids = pad_ids([r.token_ids for r in records])
        rcfg = cfg.with_overrides(mlm=False, itm=False, itm_hard=True, itc=True)
        return coarse_losses(model, rcfg, px, ids, rng)
    if task == "grounding":
        return fine_losses(model, px, pad_ids([r.token_ids for r in records]), records)
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


def run_finetune(task: str, cfg: Config, out, init=None, records: list[Record] | None = None) -> RunResult:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    out = Path(out)
    records = records if records is not None else load_records(cfg.train_data, cfg.data_seed, cfg.n_train)
    if task == "grounding":
        _check_grounded(records)
    with run_lock(out):
        model = Model(cfg.arch, cfg.seed, heads=_TASK_HEADS[task])
        ck = _init_from(model, init, _TASK_STAGE[task] if task == "grounding" else ("coarse", "fine"))
        stage = ck.stage if ck is not None else _TASK_STAGE[task]
        log = MetricsLog(out / METRICS_NAME)
        summary: dict = {"task": task, "init": stage if ck is not None else "none"}
        try:
            trainer = Trainer(model, cfg, len(records), log)
            rng = make_rng(cfg.seed, "finetune", task)
            last = trainer.run(lambda step, b: task_losses(task, model, cfg, [records[i] for i in b], rng), cfg.steps)
            summary.update({f"final_{k}": v for k, v in last.items()})
        finally:
            log.close()
        _save(model, trainer.opt, out / CHECKPOINT_NAME, cfg, stage, cfg.steps, task)
    return RunResult(out, out / CHECKPOINT_NAME, out / METRICS_NAME, summary)


# ---------------------------------------------------------------------------
# evaluation


def load_model(path_or_ckpt, heads: tuple[str, ...] = ()) -> tuple[Model, Checkpoint]:
    ck = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else ckpt_io.load(path_or_ckpt)
    arch = FusionConfig.from_dict(ck.meta["arch"])
    have = {n.split(".", 1)[0] for n in ck.params}
    heads = tuple(h for h in ("od", "cls") if h in heads or f"{h}_head" in have)
    model = Model(arch, 0, heads=heads)
    ckpt_io.load_into(model, ck.params, fresh_ok=HEAD_PREFIXES, ignore_ok=())
    return model, ck


def retrieval_eval(model: Model, records: list[Record], k: int) -> dict[str, float]:
    enc = model.encoder
    px = stack_pixels(records)
    ids = pad_ids([r.token_ids for r in records])
    n = m = len(records)
    gold = np.arange(n)
    enc.counter.reset()
    out = enc.encode(px, ids, mode="dual")
    dual_passes = enc.counter.dual
    scores = out.image_emb.data.astype(np.float64) @ out.text_emb.data.astype(np.float64).T
    rep: dict[str, float] = {"passes_dual": dual_passes}
    i2t, t2i = rank_desc(scores), rank_desc(scores.T)
    for kk in (1, 5, 10):
        rep[f"i2t_R@{kk}"] = recall_at_k(i2t, gold, kk)
        rep[f"t2i_R@{kk}"] = recall_at_k(t2i, gold, kk)
    if k > 0:
        scorer = FusionScorer(enc, model.itm_head, px, ids)
        enc.counter.reset()
        rr = rerank_topk(scores, scorer.image_to_text, k)
        rep["passes_rerank_i2t"] = dual_passes + enc.counter.fused
        enc.counter.reset()
        rr_t = rerank_topk(scores.T, scorer.text_to_image, k)
        rep["passes_rerank_t2i"] = dual_passes + enc.counter.fused
        for kk in (1, 5, 10):
            rep[f"rerank_i2t_R@{kk}"] = recall_at_k(rr, gold, kk)
            rep[f"rerank_t2i_R@{kk}"] = recall_at_k(rr_t, gold, kk)
    rep["n_images"], rep["n_texts"], rep["rerank_k"] = n, m, k
    return rep


def caption_eval(model: Model, cfg: CaptionerConfig, records: list[Record]) -> dict[str, float]:
    cands, refs = [], []
    for r in records:
        cands.append(caption_decode(model.encoder, model.mlm_head, cfg, r.pixels))
        refs.append([t for t in r.token_ids[1:] if t != EOS_ID])
    exact = float(np.mean([c == ref for c, ref in zip(cands, refs)]))
    return {"BLEU@4": bleu4(cands, refs), "caption_exact": exact}


def classify_eval(model: Model, records: list[Record], batch: int = 64) -> dict[str, float]:
    preds = []
    for s in range(0, len(records), batch):
        sub = records[s : s + batch]
        out = model.encoder.encode(stack_pixels(sub), pad_ids([r.question_ids for r in sub]), mode="fused")
        preds.extend(np.argmax(classify(model.cls_head, out).data, axis=1).tolist())
    return {"accuracy": accuracy(preds, [r.label for r in records])}


def run_eval(task: str, checkpoint, records: list[Record], out=None, cfg: Config | None = None) -> dict:
    """Metric report for ``task``; appended to ``out/metrics.ndjson`` when ``out`` is given."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    model, ck = load_model(checkpoint)
    cfg = cfg or Config.from_dict(ck.meta["config"])
    if task == "grounding" and not hasattr(model, "od_head"):
        raise CheckpointError("grounding eval needs a checkpoint with an OD head; run pretrain-fine or finetune --task grounding")
    if task == "classify" and (ck.meta.get("task") != "classify" or not hasattr(model, "cls_head")):
        raise CheckpointError("classify eval needs a checkpoint from finetune --task classify")
    if task == "grounding":
        rep = grounding_eval(model, records)
    elif task == "classify":
        rep = classify_eval(model, records)
    elif task == "caption":
        rep = caption_eval(model, _caption_cfg(cfg), records)
    else:
        rep = retrieval_eval(model, records, cfg.rerank_k)
    rep = {"task": task, "stage": ck.stage, "step": ck.step, **rep}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out / METRICS_NAME)
        try:
            for k, v in rep.items():
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    log.write(ck.step, f"eval/{task}/{k}", v)
        finally:
            log.close()
    return rep


def describe_checkpoint(path) -> dict:
    ck = ckpt_io.load(path)
    size = os.path.getsize(path)
    groups: dict[str, int] = {}
    for n, a in ck.params.items():
        groups[n.split(".", 1)[0]] = groups.get(n.split(".", 1)[0], 0) + int(a.size)
    return {
        "stage": ck.stage,
        "task": ck.meta.get("task"),
        "step": ck.step,
        "strategy": ck.meta["arch"]["strategy"],
        "tensors": len(ck.params),
        "parameters": groups,
        "optimizer_tensors": len(ck.optim),
        "bytes": size,
        "sha256": ckpt_io.file_hash(path),
    }
