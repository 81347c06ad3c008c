"""The four overfit runs: coarse, fine grounding, captioning, classification.

    python scripts/overfit.py OUT [--coarse-steps N] [--fine-steps N]

Prints each run's train-set metrics and wall time; OUT/overfit.json keeps them.
"""
import argparse
import json
import time
from pathlib import Path

from backbone_fusion.config import Config
from backbone_fusion.data import generate_dataset
from backbone_fusion.train import run_eval, run_finetune, run_pretrain_coarse, run_pretrain_fine, unique_caption_subset


def timed(fn):
    t0 = time.perf_counter()
    res = fn()
    return res, round(time.perf_counter() - t0, 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--coarse-steps", type=int, default=2000)
    ap.add_argument("--fine-steps", type=int, default=1500)
    args = ap.parse_args()
    out = Path(args.out)
    records = generate_dataset(0, 512)
    report = {}

    coarse, dt = timed(lambda: run_pretrain_coarse(Config(steps=args.coarse_steps), out / "coarse", records))
    s = coarse.summary
    report["coarse"] = {"mlm_ratio": s["mlm_probe_final"] / s["mlm_probe_initial"], "itc_i2t_r1": s["itc_probe_i2t_r1"], "itc_t2i_r1": s["itc_probe_t2i_r1"], "seconds": dt}
    print("coarse", report["coarse"], flush=True)

    fine, dt = timed(lambda: run_pretrain_fine(Config(stage="fine", steps=args.fine_steps), out / "fine", coarse.checkpoint, records))
    report["fine"] = {"grounding_R@1": fine.summary["grounding_R@1"], "AP": fine.summary["AP"], "seconds": dt}
    print("fine", report["fine"], flush=True)

    caps = [records[i] for i in unique_caption_subset(records, 16)]
    cap, dt = timed(lambda: run_finetune("caption", Config(steps=500, warmup_steps=25, beam=5), out / "caption", coarse.checkpoint, caps))
    rep = run_eval("caption", cap.checkpoint, caps)
    report["caption"] = {"loss": cap.summary["final_caption"], "BLEU@4": rep["BLEU@4"], "seconds": dt}
    print("caption", report["caption"], flush=True)

    cls, dt = timed(lambda: run_finetune("classify", Config(steps=300, warmup_steps=15), out / "classify", coarse.checkpoint, records[:32]))
    report["classify"] = {"accuracy": run_eval("classify", cls.checkpoint, records[:32])["accuracy"], "seconds": dt}
    print("classify", report["classify"], flush=True)

    (out / "overfit.json").write_text(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
