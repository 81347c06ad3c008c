"""Fusion-strategy ablation: same seed and data, one config key changed per run.

    python scripts/ablate_strategies.py OUT [--steps N] [--task classify]

Each strategy is trained from scratch on the chosen fine-tuning task and the
mean loss over the last 20 steps is written to OUT/strategies.json together
with the analytic fusion-parameter count.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from backbone_fusion.config import Config
from backbone_fusion.data import generate_dataset
from backbone_fusion.model import STRATEGIES, count_fusion_params
from backbone_fusion.train import read_metrics, run_finetune


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--task", default="classify", choices=("classify", "caption", "retrieval"))
    ap.add_argument("--n", type=int, default=32, help="training records")
    args = ap.parse_args()
    out = Path(args.out)
    records = generate_dataset(0, args.n)
    table = {}
    for s in STRATEGIES:
        cfg = Config(steps=args.steps, warmup_steps=max(1, args.steps // 20)).with_overrides(strategy=s)
        res = run_finetune(args.task, cfg, out / s, None, records)
        curve = [r["value"] for r in read_metrics(res.metrics) if r["name"] == "loss"]
        table[s] = {"final_loss": float(np.mean(curve[-20:])), "fusion_params": count_fusion_params(cfg.arch)}
        print(s, table[s], flush=True)
    (out / "strategies.json").write_text(json.dumps(table, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
