"""Pre-training objective ablation over five objective subsets.

    python scripts/ablate_objectives.py OUT [--steps N] [--n N]

Each subset runs coarse pre-training from scratch with identical seed and
data; OUT/objectives.json collects the MLM probe and the ITC probe recall.
"""
import argparse
import json
from pathlib import Path

from backbone_fusion.config import Config
from backbone_fusion.data import generate_dataset
from backbone_fusion.train import run_pretrain_coarse

SUBSETS = (
    ("mlm", "itm"),
    ("mlm", "itc"),
    ("itm_hard", "itc"),
    ("mlm", "itm", "itc"),
    ("mlm", "itm_hard", "itc"),
)
KEEP = ("mlm_probe_initial", "mlm_probe_final", "itc_probe_i2t_r1", "itc_probe_t2i_r1")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--n", type=int, default=512)
    args = ap.parse_args()
    out = Path(args.out)
    records = generate_dataset(0, args.n)
    table = {}
    for subset in SUBSETS:
        toggles = {k: k in subset for k in ("mlm", "itm", "itm_hard", "itc")}
        cfg = Config(steps=args.steps).with_overrides(**toggles)
        tag = "+".join(subset)
        res = run_pretrain_coarse(cfg, out / tag, records)
        table[tag] = {k: res.summary[k] for k in KEEP}
        print(tag, table[tag], flush=True)
    (out / "objectives.json").write_text(json.dumps(table, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
