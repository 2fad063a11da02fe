"""Drop one candidate normalizer at a time and tabulate the outcome.

Writes a markdown table with test accuracy and the final mean ratios for
the full candidate set and each two-member subset.

    python demos/04_subset_ablation.py [--epochs 30]
"""

import argparse
import itertools
import os

import numpy as np

from normswitch.config import load_config
from normswitch.data import ingest_dataset
from normswitch.switchable import MEMBERS
from normswitch.training import train

HERE = os.path.dirname(os.path.abspath(__file__))

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--out", default=os.path.join(HERE, "out", "ablation.md"))
args = ap.parse_args()

cfg = load_config(os.path.join(HERE, "configs", "sn_b32.cfg")).with_overrides(epochs=args.epochs)
data = ingest_dataset(cfg.dataset_source())
rows = ["| omega | test_acc | mean lambda_mu | mean lambda_sigma |", "|---|---|---|---|"]
for omega in [MEMBERS] + list(itertools.combinations(MEMBERS, 2)):
    run = train(cfg.with_overrides(omega=tuple(omega)), dataset=data)
    fin = run.trajectory.final().values()
    mu = np.mean([r.lambda_mu for r in fin], axis=0)
    sigma = np.mean([r.lambda_sigma for r in fin], axis=0)

    def cell(v):
        return " ".join(f"{m} {x:.3f}" for m, x in zip(MEMBERS, v) if m in omega)

    rows.append(f"| {','.join(omega)} | {run.metrics[-1]['test_acc']:.4f} | {cell(mu)} | {cell(sigma)} |")
    print(rows[-1], flush=True)

os.makedirs(os.path.dirname(args.out), exist_ok=True)
with open(args.out, "w") as fh:
    fh.write("\n".join(rows) + "\n")
print(f"wrote {args.out}")
