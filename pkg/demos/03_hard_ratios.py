"""Soft ratios versus frozen one-hot ratios.

1. Train soft SN for 30 epochs and keep the snapshot.
2. Continue that snapshot softly for 10 more epochs (baseline).
3. Harden it (argmax per layer, ratios frozen) and finetune for the same 10 epochs.
4. Train from scratch with logits initialized at +-10 toward the same argmax choice.

    python demos/03_hard_ratios.py [--epochs 30] [--extra 10]
"""

import argparse
import os

from normswitch.config import load_config
from normswitch.data import ingest_dataset
from normswitch.snapshot import Snapshot
from normswitch.switchable import harden
from normswitch.training import harden_finetune, train

HERE = os.path.dirname(os.path.abspath(__file__))

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--extra", type=int, default=10)
ap.add_argument("--out", default=os.path.join(HERE, "out", "hard"))
args = ap.parse_args()
os.makedirs(args.out, exist_ok=True)

cfg = load_config(os.path.join(HERE, "configs", "sn_b32.cfg")).with_overrides(epochs=args.epochs)
data = ingest_dataset(cfg.dataset_source())
soft = train(cfg, dataset=data)
snap_path = os.path.join(args.out, "soft.bin")
soft.snapshot.save(snap_path)

choices = [harden(layer.state) for _, layer in soft.model.switchable_layers()]
print("argmax choices (mu, sigma) per layer:")
print("  " + " ".join(f"{c.choice_mu}/{c.choice_sigma}" for c in choices))

longer = cfg.with_overrides(epochs=args.epochs + args.extra)
cont = train(longer, resume=Snapshot.load(snap_path), dataset=data)
tuned = harden_finetune(Snapshot.load(snap_path), longer, dataset=data)
scratch = train(longer.with_overrides(hard_init_from=snap_path), dataset=data)

print(f"{'setting':28s} test_acc")
for label, run in (("soft, continued", cont), ("hardened + finetune", tuned), ("hard init from scratch", scratch)):
    print(f"{label:28s} {run.metrics[-1]['test_acc']:.4f}")
