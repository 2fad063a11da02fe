"""How per-device batch size moves the learned BN ratio.

Trains the same SN network twice on the 16x16 synthetic task: once with
four emulated devices of 32 samples and once with four devices of 2
samples. BN statistics over 2 samples are noisy, so the optimizer should
lean away from BN. Then the trajectories go through the analysis tools.

    python demos/02_batch_size_trend.py [--epochs 30] [--out demos/out/trend]
"""

import argparse
import os

import numpy as np

from normswitch.cli import main as cli
from normswitch.config import load_config
from normswitch.training import save_run, train

HERE = os.path.dirname(os.path.abspath(__file__))

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default=os.path.join(HERE, "out", "trend"))
args = ap.parse_args()

dirs = {}
for name in ("sn_b32", "sn_b2"):
    cfg = load_config(os.path.join(HERE, "configs", f"{name}.cfg"))
    cfg = cfg.with_overrides(epochs=args.epochs, seed=args.seed, output_dir=os.path.join(args.out, name))
    print(f"training {name} ({cfg.shard.n_shards} devices x {cfg.shard.per_shard})")
    result = train(cfg)
    dirs[name] = save_run(result, cfg)
    fin = result.trajectory.final()
    mean = np.mean([np.stack([r.lambda_mu, r.lambda_sigma]) for r in fin.values()], axis=0)
    print(f"  final mean ratios  mu    IN {mean[0,0]:.3f} LN {mean[0,1]:.3f} BN {mean[0,2]:.3f}")
    print(f"                     sigma IN {mean[1,0]:.3f} LN {mean[1,1]:.3f} BN {mean[1,2]:.3f}")
    print(f"  test accuracy {result.metrics[-1]['test_acc']:.4f}")

# mean vs variance ratios within each run, then the two runs against each other
for name, d in dirs.items():
    cli(["analyze", os.path.join(d, "trajectory.csv"), "--output-dir", os.path.join(d, "analysis")])
cli(["compare", os.path.join(dirs["sn_b32"], "trajectory.csv"), os.path.join(dirs["sn_b2"], "trajectory.csv"),
     "--output-dir", os.path.join(args.out, "compare")])
print(f"CSV and SVG reports under {args.out}")
