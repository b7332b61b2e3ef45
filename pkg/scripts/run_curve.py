"""Train the toy detector, fit the relevance head, and sweep the keep ratio.

Equivalent to ``store3d curve`` but prints the table and per-stage timings
instead of writing files.

    python3 scripts/run_curve.py [--config configs/small.yaml]
"""

import argparse
import time

from store3d.config import load_config
from store3d.experiment import CURVE_HEADER, curve_rows, train_all

p = argparse.ArgumentParser()
p.add_argument("--config", default=None)
args = p.parse_args()

cfg = load_config(args.config)
t0 = time.perf_counter()
prep, info = train_all(cfg)
rows = curve_rows(prep, cfg)

for k, v in prep.timings.items():
    print(f"{k:>20}: {v:7.1f}s")
print(f"held-out relevance AUC: {info['relevance_auc']:.4f}")
print(" ".join(f"{h:>12}" for h in CURVE_HEADER))
for r in rows:
    print(" ".join(f"{v:>12.4f}" for v in r))
print(f"total {time.perf_counter() - t0:.0f}s")
