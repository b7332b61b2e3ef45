"""Relevant fraction and calibrated threshold as the horizon and percentile vary.

    python3 scripts/dmin_sweep.py [--scenes 2]
"""

import argparse
import dataclasses

from store3d.corridor import RelevanceConfig, calibrate_dmin, label_dataset
from store3d.data import SyntheticSpec, gen_synthetic

p = argparse.ArgumentParser()
p.add_argument("--scenes", type=int, default=2)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

ds = gen_synthetic(SyntheticSpec(n_scenes=args.scenes, seed=args.seed))
print(f"{'H':>4} {'pct':>5} {'d_min':>7} {'relevant':>9} {'pairs':>6}")
for horizon in (3.0, 5.0, 8.0):
    for pct in (0.05, 0.1, 0.2):
        cfg = RelevanceConfig(horizon_H=horizon, percentile=pct)
        d_min, _ = calibrate_dmin(ds, cfg)
        labels = label_dataset(ds, dataclasses.replace(cfg, d_min=d_min))
        flat = [lab for fl in labels for lab in fl.labels]
        frac = sum(lab.relevant for lab in flat) / max(len(flat), 1)
        print(f"{horizon:>4g} {pct:>5g} {d_min:>7.3f} {frac:>9.3f} {len(flat):>6}")
