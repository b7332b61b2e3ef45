"""Compute table for the full-scale (ViT-L, 6 views, 900 queries) shape.

Prints per-stage FLOPs, the ratio to dense, the mean keep ratio and the
store-buffer size for each target keep ratio, then the stage sensitivities.

    python3 scripts/profile_full_scale.py [--tkrs 1.0 0.5 0.33 0.1]
"""

import argparse
import json

from store3d.profiler import full_scale_shape, pipeline_flops, sensitivity, store_reactivate_schedule

p = argparse.ArgumentParser()
p.add_argument("--tkrs", type=float, nargs="+", default=[1.0, 0.5, 0.33, 0.1])
args = p.parse_args()

shape = full_scale_shape()
print(f"{'tkr':>5} {'io':>9} {'backbone':>9} {'routing':>9} {'decoder':>9} {'ratio':>7} {'mkr':>6} {'buffer MB':>9}")
for tkr in args.tkrs:
    rep = pipeline_flops(shape, store_reactivate_schedule(tkr, shape))
    s = {k: v / 1e9 for k, v in rep.stages.items()}
    print(
        f"{tkr:>5g} {s['io']:>9.1f} {s['backbone']:>9.1f} {s['routing']:>9.2f} {s['decoder']:>9.1f}"
        f" {rep.ratio:>7.4f} {rep.mkr:>6.3f} {rep.buffer_bytes / 1e6:>9.1f}"
    )
print("GFLOPs per stage; ratio is against the dense pipeline without routing.")
print("sensitivity (d log FLOPs / d log count):")
print(json.dumps(sensitivity(shape), indent=2))
