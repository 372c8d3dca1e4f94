"""Sweep the confidence threshold and plot error, mask rate and impurity.

Low thresholds admit more pseudo-labels, more of them wrong. Uses a short
schedule by default; pass a step count to lengthen it.

Run: python3 demos/06_threshold_sweep.py [steps]
"""

import os
import sys

from fixmatch.harness import default_config, run_sweep

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 768
out = os.path.join(os.path.dirname(__file__), "out", "tau_sweep")
cfg = default_config(steps=steps, eval_every=steps, output_dir=out)
taus = [0.25, 0.5, 0.75, 0.95, 0.99]
sweep = run_sweep(cfg, "tau", taus)

print(f"{'tau':>5} {'err':>6} {'ema err':>8} {'mask':>6} {'impurity':>9}")
for tau, rec in zip(taus, sweep.records):
    r = rec.rows[-1]
    imp = "-" if r["impurity"] is None else f"{r['impurity']:.4f}"
    print(f"{tau:>5} {r['err']:>6.3f} {r['err_ema']:>8.3f} {r['mask_rate']:>6.3f} {imp:>9}")
print(f"sweep.csv and sweep.svg written to {out}")
