"""Train FixMatch and a labeled-only baseline on 40 labeled glyphs and compare.

A shortened schedule keeps this to a few minutes on one core; pass a step
count to go longer (the acceptance experiment uses 8192).

Run: python3 demos/05_fixmatch_vs_supervised.py [steps]
"""

import os
import sys

from fixmatch.harness import default_config, emit_plot_svg, run_experiment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1024
out = os.path.join(os.path.dirname(__file__), "out")


def show(row):
    mask = "-" if row["mask_rate"] is None else f"{row['mask_rate']:.2f}"
    imp = "-" if row["impurity"] is None else f"{row['impurity']:.3f}"
    print(f"  step {row['step']:5d}  err {row['err']:.3f}  ema err {row['err_ema']:.3f}  mask {mask}  impurity {imp}")


results = {}
for algorithm in ("supervised_only", "fixmatch"):
    print(algorithm)
    cfg = default_config(steps=steps, eval_every=max(steps // 8, 1), algorithm=algorithm,
                         output_dir=os.path.join(out, algorithm))
    record, _ = run_experiment(cfg, progress=show)
    results[algorithm] = record

sup, fm = (results[k].rows[-1] for k in ("supervised_only", "fixmatch"))
print(f"\nfinal raw error: supervised {sup['err']:.3f}, FixMatch {fm['err']:.3f}")
print(f"final EMA error: supervised {sup['err_ema']:.3f}, FixMatch {fm['err_ema']:.3f}")
emit_plot_svg(results["fixmatch"], os.path.join(out, "fixmatch_curve.svg"), title="FixMatch, 4 labels per class")
print(f"artifacts (CSV, SVG, checkpoints) under {out}")
