"""Compare hand-written backprop against central finite differences.

Run: python3 demos/03_backprop_check.py
"""

import numpy as np

from fixmatch.core import rng_for
from fixmatch.network import grad_check, random_architecture, reference_classifier

# The classifier used for training, on a small batch of random inputs.
rng = rng_for(0, "demo")
model = reference_classifier((12, 12, 1), 5, widths=(4, 8)).init(rng)
print(model.layers)
err, skipped = grad_check(model, rng.standard_normal((3, 12, 12, 1)), eps=1e-5, rng=rng)
print(f"max relative error {err:.2e} ({skipped} coordinates skipped at ReLU kinks)")

# Random small architectures: strides, padding, depth and widths all vary.
worst = 0.0
for i in range(20):
    r = rng_for(1, "demo", 0, i)
    net = random_architecture(r).init(r)
    e, _ = grad_check(net, r.standard_normal((2,) + net.input_shape), rng=r)
    worst = max(worst, e)
    if i < 4:
        print(f"  {net.input_shape} {[repr(layer) for layer in net.layers]} -> {e:.1e}")
print(f"worst over 20 random networks: {worst:.2e}")

# A deliberately wrong gradient is caught at once.
broken = reference_classifier((6, 6, 1), 3, widths=(2, 2)).init(rng_for(2, "demo"))
orig = broken.backward
broken.backward = lambda tape, d: [g * 1.01 for g in orig(tape, d)]
print(f"1% gradient scaling error shows up as {grad_check(broken, np.ones((2, 6, 6, 1)))[0]:.1e}")
