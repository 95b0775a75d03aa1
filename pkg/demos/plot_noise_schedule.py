"""
Noise schedules and the forward process
=======================================

How much of an image survives after ``t`` noising steps, and what a sketch
looks like on its way to pure noise.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from s2m.diffusion import build_schedule, forward_sample
from s2m.pipeline import normalize
from s2m.sketch import SimParams, blur_sketch, mask_to_sketch, simulate_nuclei_mask

out = Path("demo_output")
out.mkdir(exist_ok=True)

###############################################################################
# Signal retention
# ----------------
# The cumulative product of the per-step retention factors sets the mix of
# signal and noise at each step.

linear = build_schedule(1000, kind="linear")
cosine = build_schedule(1000, kind="cosine")
t = np.arange(1, 1001)

fig, ax = plt.subplots(figsize=(5, 3.2))
ax.plot(t, linear.alpha_bars, label="linear")
ax.plot(t, cosine.alpha_bars, label="cosine")
ax.axvline(400, color="grey", ls=":", label="t = 400")
ax.set_xlabel("t")
ax.set_ylabel("cumulative signal fraction")
ax.legend()
fig.tight_layout()
fig.savefig(out / "schedules.png", dpi=110)

for step in (1, 100, 400, 1000):
    print(f"t={step:4d}  signal weight {np.sqrt(linear.alpha_bar(step)):.4f}  "
          f"noise weight {np.sqrt(1 - linear.alpha_bar(step)):.4f}")

###############################################################################
# Noising a sketch
# ----------------
# A simulated nuclei mask is rendered as a sketch, blurred, mapped to
# [-1, 1] and pushed forward with one fixed noise field.

params = SimParams(image_shape=(96, 96), seed=3)
mask = simulate_nuclei_mask(params)
sketch = blur_sketch(mask_to_sketch(mask, "nuclei", params, seed=3), 1.0)
noise = np.random.default_rng(0).standard_normal(mask.shape)

steps = (0, 100, 250, 400, 700, 1000)
fig, axes = plt.subplots(1, len(steps), figsize=(2.2 * len(steps), 2.4))
for ax, step in zip(axes, steps):
    ax.imshow(forward_sample(normalize(sketch), step, noise, linear), cmap="gray", vmin=-2.5, vmax=2.5)
    ax.set_title(f"t = {step}")
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "forward_process.png", dpi=110)
print("figures written to", out)
