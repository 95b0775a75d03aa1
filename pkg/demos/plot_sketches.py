"""
Simulated structures and sketches
=================================

Nuclei are packed as non-touching ellipses, membranes as a nearest-center
tessellation. Each label mask is rendered as a coarse sketch, and the blur
width controls how much edge detail the sketch hands to the generator.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from s2m.sketch import SimParams, blur_sketch, mask_to_sketch, simulate_mask

out = Path("demo_output")
out.mkdir(exist_ok=True)

###############################################################################
# Masks and their sketches
# ------------------------

params = SimParams(image_shape=(128, 128), instance_count=(12, 20), radius=(5, 11), seed=11)
fig, axes = plt.subplots(2, 4, figsize=(10, 5.2))
for row, style in zip(axes, ("nuclei", "membrane")):
    mask = simulate_mask(params, style)
    sketch = mask_to_sketch(mask, style, params, seed=1)
    print(f"{style:8s}: {len(mask.instance_ids)} instances, meta keys {sorted(mask.meta)}")
    row[0].imshow(mask.labels, cmap="tab20", interpolation="nearest")
    row[0].set_title(f"{style} labels")
    for ax, sigma in zip(row[1:], (0.0, 1.0, 2.0)):
        ax.imshow(blur_sketch(sketch, sigma).intensity, cmap="gray", vmin=0, vmax=1)
        ax.set_title(f"sketch, sigma = {sigma:g}")
    for ax in row:
        ax.axis("off")
fig.tight_layout()
fig.savefig(out / "sketches.png", dpi=110)

###############################################################################
# Crowding
# --------
# When the field is too small for the requested count the simulator keeps
# what fits and says so.

crowded = simulate_mask(SimParams(image_shape=(32, 32), instance_count=(25, 25), radius=(5, 6), seed=0),
                        "nuclei")
print("requested", crowded.meta["requested"], "placed", crowded.meta["placed"],
      "under_placed", crowded.meta["under_placed"])
print("pixels per instance:", np.bincount(crowded.labels.ravel())[1:])
