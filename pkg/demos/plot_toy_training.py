"""
Training the toy denoiser
=========================

The toy corpus stands in for real microscopy: textured nuclei under a blurry
optical response and sensor noise. A small U-Net learns to predict the noise
added to 64x64 patches. The pinned run takes 20000 steps; pass a smaller
step count on the command line for a quick look, e.g.
``python plot_toy_training.py 500``. Checkpoints are cached under
``$S2M_CACHE`` and resumed if interrupted.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from s2m.corpus import TOY_TRAINING, toy_checkpoint_path, toy_corpus, train_toy_denoiser

out = Path("demo_output")
out.mkdir(exist_ok=True)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else TOY_TRAINING["steps"]

###############################################################################
# The corpus
# ----------

images, masks = toy_corpus(n=8)
fig, axes = plt.subplots(2, 4, figsize=(9, 4.6))
for ax, img in zip(axes.ravel(), images):
    ax.imshow(img, cmap="gray")
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "toy_corpus.png", dpi=110)

###############################################################################
# Training (or reusing a cached run)
# ----------------------------------

print("checkpoint:", toy_checkpoint_path(steps))
den = train_toy_denoiser(steps=steps)
steps_done, loss = map(np.array, zip(*den.state.loss_history))
window = min(200, len(loss))
smooth = np.convolve(loss, np.ones(window) / window, mode="valid")

fig, ax = plt.subplots(figsize=(5, 3.2))
ax.semilogy(steps_done, loss, alpha=0.25, lw=0.5)
ax.semilogy(steps_done[window - 1:], smooth)
ax.set_xlabel("step")
ax.set_ylabel("noise-prediction loss")
fig.tight_layout()
fig.savefig(out / "toy_loss.png", dpi=110)

k = min(1000, len(loss) // 2)
if k:
    print(f"mean loss over the first {k} steps {loss[:k].mean():.4f}, last {k} steps {loss[-k:].mean():.4f}")
