"""
Comparing images, masks and score lists
=======================================

The evaluation metrics on small hand-made inputs where the answer is known.
"""
import numpy as np

from s2m.metrics import histogram_similarity, instance_iou, psnr, rank_sum_test, zncc

rng = np.random.default_rng(0)
ref = rng.uniform(0, 1, (64, 64))

###############################################################################
# PSNR falls as the noise grows
# -----------------------------

for sd in (0.01, 0.05, 0.1, 0.3):
    print(f"noise sd {sd:4.2f}: PSNR {psnr(ref, np.clip(ref + sd * rng.standard_normal(ref.shape), 0, 1)):6.2f} dB")

###############################################################################
# ZNCC ignores brightness and contrast changes
# --------------------------------------------

print("ZNCC(ref, 3 ref + 2) =", zncc(ref, 3 * ref + 2))
print("ZNCC(ref, -ref)      =", zncc(ref, -ref))
print("ZNCC(ref, noise)     =", round(zncc(ref, rng.uniform(0, 1, ref.shape)), 4))

###############################################################################
# Histogram intersection between intensity distributions
# ------------------------------------------------------

a, b = rng.standard_normal(50_000), rng.standard_normal(50_000)
print("two normal samples:", round(histogram_similarity(a, b), 4))
print("shifted by one sd: ", round(histogram_similarity(a, b + 1), 4))

###############################################################################
# Instance IoU with greedy one-to-one matching
# --------------------------------------------

truth = np.zeros((8, 8), dtype=int)
truth[1:4, 1:4] = 1
truth[5:8, 5:8] = 2
pred = np.zeros_like(truth)
pred[1:4, 2:5] = 9  # shifted by one column
res = instance_iou(pred, truth)
print("per-instance IoU:", {int(k): round(float(v), 3) for k, v in zip(res.truth_ids, res.ious)}, "matched:", res.matched)

###############################################################################
# Rank-sum test on two score lists
# --------------------------------

for xs, ys in (([1, 2, 3], [4, 5, 6]), ([0.81, 0.79, 0.84, 0.80], [0.82, 0.78, 0.83, 0.80])):
    r = rank_sum_test(xs, ys)
    print(f"U = {r.U:4.1f}  p = {r.p_two_sided:.4f}  ({r.method})")
