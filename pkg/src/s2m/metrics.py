"""Image-quality, segmentation and hypothesis-testing metrics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IoUResult",
    "RankSumResult",
    "ZeroVarianceError",
    "histogram_similarity",
    "instance_iou",
    "psnr",
    "rank_sum_test",
    "zncc",
]

EXACT_MAX_TOTAL = 20


class ZeroVarianceError(ValueError):
    """An operand of a correlation is constant over the evaluation region."""


def _region_select(a: np.ndarray, b: np.ndarray, region) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if region is None:
        return a.ravel(), b.ravel()
    region = np.asarray(getattr(region, "labels", region))
    if region.shape != a.shape:
        raise ValueError(f"region shape {region.shape} does not match {a.shape}")
    sel = region > 0
    if not sel.any():
        raise ValueError("empty evaluation region")
    return a[sel], b[sel]


def psnr(reference, test, max_val: float = 1.0, region=None) -> float:
    """Peak signal-to-noise ratio in dB.

    Parameters
    ----------
    reference, test : array_like
        Images of equal shape.
    max_val : float
        Peak value of the intensity range.
    region : array_like or LabelMask, optional
        Restrict the error to pixels where ``region > 0``.

    Returns
    -------
    float
        ``10 log10(max_val**2 / MSE)``; ``math.inf`` when the MSE is zero.
    """
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    a, b = _region_select(np.asarray(reference, dtype=np.float64), np.asarray(test, dtype=np.float64), region)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def zncc(a, b, region=None) -> float:
    """Zero-normalized cross-correlation, clamped to [-1, 1].

    Raises ``ZeroVarianceError`` if either operand is constant over the region.
    """
    x, y = _region_select(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), region)
    x = x - x.mean()
    y = y - y.mean()
    sx = math.sqrt(float(np.mean(x * x)))
    sy = math.sqrt(float(np.mean(y * y)))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("zncc undefined for a constant operand")
    return float(np.clip(np.mean(x * y) / (sx * sy), -1.0, 1.0))


def histogram_similarity(a, b, bins: int = 64, value_range=(-4.0, 4.0)) -> float:
    """Histogram intersection of the two normalized intensity histograms.

    Both inputs share ``bins`` equal-width bins over ``value_range``; values
    outside the range are counted in the nearest edge bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo, hi = value_range
    if not hi > lo:
        raise ValueError(f"invalid range {value_range}")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty input")
    edges = np.linspace(lo, hi, bins + 1)
    p, _ = np.histogram(np.clip(a, lo, hi), bins=edges)
    q, _ = np.histogram(np.clip(b, lo, hi), bins=edges)
    return float(np.minimum(p / a.size, q / b.size).sum().clip(0.0, 1.0))


@dataclass
class IoUResult:
    """Per-truth-instance IoUs after one-to-one matching.

    ``matched`` counts truth instances whose IoU reaches the match threshold.
    """

    truth_ids: list
    ious: list
    mean_iou: float
    matched: int
    threshold: float


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x))


def instance_iou(pred, truth, match_threshold: float = 0.5) -> IoUResult:
    """Greedy one-to-one instance matching by descending IoU.

    Each truth instance is paired with at most one predicted instance and
    vice versa, taking candidate pairs in order of decreasing IoU. Truth
    instances left unpaired score 0. The reported IoU of a pair is its raw
    value; ``match_threshold`` only decides what counts as a match. Equal
    IoUs are taken in order of truth label, then predicted label.
    """
    p = _labels(pred)
    g = _labels(truth)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    truth_ids = np.unique(g)
    truth_ids = truth_ids[truth_ids > 0]
    pred_ids = np.unique(p)
    pred_ids = pred_ids[pred_ids > 0]
    if truth_ids.size == 0:
        return IoUResult([], [], math.nan, 0, match_threshold)

    gi = np.searchsorted(truth_ids, g.ravel())
    g_fg = g.ravel() > 0
    pi = np.searchsorted(pred_ids, p.ravel())
    p_fg = p.ravel() > 0
    nt, npred = truth_ids.size, pred_ids.size
    inter = np.zeros((nt, max(npred, 1)), dtype=np.int64)
    both = g_fg & p_fg
    np.add.at(inter, (gi[both], pi[both]), 1)
    t_area = np.bincount(gi[g_fg], minlength=nt)
    p_area = np.bincount(pi[p_fg], minlength=max(npred, 1))
    union = t_area[:, None] + p_area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)

    scores = np.zeros(nt)
    used_t = np.zeros(nt, dtype=bool)
    used_p = np.zeros(iou.shape[1], dtype=bool)
    ti, pj = np.nonzero(iou > 0)
    order = np.lexsort((pj, ti, -iou[ti, pj]))
    for k in order:
        i, j = ti[k], pj[k]
        if used_t[i] or used_p[j]:
            continue
        used_t[i] = used_p[j] = True
        scores[i] = iou[i, j]
    return IoUResult(
        truth_ids=truth_ids.tolist(),
        ious=scores.tolist(),
        mean_iou=float(scores.mean()),
        matched=int(np.sum(scores >= match_threshold)),
        threshold=match_threshold,
    )


@dataclass
class RankSumResult:
    U: float
    p_two_sided: float
    method: str
    n: int
    m: int


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_v = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_sum_test(sample_a, sample_b) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

    ``U`` counts pairs with ``a > b`` (ties count one half). When
    ``n + m <= 20`` the null distribution of ``U`` is enumerated over all
    ``C(n + m, n)`` group assignments of the pooled midranks, so ties are
    handled exactly. Larger samples use the normal approximation with tie
    and continuity corrections. The two-sided p-value is
    ``min(1, 2 * min(P(U <= u), P(U >= u)))``.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    ranks = _midranks(np.concatenate([a, b]))
    # doubled ranks are integers, so the enumeration compares exactly
    r2 = np.rint(2 * ranks).astype(np.int64)
    offset2 = n * (n + 1)
    u2_obs = int(r2[:n].sum()) - offset2

    if n + m <= EXACT_MAX_TOTAL:
        sums = np.fromiter(
            (sum(c) for c in itertools.combinations(r2.tolist(), n)),
            dtype=np.int64,
            count=math.comb(n + m, n),
        )
        u2_all = sums - offset2
        total = u2_all.size
        lower = np.count_nonzero(u2_all <= u2_obs) / total
        upper = np.count_nonzero(u2_all >= u2_obs) / total
        method = "exact"
    else:
        N = n + m
        _, counts = np.unique(ranks, return_counts=True)
        tie = float(np.sum(counts ** 3 - counts))
        var = n * m / 12.0 * ((N + 1) - tie / (N * (N - 1)))
        mu = n * m / 2.0
        u = u2_obs / 2.0
        if var <= 0:
            lower = upper = 1.0
        else:
            sd = math.sqrt(var)
            lower = _norm_cdf((u + 0.5 - mu) / sd)
            upper = 1.0 - _norm_cdf((u - 0.5 - mu) / sd)
        method = "normal-approximation"
    p = min(1.0, 2.0 * min(lower, upper))
    return RankSumResult(U=u2_obs / 2.0, p_two_sided=p, method=method, n=n, m=m)


def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))
