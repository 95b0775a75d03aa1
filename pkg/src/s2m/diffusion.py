"""Discrete-time diffusion machinery.

Noise schedules, the closed-form forward marginal, single ancestral reverse
steps and truncated reverse chains. Everything here is plain numpy and free
of learned components; a denoiser enters only through a ``denoise_fn(x, t)``
callable returning the predicted noise.

Step indices run ``t = 1..T``. ``t = 0`` denotes clean data, with the
convention ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Domain",
    "NoiseSchedule",
    "ScheduleKind",
    "build_schedule",
    "default_schedule",
    "forward_sample",
    "predict_x0",
    "reverse_step",
    "sample_chain",
]


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class Domain(str, Enum):
    """Origin of a noisy state: real image data or a rendered sketch."""

    IMAGE = "image"
    SKETCH = "sketch"


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step coefficients for ``t = 1..T``.

    Arrays are stored zero-based, so ``betas[t - 1]`` is beta at step ``t``.
    Use :meth:`alpha_bar` for one-based lookups that also cover ``t = 0``.
    """

    T: int
    betas: np.ndarray
    kind: ScheduleKind
    beta_start: float
    beta_end: float
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def alpha_bar(self, t: int) -> float:
        self.check_step(t, lower=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self.check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_step(t)
        return float(self.alphas[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at ``t = 1``."""
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))

    def check_step(self, t: int, lower: int = 1) -> None:
        if not lower <= t <= self.T:
            raise ValueError(f"step t={t} outside [{lower}, {self.T}]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @property
    def id(self) -> str:
        """Stable identifier used to bind checkpoints to schedules."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{self.kind.value}-T{self.T}-" + hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(d["T"], d["beta_start"], d["beta_end"], d["kind"])


def _cosine_betas(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    return np.clip(1.0 - f[1:] / f[:-1], 1e-12, max_beta)


def build_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: ScheduleKind | str = ScheduleKind.LINEAR,
) -> NoiseSchedule:
    """Build a noise schedule.

    Parameters
    ----------
    T : int
        Number of diffusion steps.
    beta_start, beta_end : float
        First and last beta of the linear schedule. The cosine schedule
        ignores them beyond validation.
    kind : {"linear", "cosine"}

    Raises
    ------
    ValueError
        If ``T < 1`` or the betas are not ``0 < beta_start <= beta_end < 1``.
    """
    try:
        kind = ScheduleKind(kind)
    except ValueError:
        raise ValueError(f"unknown schedule kind {kind!r}") from None
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    T = int(T)
    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = _cosine_betas(T)
    return NoiseSchedule(T, betas, kind, float(beta_start), float(beta_end))


def default_schedule() -> NoiseSchedule:
    """T=1000 linear schedule with betas from 1e-4 to 0.02."""
    return build_schedule(1000, 1e-4, 0.02, ScheduleKind.LINEAR)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_sample(x0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` from ``q(x_t | x_0)`` using the supplied standard-normal noise.

    ``t = 0`` returns ``x0`` unchanged.
    """
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    _same_shape(x0, noise, "forward_sample")
    schedule.check_step(t, lower=0)
    if t == 0:
        return x0.copy()
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def predict_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule, clip: bool = False) -> np.ndarray:
    """Invert the forward marginal given a noise estimate."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    _same_shape(x_t, eps_hat, "predict_x0")
    schedule.check_step(t)
    ab = schedule.alpha_bar(t)
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clip else x0


def reverse_step(
    x_t,
    eps_hat,
    t: int,
    schedule: NoiseSchedule,
    z,
    variance: str = "posterior",
    clip_x0: bool = False,
) -> np.ndarray:
    """One ancestral step from ``x_t`` to ``x_{t-1}``.

    With ``clip_x0=False`` the mean is ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat)
    / sqrt(alpha_t)``. With ``clip_x0=True`` the implied clean estimate is
    clamped to [-1, 1] first and the mean is taken from the Gaussian
    posterior q(x_{t-1} | x_t, x_0); both forms agree when no clamping occurs.

    ``variance`` is ``"posterior"`` (beta tilde) or ``"beta"``. No noise is
    added at ``t = 1``.
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    z = np.asarray(z)
    _same_shape(x_t, eps_hat, "reverse_step")
    _same_shape(x_t, z, "reverse_step")
    schedule.check_step(t)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)

    if clip_x0:
        x0 = predict_x0(x_t, eps_hat, t, schedule, clip=True)
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        mean = c0 * x0 + ct * x_t
    else:
        mean = (x_t - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)

    if t == 1:
        return mean
    if variance == "posterior":
        var = schedule.posterior_variance(t)
    elif variance == "beta":
        var = beta
    else:
        raise ValueError(f"unknown variance choice {variance!r}")
    return mean + math.sqrt(var) * z


class DenoiseError(RuntimeError):
    """A denoise_fn call failed inside the reverse chain."""


def _chain_rngs(seed, x_start: np.ndarray) -> list[np.random.Generator] | np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    seeds = list(seed)
    if len(seeds) != x_start.shape[0]:
        raise ValueError(
            f"got {len(seeds)} seeds for a batch of {x_start.shape[0]} items"
        )
    return [np.random.default_rng(int(s)) for s in seeds]


def sample_chain(
    denoise_fn: Callable[[np.ndarray, int], np.ndarray],
    x_start,
    t_start: int,
    schedule: NoiseSchedule,
    seed: int | Sequence[int] = 0,
    variance: str = "posterior",
    clip_x0: bool = True,
) -> np.ndarray:
    """Run the reverse chain from ``x_start`` (the state at ``t_start``) down to ``x_0``.

    ``seed`` is either one integer for the whole array or one integer per
    leading-axis item, in which case each item's noise stream depends only
    on its own seed.
    """
    x = np.array(x_start, dtype=np.float64)
    schedule.check_step(t_start)
    rngs = _chain_rngs(seed, x)
    for t in range(t_start, 0, -1):
        try:
            eps_hat = np.asarray(denoise_fn(x, t), dtype=np.float64)
        except Exception as exc:
            raise DenoiseError(f"denoise_fn failed at step t={t}: {exc}") from exc
        if isinstance(rngs, list):
            z = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
        else:
            z = rngs.standard_normal(x.shape)
        x = reverse_step(x, eps_hat, t, schedule, z, variance=variance, clip_x0=clip_x0)
    return x
