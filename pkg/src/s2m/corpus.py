"""Procedural stand-in for real microscopy images.

Each toy image is built from a simulated label mask: instances are filled
with band-limited noise texture, blurred by a point-spread function and
overlaid with Gaussian sensor noise. Images and their masks come in pairs,
so the same corpus serves training (images only) and evaluation (pairs).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from .sketch import SimParams, SketchStyle, boundary_band, simulate_mask

__all__ = ["cache_dir", "render_toy_image", "toy_corpus", "toy_sim_params"]


def cache_dir() -> Path:
    """Location for cached corpora, taken from ``S2M_CACHE`` if set."""
    return Path(os.environ.get("S2M_CACHE", Path.home() / ".cache" / "s2m"))


def toy_sim_params(shape=(64, 64), seed: int = 0) -> SimParams:
    return SimParams(image_shape=tuple(shape), seed=seed)


def render_toy_image(labels: np.ndarray, style: SketchStyle | str, rng: np.random.Generator,
                     texture_sigma: float = 1.5, psf_sigma: float = 1.0,
                     noise_std: float = 0.01) -> np.ndarray:
    """Textured intensity image in [0, 1] for a label field."""
    style = SketchStyle(style)
    labels = np.asarray(labels)
    texture = ndimage.gaussian_filter(rng.standard_normal(labels.shape), texture_sigma)
    texture /= texture.std() + 1e-12
    bg = rng.uniform(0.05, 0.12)
    img = np.full(labels.shape, bg)
    if style is SketchStyle.NUCLEI:
        n = int(labels.max())
        levels = rng.uniform(0.5, 0.9, size=n + 1)
        fg = labels > 0
        img[fg] = levels[labels[fg]] * (1.0 + 0.15 * texture[fg])
    else:
        band = boundary_band(labels, 1)
        img[band] = rng.uniform(0.6, 0.9) * (1.0 + 0.15 * texture[band])
    img = ndimage.gaussian_filter(img, psf_sigma, mode="reflect")
    img += noise_std * rng.standard_normal(labels.shape)
    return np.clip(img, 0.0, 1.0)


def _generate(n: int, shape, seed: int, style: SketchStyle) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((n, *shape), dtype=np.float32)
    masks = np.empty((n, *shape), dtype=np.uint16)
    for i in range(n):
        ss = np.random.SeedSequence([seed, i])
        mask_seed, tex_seed = (int(s) for s in ss.generate_state(2))
        mask = simulate_mask(SimParams(image_shape=tuple(shape), seed=mask_seed), style)
        masks[i] = mask.labels
        images[i] = render_toy_image(mask.labels, style, np.random.default_rng(tex_seed))
    return images, masks


def toy_corpus(n: int = 256, shape=(64, 64), seed: int = 0,
               style: SketchStyle | str = SketchStyle.NUCLEI,
               use_cache: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images, masks)`` stacked along axis 0.

    Images are float32 in [0, 1]; masks are uint16 instance labels. Output
    is a pure function of the arguments. Generated corpora are cached as
    ``.npz`` under :func:`cache_dir` unless ``use_cache`` is false.
    """
    style = SketchStyle(style)
    shape = tuple(int(s) for s in shape)
    key = json.dumps({"v": 2, "n": n, "shape": shape, "seed": seed, "style": style.value})
    path = cache_dir() / f"toy-{hashlib.sha256(key.encode()).hexdigest()[:16]}.npz"
    if use_cache and path.exists():
        with np.load(path) as f:
            return f["images"], f["masks"]
    images, masks = _generate(n, shape, seed, style)
    if use_cache:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.tmp.npz")
            np.savez(tmp, images=images, masks=masks)
            os.replace(tmp, path)
        except OSError:
            pass
    return images, masks


# Pinned desk-scale training run used by the acceptance checks and demos.
TOY_TRAINING = {
    "corpus": {"n": 256, "shape": (64, 64), "seed": 0, "style": "nuclei"},
    "config": {"base_channels": 16, "depth": 3, "time_embed_dim": 64, "patch_shape": (64, 64)},
    "steps": 20_000,
    "batch_size": 8,
    "lr": 1e-4,
    "seed": 1,
}


def toy_checkpoint_path(steps: int | None = None) -> Path:
    steps = TOY_TRAINING["steps"] if steps is None else steps
    return cache_dir() / f"toy-denoiser-{steps}.ckpt"


def train_toy_denoiser(steps: int | None = None, path=None, checkpoint_every: int = 1000,
                       schedule=None):
    """Train (or resume) the pinned toy denoiser and return it.

    An existing checkpoint at ``path`` is resumed; one that already reached
    ``steps`` is returned as is.
    """
    from .denoiser import (
        DenoiserConfig,
        PatchSource,
        init_denoiser,
        load_checkpoint,
        train,
    )
    from .diffusion import default_schedule

    pinned = TOY_TRAINING
    steps = pinned["steps"] if steps is None else steps
    path = Path(path) if path is not None else toy_checkpoint_path(steps)
    schedule = schedule or default_schedule()
    if path.exists():
        den = load_checkpoint(path)
    else:
        den = init_denoiser(DenoiserConfig(**pinned["config"]), seed=pinned["seed"])
    remaining = steps - den.state.step
    if remaining > 0:
        images, _ = toy_corpus(**pinned["corpus"])
        source = PatchSource(images, pinned["config"]["patch_shape"])
        train(den, source, remaining, schedule, optimizer_params={"lr": pinned["lr"]},
              checkpoint_every=checkpoint_every, checkpoint_path=path,
              batch_size=pinned["batch_size"])
    return den
