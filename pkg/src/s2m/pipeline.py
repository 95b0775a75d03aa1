"""Sketch-conditioned generation of paired image/mask data.

A label mask is rendered as a sketch, blurred, mapped into the model range,
noised to ``t_start`` with the closed-form forward marginal and then denoised
by the truncated reverse chain. The mask itself is passed through untouched,
which is what makes every generated image fully annotated.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .denoiser import Denoiser, denoise
from .diffusion import NoiseSchedule, forward_sample, sample_chain
from .io import read_image, read_mask, write_image, write_json, write_mask
from .sketch import (
    LabelMask,
    SimParams,
    Sketch,
    SketchStyle,
    blur_sketch,
    mask_to_sketch,
    simulate_mask,
)

__all__ = [
    "DATASET_FORMAT",
    "DatasetManifest",
    "GenerationConfig",
    "ScheduleMismatchError",
    "check_dataset",
    "denormalize",
    "derive_seed",
    "generate_dataset",
    "generate_pair",
    "generate_pairs",
    "normalize",
]

DATASET_FORMAT = "s2m-dataset-1"
RECOMMENDED_T_START = 400
RECOMMENDED_SIGMA = 1.0
DEFAULT_N_SAMPLES = 200


class ScheduleMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    t_start: int = RECOMMENDED_T_START
    sigma: float = RECOMMENDED_SIGMA
    seed: int = 0
    clamp_output: bool = True

    def __post_init__(self):
        if self.t_start < 1:
            raise ValueError(f"t_start must be >= 1, got {self.t_start}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def validate(self, schedule: NoiseSchedule) -> None:
        if not 1 <= self.t_start <= schedule.T:
            raise ValueError(f"t_start={self.t_start} outside [1, T={schedule.T}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def normalize(v) -> np.ndarray:
    """Map [0, 1] intensities (array or Sketch) to the model range [-1, 1]."""
    v = v.intensity if isinstance(v, Sketch) else v
    return 2.0 * np.asarray(v, dtype=np.float64) - 1.0


def denormalize(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def derive_seed(seed: int, index: int) -> int:
    """Stable 32-bit per-sample seed from a dataset seed and a sample index."""
    digest = hashlib.sha256(f"s2m:{int(seed)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _sub_seeds(seed: int) -> tuple[int, int, int]:
    sketch_seed, noise_seed, chain_seed = np.random.SeedSequence(int(seed)).generate_state(3)
    return int(sketch_seed), int(noise_seed), int(chain_seed)


def _eps_fn(denoiser) -> Callable:
    if isinstance(denoiser, Denoiser):
        return lambda x, t: denoise(denoiser, x, t)
    if callable(denoiser):
        return denoiser
    raise TypeError("denoiser must be a Denoiser or a callable (x, t) -> eps")


def check_schedule(denoiser, schedule: NoiseSchedule) -> None:
    bound = getattr(denoiser, "schedule_id", None)
    if bound is not None and bound != schedule.id:
        raise ScheduleMismatchError(
            f"checkpoint was trained with schedule {bound}, refusing to sample with {schedule.id}"
        )


def _check_shape(denoiser, shape) -> None:
    if isinstance(denoiser, Denoiser):
        cfg = denoiser.config
        div = 2 ** cfg.depth
        if len(shape) != cfg.input_rank or any(s % div for s in shape):
            raise ValueError(
                f"mask shape {shape} incompatible with the network "
                f"(rank {cfg.input_rank}, edges divisible by {div})"
            )


def generate_pairs(denoiser, schedule: NoiseSchedule, masks: Sequence, style,
                   configs: Sequence[GenerationConfig], sim_params: SimParams | None = None):
    """Batched :func:`generate_pair` for masks of one shape.

    All configs must share ``t_start``; each item's randomness depends only
    on its own config seed.
    """
    sim_params = sim_params or SimParams()
    if len(masks) != len(configs):
        raise ValueError("need one config per mask")
    if not masks:
        return []
    t_start = configs[0].t_start
    if any(c.t_start != t_start for c in configs):
        raise ValueError("configs in one batch must share t_start")
    configs[0].validate(schedule)
    check_schedule(denoiser, schedule)
    labels = [m.labels if isinstance(m, LabelMask) else np.asarray(m) for m in masks]
    shape = labels[0].shape
    if any(lab.shape != shape for lab in labels):
        raise ValueError("masks in one batch must share a shape")
    _check_shape(denoiser, shape)

    sketches, starts, chain_seeds = [], [], []
    for lab, cfg in zip(labels, configs):
        sk_seed, noise_seed, chain_seed = _sub_seeds(cfg.seed)
        sketch = blur_sketch(mask_to_sketch(lab, style, sim_params, sk_seed), cfg.sigma)
        noise = np.random.default_rng(noise_seed).standard_normal(shape)
        starts.append(forward_sample(normalize(sketch), t_start, noise, schedule))
        sketches.append(sketch)
        chain_seeds.append(chain_seed)

    x0 = sample_chain(_eps_fn(denoiser), np.stack(starts), t_start, schedule, seed=chain_seeds)
    out = []
    for lab, mask, sketch, cfg, x in zip(labels, masks, sketches, configs, x0):
        image = denormalize(x)
        if cfg.clamp_output:
            image = np.clip(image, 0.0, 1.0)
        mask_out = mask if isinstance(mask, LabelMask) else lab
        out.append((image, mask_out, sketch))
    return out


def generate_pair(denoiser, schedule: NoiseSchedule, mask, style,
                  config: GenerationConfig = GenerationConfig(),
                  sim_params: SimParams | None = None) -> tuple[np.ndarray, object, Sketch]:
    """Generate one image for ``mask``; returns ``(image, mask, sketch)``.

    ``image`` is in [0, 1] (clamped unless ``config.clamp_output`` is false),
    ``mask`` is the input object itself and ``sketch`` the blurred sketch
    the chain started from. ``denoiser`` may be a :class:`Denoiser` or any
    callable ``(x_t, t) -> eps_hat``.
    """
    return generate_pairs(denoiser, schedule, [mask], style, [config], sim_params)[0]


@dataclass
class DatasetManifest:
    entries: list
    schedule: dict
    checkpoint_id: str | None
    style: str
    created: str
    format_version: str = DATASET_FORMAT
    root: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "created": self.created,
            "style": self.style,
            "n_samples": len(self.entries),
            "schedule": self.schedule,
            "checkpoint_id": self.checkpoint_id,
            "entries": self.entries,
        }

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        import json

        root = Path(root)
        d = json.loads((root / "manifest.json").read_text())
        if d.get("format_version") != DATASET_FORMAT:
            raise ValueError(f"{root}: unsupported dataset format {d.get('format_version')!r}")
        return cls(d["entries"], d["schedule"], d["checkpoint_id"], d["style"], d["created"],
                   d["format_version"], root)


def generate_dataset(denoiser, schedule: NoiseSchedule, sim_params: SimParams, style,
                     n_samples: int = DEFAULT_N_SAMPLES,
                     config: GenerationConfig = GenerationConfig(),
                     out_dir="dataset", batch_size: int = 16, jobs: int = 1,
                     masks: Sequence | None = None) -> DatasetManifest:
    """Simulate masks, generate images and write a dataset directory.

    Sample ``i`` uses seed ``derive_seed(config.seed, i)`` for its mask
    simulation and its generation noise. If ``masks`` is given, those masks
    are used instead of simulated ones. Files go to ``images/``, ``masks/``
    and ``sketches/`` as ``NNNN.tif`` plus a ``manifest.json``. Output is
    assembled in a staging directory and only moved into place once all
    samples succeeded.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if masks is not None and len(masks) < n_samples:
        raise ValueError(f"{len(masks)} masks supplied for {n_samples} samples")
    style = SketchStyle(style)
    config.validate(schedule)
    check_schedule(denoiser, schedule)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(n_samples - 1)))

    seeds = [derive_seed(config.seed, i) for i in range(n_samples)]
    params_i = [dataclasses.replace(sim_params, seed=s) for s in seeds]
    if masks is None:
        mask_objs = [simulate_mask(p, style) for p in params_i]
    else:
        mask_objs = [m if isinstance(m, LabelMask) else LabelMask(np.asarray(m), {"imported": True})
                     for m in masks[:n_samples]]
    configs = [dataclasses.replace(config, seed=s) for s in seeds]

    # group by shape so imported masks of mixed sizes still batch
    chunks = []
    by_shape: dict[tuple, list[int]] = {}
    for i, m in enumerate(mask_objs):
        by_shape.setdefault(m.shape, []).append(i)
    for idx in by_shape.values():
        chunks.extend(idx[k: k + batch_size] for k in range(0, len(idx), batch_size))

    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        for sub in ("images", "masks", "sketches"):
            (staging / sub).mkdir()

        def run(chunk):
            results = generate_pairs(denoiser, schedule, [mask_objs[i] for i in chunk], style,
                                     [configs[i] for i in chunk], sim_params)
            for i, (image, mask, sketch) in zip(chunk, results):
                name = f"{i:0{width}d}.tif"
                write_image(staging / "images" / name, image)
                write_mask(staging / "masks" / name, mask.labels)
                write_image(staging / "sketches" / name, sketch.intensity)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(run, chunks))
        else:
            for chunk in chunks:
                run(chunk)

        entries = []
        for i in range(n_samples):
            name = f"{i:0{width}d}.tif"
            entries.append({
                "index": i,
                "image": f"images/{name}",
                "mask": f"masks/{name}",
                "sketch": f"sketches/{name}",
                "seed": seeds[i],
                "generation_config": configs[i].to_dict(),
                "sim_params": params_i[i].to_dict(),
                "mask_meta": dict(mask_objs[i].meta),
            })
        manifest = DatasetManifest(
            entries=entries,
            schedule={**schedule.to_dict(), "id": schedule.id},
            checkpoint_id=getattr(denoiser, "checkpoint_id", None),
            style=style.value,
            created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            root=out_dir,
        )
        write_json(staging / "manifest.json", manifest.to_dict())

        for sub in ("images", "masks", "sketches"):
            (out_dir / sub).mkdir(exist_ok=True)
            for f in sorted((staging / sub).iterdir()):
                os.replace(f, out_dir / sub / f.name)
        os.replace(staging / "manifest.json", out_dir / "manifest.json")
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return manifest


def check_dataset(root) -> list[str]:
    """Return a list of problems with a dataset directory; empty means consumable.

    Every entry must reference an existing float32 image and uint16 mask of
    the same shape, plus a same-shape sketch.
    """
    root = Path(root)
    try:
        manifest = DatasetManifest.load(root)
    except (OSError, ValueError, KeyError) as exc:
        return [f"manifest: {exc}"]
    import tifffile

    problems = []
    for e in manifest.entries:
        try:
            img = tifffile.imread(root / e["image"])
            msk = tifffile.imread(root / e["mask"])
            skt = tifffile.imread(root / e["sketch"])
        except Exception as exc:
            problems.append(f"entry {e.get('index')}: {exc}")
            continue
        if img.dtype != np.float32:
            problems.append(f"entry {e['index']}: image dtype {img.dtype}, expected float32")
        if msk.dtype != np.uint16:
            problems.append(f"entry {e['index']}: mask dtype {msk.dtype}, expected uint16")
        if not img.shape == msk.shape == skt.shape:
            problems.append(f"entry {e['index']}: shapes {img.shape}, {msk.shape}, {skt.shape} differ")
        elif not (np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1):
            problems.append(f"entry {e['index']}: image values outside [0, 1]")
    return problems


def load_pairs(root):
    """Yield ``(image, mask)`` arrays of a dataset in manifest order."""
    manifest = DatasetManifest.load(root)
    for e in manifest.entries:
        yield read_image(Path(root) / e["image"]), read_mask(Path(root) / e["mask"])
