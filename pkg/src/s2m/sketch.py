"""Simulated cell structures and their sketch renderings.

Two structure recipes are provided: non-overlapping filled ellipses (or
ellipsoids) for nuclei and a nearest-center tessellation for membranes.
:func:`mask_to_sketch` turns a label mask into a coarse intensity image and
:func:`blur_sketch` softens its edges before it is handed to the forward
diffusion process.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

__all__ = [
    "LabelMask",
    "SimParams",
    "Sketch",
    "SketchStyle",
    "blur_sketch",
    "boundary_band",
    "mask_to_sketch",
    "simulate_mask",
    "simulate_membrane_mask",
    "simulate_nuclei_mask",
]


class SketchStyle(str, Enum):
    NUCLEI = "nuclei"
    MEMBRANE = "membrane"


def _as_range(value, name: str, lo: float | None = None) -> tuple:
    a, b = value
    if a > b:
        raise ValueError(f"{name}: empty range {value}")
    if lo is not None and a < lo:
        raise ValueError(f"{name}: lower bound {a} below {lo}")
    return (a, b)


@dataclass(frozen=True)
class SimParams:
    """Parameters of the structure simulators and sketch renderer.

    ``eccentricity`` is the ratio of the longest to the shortest ellipse
    axis, so ``(1, 1)`` gives circles. Intensities live in [0, 1].
    """

    image_shape: tuple = (64, 64)
    instance_count: tuple = (6, 14)
    radius: tuple = (4.0, 8.0)
    eccentricity: tuple = (1.0, 1.6)
    foreground_intensity: tuple = (0.55, 0.95)
    background_intensity: tuple = (0.0, 0.1)
    membrane_thickness: int = 1
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.image_shape)
        if len(shape) not in (2, 3) or min(shape) < 1:
            raise ValueError(f"image_shape must be 2D or 3D and positive, got {shape}")
        object.__setattr__(self, "image_shape", shape)
        object.__setattr__(self, "instance_count", tuple(int(v) for v in _as_range(self.instance_count, "instance_count", 0)))
        object.__setattr__(self, "radius", _as_range(self.radius, "radius", 1.0))
        object.__setattr__(self, "eccentricity", _as_range(self.eccentricity, "eccentricity", 1.0))
        for name in ("foreground_intensity", "background_intensity"):
            lo, hi = _as_range(getattr(self, name), name, 0.0)
            if hi > 1.0:
                raise ValueError(f"{name}: upper bound {hi} above 1")
            object.__setattr__(self, name, (lo, hi))
        if self.membrane_thickness < 1:
            raise ValueError("membrane_thickness must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


@dataclass
class LabelMask:
    """Instance labels, 0 is background. ``meta`` carries simulator notes."""

    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass
class Sketch:
    intensity: np.ndarray
    style: SketchStyle
    sigma_applied: float = 0.0

    @property
    def shape(self) -> tuple:
        return self.intensity.shape


def _rotation_matrix(ndim: int, rng: np.random.Generator) -> np.ndarray:
    if ndim == 2:
        a = rng.uniform(0.0, math.pi)
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return Rotation.random(random_state=rng).as_matrix()


def _ellipse_pixels(shape, center, semi_axes, rot) -> tuple[tuple[slice, ...], np.ndarray]:
    """Boolean footprint of an ellipse(oid), restricted to its bounding box."""
    extent = max(semi_axes)
    lo = [max(0, int(math.floor(c - extent))) for c in center]
    hi = [min(s, int(math.ceil(c + extent)) + 1) for c, s in zip(center, shape)]
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
    d = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    local = d @ rot  # coordinates along the ellipse axes
    r2 = np.sum((local / np.asarray(semi_axes)) ** 2, axis=-1)
    return box, r2 <= 1.0


def simulate_nuclei_mask(params: SimParams) -> LabelMask:
    """Pack non-overlapping filled ellipses (2D) or ellipsoids (3D).

    Instances are rejected if they would touch an existing one, so they are
    pairwise disjoint and separated by at least one background pixel. If the
    requested count cannot be placed within ``max_attempts`` tries per
    instance, the mask holds as many as fit and ``meta["under_placed"]`` is set.
    """
    rng = np.random.default_rng(params.seed)
    shape = params.image_shape
    ndim = len(shape)
    labels = np.zeros(shape, dtype=np.uint16)
    occupied = np.zeros(shape, dtype=bool)
    requested = int(rng.integers(params.instance_count[0], params.instance_count[1] + 1))
    struct = ndimage.generate_binary_structure(ndim, ndim)

    placed = 0
    instances = []
    for _ in range(requested):
        for _attempt in range(params.max_attempts):
            r = rng.uniform(*params.radius)
            ecc = rng.uniform(*params.eccentricity)
            if ndim == 2:
                semi = (r * math.sqrt(ecc), r / math.sqrt(ecc))
            else:
                semi = (r * ecc ** (2 / 3), r * ecc ** (-1 / 3), r * ecc ** (-1 / 3))
            rot = _rotation_matrix(ndim, rng)
            center = [
                rng.uniform(min(r, s / 2), max(s - 1 - r, s / 2)) for s in shape
            ]
            box, fp = _ellipse_pixels(shape, center, semi, rot)
            if not fp.any():
                continue
            grown = ndimage.binary_dilation(np.pad(fp, 1), structure=struct)
            padded_occ = np.pad(occupied, 1)
            pbox = tuple(slice(b.start, b.stop + 2) for b in box)
            if np.any(grown & padded_occ[pbox]):
                continue
            placed += 1
            labels[box][fp] = placed
            occupied[box] |= fp
            instances.append({"id": placed, "center": [float(c) for c in center],
                              "semi_axes": [float(a) for a in semi]})
            break
        else:
            break

    meta = {"requested": requested, "placed": placed, "under_placed": placed < requested,
            "instances": instances}
    return LabelMask(labels, meta)


def simulate_membrane_mask(params: SimParams) -> LabelMask:
    """Tessellate the field into regions around random distinct center pixels.

    Every pixel is assigned to its nearest center; equal distances go to the
    lowest instance id. Centers are distinct pixels, so each region is non-empty.
    """
    rng = np.random.default_rng(params.seed)
    shape = params.image_shape
    n_pix = int(np.prod(shape))
    k = int(rng.integers(params.instance_count[0], params.instance_count[1] + 1))
    k = min(max(k, 1), n_pix)
    flat = rng.choice(n_pix, size=k, replace=False)
    centers = np.stack(np.unravel_index(flat, shape), axis=-1).astype(np.float64)
    coords = np.indices(shape).reshape(len(shape), -1).T.astype(np.float64)

    best = np.full(n_pix, np.inf)
    owner = np.zeros(n_pix, dtype=np.int64)
    for i, c in enumerate(centers):
        d2 = np.sum((coords - c) ** 2, axis=1)
        closer = d2 < best  # strict: earlier (lower) ids keep ties
        best[closer] = d2[closer]
        owner[closer] = i
    labels = (owner + 1).reshape(shape).astype(np.uint16)
    return LabelMask(labels, {"requested": k, "placed": k, "under_placed": False, "centers": centers.tolist()})


def simulate_mask(params: SimParams, style: SketchStyle | str) -> LabelMask:
    style = SketchStyle(style)
    if style is SketchStyle.NUCLEI:
        return simulate_nuclei_mask(params)
    return simulate_membrane_mask(params)


def boundary_band(labels: np.ndarray, thickness: int = 1) -> np.ndarray:
    """Pixels within city-block distance ``thickness`` of a differently labelled pixel."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    for ax in range(labels.ndim):
        a = [slice(None)] * labels.ndim
        b = [slice(None)] * labels.ndim
        a[ax] = slice(1, None)
        b[ax] = slice(None, -1)
        diff = labels[tuple(a)] != labels[tuple(b)]
        edge[tuple(a)] |= diff
        edge[tuple(b)] |= diff
    if thickness > 1:
        struct = ndimage.generate_binary_structure(labels.ndim, 1)
        edge = ndimage.binary_dilation(edge, structure=struct, iterations=thickness - 1)
    return edge


def mask_to_sketch(mask: LabelMask | np.ndarray, style: SketchStyle | str, params: SimParams, seed: int) -> Sketch:
    """Render a label mask as a coarse intensity image in [0, 1].

    NUCLEI: every instance gets its own foreground level, the background a
    single background level. MEMBRANE: boundary bands between regions are
    drawn at one foreground level over a background level. The mask is
    never modified.
    """
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    try:
        style = SketchStyle(style)
    except ValueError:
        raise ValueError(f"unknown sketch style {style!r}") from None
    if labels.size == 0:
        raise ValueError("empty mask")
    rng = np.random.default_rng(seed)
    bg = rng.uniform(*params.background_intensity)
    out = np.full(labels.shape, bg, dtype=np.float64)
    if style is SketchStyle.NUCLEI:
        n_max = int(labels.max())
        levels = rng.uniform(*params.foreground_intensity, size=n_max + 1)
        levels[0] = bg
        out = levels[labels]
    else:
        fg = rng.uniform(*params.foreground_intensity)
        out[boundary_band(labels, params.membrane_thickness)] = fg
    return Sketch(out, style, 0.0)


def blur_sketch(sketch: Sketch, sigma: float) -> Sketch:
    """Gaussian smoothing with kernel radius ceil(3 sigma) and reflect borders.

    ``sigma = 0`` returns an identical copy. Output is clamped to [0, 1].
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Sketch(sketch.intensity.copy(), sketch.style, sketch.sigma_applied)
    radius = int(math.ceil(3.0 * sigma))
    blurred = ndimage.gaussian_filter(
        np.asarray(sketch.intensity, dtype=np.float64), sigma, mode="reflect", radius=radius
    )
    np.clip(blurred, 0.0, 1.0, out=blurred)
    # sequential blurs compose in quadrature
    total = math.hypot(sketch.sigma_applied, sigma)
    return Sketch(blurred, sketch.style, total)
