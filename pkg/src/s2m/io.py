"""File I/O: TIFF images and masks, JSON sidecars, atomic writes."""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import tifffile

__all__ = [
    "atomic_path",
    "read_image",
    "read_mask",
    "write_image",
    "write_json",
    "write_mask",
]


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_tiff(path, data: np.ndarray) -> Path:
    with atomic_path(path) as tmp:
        # no timestamps or software tag, so identical arrays give identical bytes
        tifffile.imwrite(tmp, data, software=None, datetime=None, metadata=None)
    return Path(path)


def write_image(path, image) -> Path:
    """Write a float image as 32-bit float TIFF (multi-page for 3D)."""
    return _write_tiff(path, np.asarray(image, dtype=np.float32))


def write_mask(path, labels) -> Path:
    """Write instance labels as 16-bit unsigned TIFF."""
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
        raise ValueError("labels do not fit into uint16")
    return _write_tiff(path, labels.astype(np.uint16))


def read_image(path) -> np.ndarray:
    return tifffile.imread(path).astype(np.float64)


def read_mask(path) -> np.ndarray:
    data = tifffile.imread(path)
    if data.dtype.kind not in "ui":
        raise ValueError(f"{path}: mask must be an integer image, got {data.dtype}")
    return data


def write_json(path, obj) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)
