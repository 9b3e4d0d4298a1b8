"""Image container, raster I/O and seeded random streams.

Intensities are kept as float32 in [0, 1], laid out (height, width, channels)
with channels interleaved, which is also how PNG/TIFF rasters are stored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

SUPPORTED_SUFFIXES = (".png", ".tif", ".tiff")
_FULL_SCALE = {8: 255, 16: 65535}


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable normalized raster.

    ``data`` is a read-only float32 array of shape (H, W, C) with C in {1, 3}.
    ``pixel_size`` is optional metadata in micrometers.
    """

    data: np.ndarray
    pixel_size: Optional[float] = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image has zero size")
        arr = clamp(np.array(arr, dtype=np.float32, order="C"))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Image({self.height}x{self.width}x{self.channels}, pixel_size={self.pixel_size})"


def clamp(x):
    """Clip intensities to [0, 1]; NaN maps to 0."""
    return np.clip(np.nan_to_num(x, nan=0.0), 0.0, 1.0)


def load_image(path) -> Image:
    path = os.fspath(path)
    if not path.lower().endswith(SUPPORTED_SUFFIXES):
        raise ValueError(f"unsupported raster format: {path}")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"unreadable image file: {path}")
    if raw.size == 0:
        raise ValueError(f"zero-size image: {path}")
    if raw.dtype == np.uint8:
        scale = _FULL_SCALE[8]
    elif raw.dtype == np.uint16:
        scale = _FULL_SCALE[16]
    else:
        raise ValueError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 3:
            raw = raw[:, :, ::-1]  # BGR -> RGB
        elif raw.shape[2] != 1:
            raise ValueError(f"unsupported channel count {raw.shape[2]} in {path}")
    return Image(raw.astype(np.float64) / scale)


def quantize(data, bit_depth: int = 16) -> np.ndarray:
    """Map [0, 1] intensities to integer codes, rounding half away from zero."""
    if bit_depth not in _FULL_SCALE:
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    full = _FULL_SCALE[bit_depth]
    scaled = clamp(np.asarray(data, dtype=np.float64)) * full
    codes = np.floor(scaled + 0.5)
    return codes.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(img: Image, path, bit_depth: int = 16) -> None:
    path = os.fspath(path)
    if not path.lower().endswith(SUPPORTED_SUFFIXES):
        raise ValueError(f"unsupported raster format: {path}")
    codes = quantize(img.data, bit_depth)
    if codes.shape[2] == 3:
        codes = np.ascontiguousarray(codes[:, :, ::-1])
    else:
        codes = codes[:, :, 0]
    ok = False
    try:
        ok = cv2.imwrite(path, codes)
    except cv2.error as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    if not ok:
        raise OSError(f"cannot write {path}")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream for ``seed``; extra integer keys derive independent child streams.

    The child for keys (k0, k1, ...) is ``SeedSequence(seed, spawn_key=keys)``, so
    parallel tasks get reproducible, non-overlapping streams regardless of the
    order in which they are created. Gaussian draws use numpy's ziggurat sampler.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_samples(rng: np.random.Generator, n: int, mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
    if variance < 0:
        raise ValueError(f"variance must be non-negative, got {variance}")
    if variance == 0:
        return np.full(n, float(mean))
    return rng.normal(mean, np.sqrt(variance), size=n)
