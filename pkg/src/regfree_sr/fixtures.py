"""Deterministic synthetic specimens used in place of real microscopy data.

Fixture set written by :func:`make_fixtures` (all 512 x 512, grayscale, 16-bit PNG):

    hr/texture_00.png .. hr/texture_05.png   multi-scale filtered noise
    hr/bars.png                              line-pair groups, periods 2, 3, 4, 6, 8 px
    hr/blobs.png                             nucleus-like Gaussian blobs on texture
    lr_measured.png                          128 x 128 simulated measurement of texture_00
    fixtures.json                            sizes, seeds and the planted degradation
"""

from __future__ import annotations

import json
import os

import numpy as np
from scipy import ndimage

from .degradation import DegradationParams, degrade
from .image import Image, make_rng, save_image

FIXTURE_SIZE = 512
N_TEXTURES = 6
BAR_PERIODS = (2, 3, 4, 6, 8)
PLANTED = DegradationParams(sigma=2.0, noise_variance=4e-4, factor=4)

_LOW, _HIGH = 0.1, 0.9


def _rescale(x, lo=_LOW, hi=_HIGH):
    x = x - x.min()
    x = x / max(x.max(), 1e-12)
    return lo + (hi - lo) * x


def texture(seed: int, size: int = FIXTURE_SIZE) -> np.ndarray:
    """Sum of band-limited noise octaves (scales 1..16 px), rescaled to [0.1, 0.9]."""
    rng = make_rng(seed, 1)
    acc = np.zeros((size, size))
    for scale, amp in ((1.0, 0.35), (2.0, 0.6), (4.0, 0.8), (8.0, 1.0), (16.0, 1.0)):
        n = rng.standard_normal((size, size))
        band = ndimage.gaussian_filter(n, scale, mode="wrap")
        acc += amp * band / band.std()
    # sharpen contrast a little so edges exist at every scale
    acc = np.tanh(acc / acc.std())
    return _rescale(acc)


def bar_layout(size: int = FIXTURE_SIZE):
    """Row/column placement of each bar group: {period: (top, left, height, width, orientation)}."""
    layout = {}
    left = 16
    for i, p in enumerate(BAR_PERIODS):
        top = 16 + i * 96
        layout[p] = (top, left, 64, 10 * p, "vertical")
        layout[-p] = (top, 256, 10 * p, 64, "horizontal")
    return layout


def bars(size: int = FIXTURE_SIZE) -> np.ndarray:
    """USAF-like target: for each period p, ten bars of width max(1, p // 2) spaced p apart."""
    img = np.full((size, size), _LOW)
    for key, (top, left, h, w, orient) in bar_layout(size).items():
        p = abs(key)
        on = max(1, p // 2)
        if orient == "vertical":
            for k in range(10):
                img[top : top + h, left + k * p : left + k * p + on] = _HIGH
        else:
            for k in range(10):
                img[top + k * p : top + k * p + on, left : left + w] = _HIGH
    return img


def blobs(seed: int, size: int = FIXTURE_SIZE, count: int = 120) -> np.ndarray:
    rng = make_rng(seed, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    img = 0.15 * (texture(seed + 1000, size) - _LOW) / (_HIGH - _LOW)
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(4, 12)
        amp = rng.uniform(0.3, 0.8)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return _rescale(img)


def make_fixtures(seed: int, out) -> dict:
    out = os.fspath(out)
    hr_dir = os.path.join(out, "hr")
    os.makedirs(hr_dir, exist_ok=True)
    names = []
    for i in range(N_TEXTURES):
        name = f"texture_{i:02d}.png"
        save_image(Image(texture(seed * 1000 + i)), os.path.join(hr_dir, name))
        names.append(name)
    save_image(Image(bars()), os.path.join(hr_dir, "bars.png"))
    save_image(Image(blobs(seed)), os.path.join(hr_dir, "blobs.png"))
    names += ["bars.png", "blobs.png"]

    lr = degrade(Image(texture(seed * 1000)), PLANTED, make_rng(seed, 3))
    save_image(lr, os.path.join(out, "lr_measured.png"))

    meta = {
        "seed": seed,
        "size": FIXTURE_SIZE,
        "hr_images": names,
        "bar_periods": list(BAR_PERIODS),
        "lr_measured": {"source": "hr/texture_00.png", "params": PLANTED.to_dict()},
    }
    with open(os.path.join(out, "fixtures.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return meta
