"""PSNR, SSIM, bicubic baseline and the comparison report."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .image import Image

BICUBIC_A = -0.5


@dataclass(frozen=True)
class SsimConfig:
    window: int = 8
    gaussian: bool = False  # True: 11x11 Gaussian window, sigma 1.5
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2


def _as_hwc(x):
    x = x.data if isinstance(x, Image) else np.asarray(x)
    return x[:, :, None] if x.ndim == 2 else x


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` for identical inputs."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / err))


def _box_means(x, k):
    """Means over every k x k window (valid positions) via an integral image."""
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    s[1:, 1:] = x.cumsum(0).cumsum(1)
    return (s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]) / (k * k)


def _gaussian_means(x, cfg):
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * cfg.gaussian_sigma**2))
    g /= g.sum()
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")[5:-5]
    return ndimage.correlate1d(out, g, axis=1, mode="constant")[:, 5:-5]


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Local SSIM for every window fully inside a single-channel image pair.

    Window statistics are population moments (divide by the window weight sum).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = 11 if cfg.gaussian else cfg.window
    if a.shape[0] < k or a.shape[1] < k:
        raise ValueError(f"image {a.shape} smaller than the {k}x{k} SSIM window")
    means = (lambda x: _gaussian_means(x, cfg)) if cfg.gaussian else (lambda x: _box_means(x, k))
    mu_a, mu_b = means(a), means(b)
    var_a = means(a * a) - mu_a**2
    var_b = means(b * b) - mu_b**2
    cov = means(a * b) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean local SSIM; multi-channel images average the per-channel values."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([ssim_map(a[:, :, c], b[:, :, c], cfg).mean() for c in range(a.shape[2])]))


def cubic_weight(d, a: float = BICUBIC_A):
    d = np.abs(d)
    return np.where(
        d <= 1,
        (a + 2) * d**3 - (a + 3) * d**2 + 1,
        np.where(d < 2, a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a, 0.0),
    )


def _reflect_index(i, n):
    # half-sample symmetric: -1 -> 0, n -> n - 1
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i >= n, period - 1 - i, i)


def _bicubic_axis(x, r, axis):
    n = x.shape[axis]
    out_pos = (np.arange(n * r) + 0.5) / r - 0.5
    base = np.floor(out_pos).astype(int)
    t = out_pos - base
    taps = np.stack([base - 1, base, base + 1, base + 2], axis=1)
    w = cubic_weight(t[:, None] - np.array([-1, 0, 1, 2])[None, :])
    w /= w.sum(axis=1, keepdims=True)
    idx = _reflect_index(taps, n)
    out = 0.0
    for j in range(4):
        shape = [1] * x.ndim
        shape[axis] = -1
        out = out + np.take(x, idx[:, j], axis=axis) * w[:, j].reshape(shape)
    return out


def bicubic_upscale(img, r: int):
    """Keys cubic convolution (a = -0.5) with pixel-center alignment and
    half-sample symmetric boundary. Returns the same type it was given."""
    if r < 1 or int(r) != r:
        raise ValueError(f"upscale factor must be a positive integer, got {r}")
    is_image = isinstance(img, Image)
    x = _as_hwc(img).astype(np.float64)
    if r > 1:
        x = _bicubic_axis(_bicubic_axis(x, r, 0), r, 1)
    if is_image:
        return Image(x, pixel_size=None if img.pixel_size is None else img.pixel_size / r)
    return x


@dataclass
class EvalReport:
    """Per-sample and mean PSNR/SSIM per method label."""

    rows: dict = field(default_factory=dict)  # label -> list of (sample_id, psnr, ssim)

    def add(self, label, sample_id, p, s):
        self.rows.setdefault(label, []).append((sample_id, float(p), float(s)))

    def mean(self, label):
        r = self.rows[label]
        return float(np.mean([x[1] for x in r])), float(np.mean([x[2] for x in r]))

    def table(self) -> str:
        lines = [f"{'method':<40}{'SSIM':>10}{'PSNR [dB]':>14}"]
        for label in self.rows:
            p, s = self.mean(label)
            lines.append(f"{label:<40}{s:>10.4f}{p:>14.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        out = {}
        for label, r in self.rows.items():
            p, s = self.mean(label)
            out[label] = {
                "mean_psnr": p,
                "mean_ssim": s,
                "samples": [{"id": i, "psnr": a, "ssim": b} for i, a, b in r],
            }
        return out

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "sample", "psnr", "ssim"])
            for label, r in self.rows.items():
                for sid, p, s in r:
                    w.writerow([label, sid, repr(p), repr(s)])
        with open(os.path.join(out_dir, "eval_table.txt"), "w") as fh:
            fh.write(self.table())
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


NETWORK = "Network reconstruction"
BASELINE = "Bicubic interpolation (no deconvolution)"
TARGET = "High resolution target"


def evaluate_pairs(pairs, generator, ssim_cfg: SsimConfig = SsimConfig(), batch_size: int = 16) -> EvalReport:
    """Table-style comparison over (sample_id, lr, hr) arrays.

    ``generator`` maps an (B, h, w, C) batch to (B, r*h, r*w, C). Network
    outputs are clamped to [0, 1] before scoring.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluation split is empty")
    report = EvalReport()
    outputs = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        lr = np.stack([p[1] for p in chunk])
        outputs.extend(np.clip(generator(lr), 0.0, 1.0))
    r = outputs[0].shape[0] // pairs[0][1].shape[0]
    for (sid, lr, hr), sr in zip(pairs, outputs):
        report.add(NETWORK, sid, psnr(sr, hr), ssim(sr, hr, ssim_cfg))
    for sid, lr, hr in pairs:
        bc = np.clip(bicubic_upscale(lr, r), 0.0, 1.0)
        report.add(BASELINE, sid, psnr(bc, hr), ssim(bc, hr, ssim_cfg))
    for sid, lr, hr in pairs:
        report.add(TARGET, sid, psnr(hr, hr), ssim(hr, hr, ssim_cfg))
    return report
