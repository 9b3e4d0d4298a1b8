"""Forward model of a wide-field microscope and its calibration.

A measurement is simulated from a high-resolution image as

    lr = clamp(downsample(kernel * hr) + noise)

with a truncated Gaussian kernel, block averaging over factor x factor cells
and additive white Gaussian noise. ``calibrate`` fits the kernel width and the
noise variance from one real (hr, lr) pair by a two-stage grid search.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .image import Image, clamp, gaussian_samples, save_image


@dataclass(frozen=True)
class DegradationParams:
    sigma: float = 2.0
    noise_variance: float = 0.0
    factor: int = 4
    downsample: str = "block"  # or "decimate"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError(f"factor must be a positive integer, got {self.factor}")
        if self.downsample not in ("block", "decimate"):
            raise ValueError(f"unknown downsample mode {self.downsample!r}")

    def replace(self, **kw) -> "DegradationParams":
        return DegradationParams(**{**asdict(self), **kw})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Kernel:
    radius: int
    weights: np.ndarray  # (2r+1, 2r+1), unit sum
    profile: np.ndarray  # normalized 1-D factor; weights = outer(profile, profile)


def gaussian_kernel(sigma: float, radius: Optional[int] = None) -> Kernel:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if radius is None:
        radius = max(1, math.ceil(3 * sigma))
    if radius < 1:
        raise ValueError("radius must be >= 1")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    w /= w.sum()
    return Kernel(radius=radius, weights=w, profile=g)


def blur(arr: np.ndarray, sigma: float, radius: Optional[int] = None) -> np.ndarray:
    """Separable Gaussian blur of an (H, W, C) array, half-sample symmetric boundary."""
    k = gaussian_kernel(sigma, radius)
    out = np.asarray(arr, dtype=np.float64)
    out = ndimage.correlate1d(out, k.profile, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k.profile, axis=1, mode="reflect")
    return out


def block_average(arr: np.ndarray, factor: int) -> np.ndarray:
    h, w = arr.shape[0] // factor, arr.shape[1] // factor
    cropped = arr[: h * factor, : w * factor]
    return cropped.reshape(h, factor, w, factor, *arr.shape[2:]).mean(axis=(1, 3))


def degrade_array(arr, params: DegradationParams, rng=None, clamp_output=True) -> np.ndarray:
    """Array-level forward model; ``arr`` is (H, W, C).

    Output size is floor(H / factor) x floor(W / factor). Trailing rows and
    columns that do not fill a whole cell are dropped after blurring, so the
    blur still sees them through the boundary.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    f = int(params.factor)
    if arr.shape[0] < f or arr.shape[1] < f:
        raise ValueError(f"image {arr.shape[:2]} smaller than factor {f}")
    out = blur(arr, params.sigma)
    if f > 1:
        if params.downsample == "block":
            out = block_average(out, f)
        else:
            h, w = out.shape[0] // f, out.shape[1] // f
            out = out[f // 2 :: f, f // 2 :: f][:h, :w]
    if params.noise_variance > 0:
        if rng is None:
            raise ValueError("an rng is required when noise_variance > 0")
        out = out + gaussian_samples(rng, out.size, 0.0, params.noise_variance).reshape(out.shape)
    if clamp_output:
        out = clamp(out)
    return out


def degrade(img: Image, params: DegradationParams, rng=None) -> Image:
    pixel_size = None if img.pixel_size is None else img.pixel_size * params.factor
    return Image(degrade_array(img.data, params, rng), pixel_size=pixel_size)


def denoise_array(arr, window: int = 3) -> np.ndarray:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return ndimage.median_filter(arr, size=window, mode="reflect")
    return ndimage.median_filter(arr, size=(window, window, 1), mode="reflect")


def denoise(img: Image, window: int = 3) -> Image:
    return Image(denoise_array(img.data, window), pixel_size=img.pixel_size)


@dataclass
class CalibrationReport:
    best_sigma: float
    best_variance: float
    estimated_variance: float
    factor: int
    sigma_grid: list
    sigma_objective: list
    var_grid: list
    var_objective: list
    residual: np.ndarray = field(repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("residual")
        return d

    def save(self, out_dir) -> None:
        """Write ``calibration.json`` and the residual as ``residual.png``.

        The residual is signed; the PNG stores ``0.5 + residual`` so zero maps
        to mid-gray.
        """
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "calibration.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        save_image(Image(0.5 + self.residual), os.path.join(out_dir, "residual.png"), bit_depth=16)


def _infer_factor(hr_shape, lr_shape) -> int:
    fh, rh = divmod(hr_shape[0], lr_shape[0])
    fw, rw = divmod(hr_shape[1], lr_shape[1])
    if rh or rw or fh != fw or fh < 1:
        raise ValueError(f"HR size {hr_shape[:2]} is not an integer multiple of LR size {lr_shape[:2]}")
    return fh


def _box3(arr):
    return ndimage.uniform_filter(arr, size=(3, 3, 1), mode="reflect")


def calibrate(
    hr: Image,
    lr_real: Image,
    sigma_grid: Sequence[float],
    var_grid: Sequence[float],
    denoiser: str = "box",
    downsample: str = "block",
) -> CalibrationReport:
    """Two-stage fit of kernel width and noise variance.

    Stage 1 picks the sigma whose noise-free simulation is closest (MSE) to the
    denoised measurement. Stage 2 keeps that sigma and picks the grid variance
    closest to the empirical variance of ``lr_real - simulation``. Ties go to
    the lowest grid index.

    ``denoiser``:
      * ``"box"`` (default): 3x3 mean filter applied to both the measurement and
        the simulation. Linear, so the noise averages out of the comparison and
        the filter's smoothing cancels.
      * ``"median"``: 3x3 median on the measurement only. Its smoothing reads as
        extra blur and pushes sigma upward; kept for comparison.
      * ``"none"``: raw MSE.
    """
    if len(sigma_grid) == 0 or len(var_grid) == 0:
        raise ValueError("calibration grids must be non-empty")
    if hr.channels != lr_real.channels:
        raise ValueError("channel mismatch between HR and LR images")
    if denoiser == "box":
        measured_view, sim_view = _box3, _box3
    elif denoiser == "median":
        measured_view, sim_view = denoise_array, (lambda a: a)
    elif denoiser == "none":
        measured_view = sim_view = lambda a: a
    else:
        raise ValueError(f"unknown denoiser {denoiser!r}")
    factor = _infer_factor(hr.shape, lr_real.shape)
    lr = lr_real.data.astype(np.float64)
    lr_dn = measured_view(lr)

    sims = {}
    sigma_obj = []
    for s in sigma_grid:
        p = DegradationParams(sigma=float(s), noise_variance=0.0, factor=factor, downsample=downsample)
        sim = degrade_array(hr.data, p)
        sims[float(s)] = sim
        sigma_obj.append(float(np.mean((lr_dn - sim_view(sim)) ** 2)))
    best_sigma = float(sigma_grid[int(np.argmin(sigma_obj))])

    residual = lr - sims[best_sigma]
    est_var = float(np.var(residual))
    var_obj = [abs(est_var - float(v)) for v in var_grid]
    best_var = float(var_grid[int(np.argmin(var_obj))])

    return CalibrationReport(
        best_sigma=best_sigma,
        best_variance=best_var,
        estimated_variance=est_var,
        factor=factor,
        sigma_grid=[float(s) for s in sigma_grid],
        sigma_objective=sigma_obj,
        var_grid=[float(v) for v in var_grid],
        var_objective=var_obj,
        residual=residual,
    )
