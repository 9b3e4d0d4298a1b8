"""Registration-free super-resolution for microscopy.

Training pairs are simulated from high-resolution images with a calibrated
blur/downsample/noise model, a residual generator with sub-pixel upsampling is
trained against a discriminator with a perceptual loss, and large images are
reconstructed tile by tile.
"""

from .dataset import DatasetManifest, PatchPair, build_dataset, load_dataset, save_dataset, verify_alignment
from .degradation import CalibrationReport, DegradationParams, calibrate, degrade, denoise, gaussian_kernel
from .image import Image, load_image, make_rng, save_image
from .inference import TileGrid, benchmark_inference, plan_tiles, stitch, super_resolve
from .losses import LossBreakdown, LossWeights
from .metrics import EvalReport, SsimConfig, bicubic_upscale, evaluate_pairs, psnr, ssim
from .nn import (
    Discriminator,
    DiscriminatorConfig,
    FeatureConfig,
    FeatureExtractor,
    Generator,
    GeneratorConfig,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, train, train_step

__version__ = "0.1.0"
