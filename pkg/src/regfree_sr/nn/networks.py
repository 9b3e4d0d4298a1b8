"""Generator, discriminator and fixed feature extractor.

All three keep trainable tensors in ``params`` and batch-norm running
statistics in ``buffers`` (both dicts keyed by layer name). ``forward``
returns ``(output, cache)``; ``backward(cache, dout)`` returns
``(param_grads, input_grad)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..image import make_rng
from . import layers as L

DISC_SCHEDULE = (1, 2, 4, 8, 16, 32, 16, 8)

# torchvision-style ordering of the VGG19 feature stack
VGG19_LAYERS = (
    "conv1_1", "relu1_1", "conv1_2", "relu1_2", "pool1",
    "conv2_1", "relu2_1", "conv2_2", "relu2_2", "pool2",
    "conv3_1", "relu3_1", "conv3_2", "relu3_2", "conv3_3", "relu3_3", "conv3_4", "relu3_4", "pool3",
    "conv4_1", "relu4_1", "conv4_2", "relu4_2", "conv4_3", "relu4_3", "conv4_4", "relu4_4", "pool4",
    "conv5_1", "relu5_1", "conv5_2", "relu5_2", "conv5_3", "relu5_3", "conv5_4", "relu5_4", "pool5",
)
VGG19_WIDTH = {1: 1, 2: 2, 3: 4, 4: 8, 5: 8}


@dataclass
class GeneratorConfig:
    n_res_blocks: int = 16
    n_features: int = 64
    upscale: int = 4
    channels: int = 1
    bn_momentum: float = L.BN_MOMENTUM
    tail_init: str = "he"  # "he" or "zero" (zero weights, bias = tail_bias)
    tail_bias: float = 0.0

    def __post_init__(self):
        if self.upscale not in (1, 2, 4, 8):
            raise ValueError(f"upscale must be one of 1, 2, 4, 8, got {self.upscale}")
        if self.n_res_blocks < 1 or self.n_features < 1:
            raise ValueError("n_res_blocks and n_features must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.tail_init not in ("he", "zero"):
            raise ValueError(f"tail_init must be 'he' or 'zero', got {self.tail_init!r}")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in [0, 1)")

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.upscale)))


@dataclass
class DiscriminatorConfig:
    base_features: int = 64
    schedule: tuple = DISC_SCHEDULE
    kernel: int = 4
    leaky_slope: float = 0.2
    input_size: int = 384
    channels: int = 1
    bn_momentum: float = L.BN_MOMENTUM

    def __post_init__(self):
        self.schedule = tuple(int(s) for s in self.schedule)
        if not self.schedule or self.schedule[0] < 1:
            raise ValueError("discriminator schedule must be non-empty and positive")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")

    @property
    def features(self):
        return [self.base_features * s for s in self.schedule]

    @property
    def strides(self):
        """Stride 2 where the feature count doubles over the previous layer, else 1."""
        f = self.features
        return [1] + [2 if f[i] == 2 * f[i - 1] else 1 for i in range(1, len(f))]

    def spatial_trace(self):
        sizes = [self.input_size]
        for s in self.strides:
            sizes.append(math.ceil(sizes[-1] / s))
        return sizes


@dataclass
class FeatureConfig:
    base_width: int = 64
    layer_index: int = 12
    channels: int = 1
    seed: int = 0
    weights_path: Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.layer_index <= len(VGG19_LAYERS):
            raise ValueError(f"layer_index must be in 1..{len(VGG19_LAYERS)}")

    @property
    def layer_names(self):
        return VGG19_LAYERS[: self.layer_index]


class _Net:
    config = None

    def __init__(self):
        self.params = {}
        self.buffers = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def _add_conv(self, rng, name, k, cin, cout, dtype):
        self.params[f"{name}/w"] = L.he_uniform(rng, (k, k, cin, cout), dtype)
        self.params[f"{name}/b"] = np.zeros(cout, dtype)

    def _add_bn(self, name, c, dtype):
        self.params[f"{name}/gamma"] = np.ones(c, dtype)
        self.params[f"{name}/beta"] = np.zeros(c, dtype)
        self.buffers[f"{name}/mean"] = np.zeros(c, dtype)
        self.buffers[f"{name}/var"] = np.ones(c, dtype)

    def _conv(self, name, x, stride=1):
        return L.conv2d_forward(x, self.params[f"{name}/w"], self.params[f"{name}/b"], stride)

    def _conv_back(self, name, dout, cache, grads):
        dx, dw, db = L.conv2d_backward(dout, cache, param_grads=grads is not None)
        if grads is not None:
            grads[f"{name}/w"], grads[f"{name}/b"] = dw, db
        return dx

    def _bn(self, name, x, train, update_stats):
        p, b = self.params, self.buffers
        return L.batchnorm_forward(
            x, p[f"{name}/gamma"], p[f"{name}/beta"], b[f"{name}/mean"], b[f"{name}/var"], train, update_stats,
            self.config.bn_momentum,
        )

    @staticmethod
    def _require_cache(caches, key):
        if not caches or key not in caches:
            raise ValueError("backward needs the cache of a forward pass on this network")

    def _bn_back(self, name, dout, cache, grads):
        dx, dg, db = L.batchnorm_backward(dout, cache)
        if grads is not None:
            grads[f"{name}/gamma"], grads[f"{name}/beta"] = dg, db
        return dx


class Generator(_Net):
    """conv3x3+ReLU head, residual body, global skip, x2 sub-pixel stages, conv3x3 tail.

    The output is linear (no squashing); callers clamp when producing images.
    """

    def __init__(self, config: GeneratorConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        c, f = config.channels, config.n_features
        rng = make_rng(seed, 101)
        self._add_conv(rng, "head", 3, c, f, dtype)
        for i in range(config.n_res_blocks):
            self._add_conv(rng, f"res{i}/conv1", 3, f, f, dtype)
            self._add_bn(f"res{i}/bn1", f, dtype)
            self._add_conv(rng, f"res{i}/conv2", 3, f, f, dtype)
            self._add_bn(f"res{i}/bn2", f, dtype)
        for k in range(config.n_stages):
            self._add_conv(rng, f"up{k}", 3, f, 4 * f, dtype)
        self._add_conv(rng, "tail", 3, f, c, dtype)
        if config.tail_init == "zero":
            # drawn then overwritten, so every other tensor matches the "he" init
            self.params["tail/w"][:] = 0
            self.params["tail/b"][:] = config.tail_bias

    def forward(self, x, train=False, update_stats=True):
        cfg = self.config
        if x.ndim != 4 or x.shape[3] != cfg.channels:
            raise ValueError(f"generator expects (B, H, W, {cfg.channels}) input, got {x.shape}")
        x = np.asarray(x, dtype=self.dtype)
        caches = {}
        h, caches["head"] = self._conv("head", x)
        h, caches["head_relu"] = L.relu_forward(h)
        skip = h
        for i in range(cfg.n_res_blocks):
            n = f"res{i}"
            y, caches[f"{n}/conv1"] = self._conv(f"{n}/conv1", h)
            y, caches[f"{n}/bn1"] = self._bn(f"{n}/bn1", y, train, update_stats)
            y, caches[f"{n}/relu"] = L.relu_forward(y)
            y, caches[f"{n}/conv2"] = self._conv(f"{n}/conv2", y)
            y, caches[f"{n}/bn2"] = self._bn(f"{n}/bn2", y, train, update_stats)
            h = h + y
        h = h + skip
        for k in range(cfg.n_stages):
            h, caches[f"up{k}"] = self._conv(f"up{k}", h)
            h = L.subpixel_shuffle(h, 2)
            h, caches[f"up{k}/relu"] = L.relu_forward(h)
        out, caches["tail"] = self._conv("tail", h)
        return out, caches

    def __call__(self, x):
        return self.forward(x, train=False)[0]

    def backward(self, caches, dout):
        cfg = self.config
        self._require_cache(caches, "tail")
        grads = {}
        d = self._conv_back("tail", dout, caches["tail"], grads)
        for k in reversed(range(cfg.n_stages)):
            d = L.relu_backward(d, caches[f"up{k}/relu"])
            d = L.subpixel_unshuffle(d, 2)
            d = self._conv_back(f"up{k}", d, caches[f"up{k}"], grads)
        d_skip = d
        for i in reversed(range(cfg.n_res_blocks)):
            n = f"res{i}"
            dy = self._bn_back(f"{n}/bn2", d, caches[f"{n}/bn2"], grads)
            dy = self._conv_back(f"{n}/conv2", dy, caches[f"{n}/conv2"], grads)
            dy = L.relu_backward(dy, caches[f"{n}/relu"])
            dy = self._bn_back(f"{n}/bn1", dy, caches[f"{n}/bn1"], grads)
            dy = self._conv_back(f"{n}/conv1", dy, caches[f"{n}/conv1"], grads)
            d = d + dy
        d = d + d_skip
        d = L.relu_backward(d, caches["head_relu"])
        dx = self._conv_back("head", d, caches["head"], grads)
        return grads, dx


class Discriminator(_Net):
    """Strided 4x4 conv stack, a 3-conv residual block, dense layer and sigmoid."""

    def __init__(self, config: DiscriminatorConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = make_rng(seed, 202)
        feats = config.features
        cin = config.channels
        for i, f in enumerate(feats):
            self._add_conv(rng, f"conv{i}", config.kernel, cin, f, dtype)
            if i > 0:
                self._add_bn(f"bn{i}", f, dtype)
            cin = f
        for j in range(3):
            self._add_conv(rng, f"res/conv{j}", 3, cin, cin, dtype)
            self._add_bn(f"res/bn{j}", cin, dtype)
        side = config.spatial_trace()[-1]
        self.params["dense/w"] = L.he_uniform(rng, (side * side * cin, 1), dtype)
        self.params["dense/b"] = np.zeros(1, dtype)

    def forward(self, x, train=False, update_stats=True):
        """Returns per-item probabilities of shape (B,)."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_size or x.shape[2] != cfg.input_size or x.shape[3] != cfg.channels:
            raise ValueError(
                f"discriminator expects (B, {cfg.input_size}, {cfg.input_size}, {cfg.channels}), got {x.shape}"
            )
        x = np.asarray(x, dtype=self.dtype)
        caches = {}
        h = x
        slope = cfg.leaky_slope
        for i, s in enumerate(cfg.strides):
            h, caches[f"conv{i}"] = self._conv(f"conv{i}", h, s)
            if i > 0:
                h, caches[f"bn{i}"] = self._bn(f"bn{i}", h, train, update_stats)
            h, caches[f"act{i}"] = L.leaky_relu_forward(h, slope)
        skip = h
        for j in range(3):
            h, caches[f"res/conv{j}"] = self._conv(f"res/conv{j}", h)
            h, caches[f"res/bn{j}"] = self._bn(f"res/bn{j}", h, train, update_stats)
            if j < 2:
                h, caches[f"res/act{j}"] = L.leaky_relu_forward(h, slope)
        h, caches["res/out"] = L.leaky_relu_forward(h + skip, slope)
        z, caches["dense"] = L.dense_forward(h, self.params["dense/w"], self.params["dense/b"])
        p = L.sigmoid(z[:, 0])
        caches["p"] = p
        return p, caches

    def __call__(self, x):
        return self.forward(x, train=False)[0]

    def backward(self, caches, dp, input_only=False):
        """With ``input_only`` the returned grads dict is empty."""
        self._require_cache(caches, "p")
        grads = None if input_only else {}
        dz = L.sigmoid_backward(dp, caches["p"])[:, None]
        d, dw, db = L.dense_backward(dz, caches["dense"])
        if grads is not None:
            grads["dense/w"], grads["dense/b"] = dw, db
        d = L.leaky_relu_backward(d, caches["res/out"])
        d_skip = d
        for j in reversed(range(3)):
            if j < 2:
                d = L.leaky_relu_backward(d, caches[f"res/act{j}"])
            d = self._bn_back(f"res/bn{j}", d, caches[f"res/bn{j}"], grads)
            d = self._conv_back(f"res/conv{j}", d, caches[f"res/conv{j}"], grads)
        d = d + d_skip
        for i in reversed(range(len(self.config.strides))):
            d = L.leaky_relu_backward(d, caches[f"act{i}"])
            if i > 0:
                d = self._bn_back(f"bn{i}", d, caches[f"bn{i}"], grads)
            d = self._conv_back(f"conv{i}", d, caches[f"conv{i}"], grads)
        return grads or {}, d


class FeatureExtractor(_Net):
    """Truncated VGG19-shaped stack, never trained.

    ``layer_index`` counts entries of the VGG19 layer list (convs, ReLUs and
    pools), so the default 12 ends at relu3_1 after two pooling stages.
    Widths are ``base_width`` times the VGG19 multipliers (64 gives the real
    network). Weights are He-uniform from ``seed`` unless ``weights_path``
    points at a flat float32 little-endian file holding, for each conv in
    order, its (3, 3, c_in, c_out) kernel followed by its c_out biases.
    """

    def __init__(self, config: FeatureConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.in_channels = config.channels
        convs = []
        cin = config.channels
        for name in config.layer_names:
            if name.startswith("conv"):
                block = int(name[4])
                cout = config.base_width * VGG19_WIDTH[block]
                convs.append((name, cin, cout))
                cin = cout
        self.out_channels = cin
        if config.weights_path:
            self._load_flat(config.weights_path, convs, dtype)
        else:
            rng = make_rng(config.seed, 303)
            for name, ci, co in convs:
                self._add_conv(rng, name, 3, ci, co, dtype)

    def _load_flat(self, path, convs, dtype):
        if not os.path.isfile(path):
            raise FileNotFoundError(f"feature weight file not found: {path}")
        flat = np.fromfile(path, dtype="<f4")
        # the first conv may have been trained on RGB; grayscale input is replicated
        for first_cin in (convs[0][1], 3):
            need = sum(9 * ci * co + co for _, ci, co in [(convs[0][0], first_cin, convs[0][2])] + convs[1:])
            if need == flat.size:
                break
        else:
            raise ValueError(f"{path}: {flat.size} values do not match the configured feature stack")
        self.in_channels = first_cin
        pos = 0
        for i, (name, ci, co) in enumerate(convs):
            if i == 0:
                ci = first_cin
            n = 9 * ci * co
            self.params[f"{name}/w"] = flat[pos : pos + n].reshape(3, 3, ci, co).astype(dtype)
            pos += n
            self.params[f"{name}/b"] = flat[pos : pos + co].astype(dtype)
            pos += co

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        caches = {"tile": False}
        if x.shape[3] != self.in_channels:
            if x.shape[3] == 1:
                x = np.repeat(x, self.in_channels, axis=3)
                caches["tile"] = True
            else:
                raise ValueError(f"feature extractor expects {self.in_channels} channels, got {x.shape[3]}")
        h = x
        for name in self.config.layer_names:
            if name.startswith("conv"):
                h, caches[name] = self._conv(name, h)
            elif name.startswith("relu"):
                h, caches[name] = L.relu_forward(h)
            else:
                h, caches[name] = L.maxpool2_forward(h)
        return h, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, dout):
        """Input gradient only; returns ``({}, dx)`` since nothing here is trained."""
        self._require_cache(caches, "tile")
        d = dout
        for name in reversed(self.config.layer_names):
            if name.startswith("conv"):
                d = self._conv_back(name, d, caches[name], None)
            elif name.startswith("relu"):
                d = L.relu_backward(d, caches[name])
            else:
                d = L.maxpool2_backward(d, caches[name])
        if caches["tile"]:
            d = d.sum(axis=3, keepdims=True)
        return {}, d
