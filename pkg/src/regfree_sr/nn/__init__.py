from .checkpoint import NetworkParams, load_checkpoint, save_checkpoint
from .layers import subpixel_shuffle, subpixel_unshuffle
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    FeatureConfig,
    FeatureExtractor,
    Generator,
    GeneratorConfig,
)
