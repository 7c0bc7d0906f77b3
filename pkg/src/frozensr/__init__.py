"""Residual-interpolation super-resolution for histopathology patches.

A bilinear upsample is corrected by an attention U-Net trained with a
weighted frequency-domain L1 loss; see the README for the pipeline.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DimensionError,
    FrozenSRError,
    ImageIOError,
    ParameterError,
    ShapeError,
    SizeError,
    TrainingError,
)
from .imagecore import (
    PatchManifest,
    PatchRecord,
    bicubic_upsample,
    bilinear_upsample,
    box_downsample,
    extract_patches,
    load_image,
    save_image,
    stitch_grid,
)
from .metrics import MetricsRecord, mse, psnr, ssim_global, ssim_windowed
from .model import Checkpoint, ModelConfig, init_parameters, load_checkpoint, model_forward, save_checkpoint
from .spectral import build_weight_map, dft2, wfe_gradient, wfe_loss
from .training import TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"
