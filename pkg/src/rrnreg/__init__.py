"""Unsupervised coarse-to-fine deformable 3D image registration.

Multiscale Siamese features, normalized local cost-correlation volumes and
per-level field estimators predict dense displacement fields, trained with a
local cross-correlation + total variation objective and evaluated by landmark
target registration error.
"""

from .costvolume import CostVolume, correlate, correlate_naive, neighborhood_offsets, normalize_features
from .diffcore import GradReport, concat_channels, conv3, gradcheck, leaky_relu, upsample2x, warp
from .evalkit import SyntheticCase, TreReport, epe, make_synthetic_case, report_csv, report_table, tre
from .losses import LossValue, lcc, total_loss, tv
from .rrn import (
    FeaturePyramid,
    ModelConfig,
    ModelParams,
    RegistrationResult,
    estimate_final,
    estimate_initial,
    estimate_intermediate,
    extract_pyramid,
    init_params,
    register,
    register_tensors,
)
from .trainer import (
    AdamState,
    CheckpointBundle,
    TrainConfig,
    TrainHistory,
    adam_step,
    init_adam_state,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .voldata import (
    CropBox,
    Dvf,
    GridTransform,
    LandmarkSet,
    Volume,
    clip_intensities,
    crop,
    grid_transform_for,
    load_dvf,
    load_landmarks,
    load_volume,
    map_landmarks,
    resample,
    save_dvf,
    save_volume,
    zero_dvf,
)

__version__ = "0.1.0"
