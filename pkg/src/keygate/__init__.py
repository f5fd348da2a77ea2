"""Key-gated generative decoding.

A frozen reference autoencoder is extended with key-conditioned fuser
layers and identity-initialized fine-tuning layers, then fine-tuned so
that only holders of the correct 128-bit key decode at full quality.
Wrong keys, stripped fusers, and partial structure removal all degrade
output measurably, and a latent sign watermark survives decoding.
"""

from .errors import (
    CapacityError,
    ConfigurationError,
    FileFormatError,
    KeyFormatError,
    KeygateError,
    ResourceLimitError,
    TrainingError,
)
from .keys import (
    CrackEstimate,
    FuserKey,
    RemovalHypothesis,
    combination_count,
    crack_time,
    enumerate_removals,
    generate_key,
    parse_key,
    sample_wrong_key,
)
from .data import DatasetSpec, generate_dataset, generate_image, split
from .model import (
    ArchConfig,
    DecodeResult,
    GatedDecoder,
    ReferenceAutoencoder,
    StructureConfig,
    build_gated,
    build_reference,
    decode,
)
from .training import TrainHParams, TrainReport, train_gated, train_reference
from .metrics import MetricsReport, bit_accuracy, evaluate_condition, feature_distance, psnr, ssim
from .watermark import WatermarkPayload, embed, extract, extract_from_latent, robustness_eval
from .attacks import (
    AttackSpec,
    apply_attack,
    brute_force_search,
    default_attack_suite,
    jpeg_proxy,
    partial_removal_attack,
    remove_fuser_attack,
    restoration_attack,
    wrong_key_attack,
)
from .fileio import (
    Checkpoint,
    RunConfig,
    load_checkpoint,
    load_image,
    load_run_config,
    parse_run_config,
    save_checkpoint,
    save_image,
)
from .estimators import KeyGatedEstimator, LatentCoder

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "AttackSpec",
    "CapacityError",
    "Checkpoint",
    "ConfigurationError",
    "CrackEstimate",
    "DatasetSpec",
    "DecodeResult",
    "FileFormatError",
    "FuserKey",
    "GatedDecoder",
    "KeyFormatError",
    "KeyGatedEstimator",
    "KeygateError",
    "LatentCoder",
    "MetricsReport",
    "ReferenceAutoencoder",
    "RemovalHypothesis",
    "ResourceLimitError",
    "RunConfig",
    "StructureConfig",
    "TrainHParams",
    "TrainReport",
    "TrainingError",
    "WatermarkPayload",
    "apply_attack",
    "bit_accuracy",
    "brute_force_search",
    "build_gated",
    "build_reference",
    "combination_count",
    "crack_time",
    "decode",
    "default_attack_suite",
    "embed",
    "enumerate_removals",
    "evaluate_condition",
    "extract",
    "extract_from_latent",
    "feature_distance",
    "generate_dataset",
    "generate_image",
    "generate_key",
    "jpeg_proxy",
    "load_checkpoint",
    "load_image",
    "load_run_config",
    "parse_key",
    "parse_run_config",
    "partial_removal_attack",
    "psnr",
    "remove_fuser_attack",
    "restoration_attack",
    "robustness_eval",
    "sample_wrong_key",
    "save_checkpoint",
    "save_image",
    "split",
    "ssim",
    "train_gated",
    "train_reference",
    "wrong_key_attack",
]
