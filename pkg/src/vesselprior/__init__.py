"""Vessel segmentation regularized by a learned latent shape prior.

A semi-overcomplete mask auto-encoder is trained on ground-truth vessel
masks; its frozen encoder then penalizes the cosine distance between the
codes of predicted and true masks while a U-Net is trained.
"""

from .architectures import (
    ConvAutoEncoder,
    LatentCode,
    ModelConfig,
    SemiOvercompleteAutoEncoder,
    UNet,
    build_model,
    receptive_fields,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    AugmentationConfig,
    FoldSplit,
    ImageSample,
    augment,
    generate_synthetic,
    load_drive,
    load_ircadb_slices,
    make_folds,
)
from .errors import (
    ConfigError,
    DivergenceError,
    IngestionError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .losses import reconstruction_loss, shape_prior_loss, total_loss, weighted_bce
from .metrics import CaseMetrics, MetricsReport, assd, avd, dice, evaluate_case, extract_surface, hausdorff
from .training import TrainConfig, cross_validate, evaluate, train_autoencoder, train_segmenter

__version__ = "0.1.0"
