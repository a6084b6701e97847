"""Sward composition, herbage mass, and height estimation from canopy images.

Pipeline: contrastive pretraining of a small conv encoder on unlabeled
images (mixed anchors against unmixed positives over in-batch similarities),
supervised fine-tuning with an RMSE objective, and an evaluation suite
reporting per-species composition RMSE, herbage-mass RMSE, relative mass
error, and height RMSE.
"""
from .augment import AugmentPolicy, MixResult, mixup, resize_bilinear, two_views
from .data import (
    ImageError,
    Manifest,
    ManifestError,
    NormStats,
    SampleRecord,
    SCHEMAS,
    compute_norm_stats,
    decode_image,
    load_manifest,
    load_unlabeled,
    synth_dataset,
    write_ppm,
)
from .imix import ContrastiveConfig, imix_loss, npair_logits, pretrain_step
from .metrics import (
    CompatibilityError,
    EmptySelectionError,
    MetricsReport,
    Prediction,
    composition_rmse,
    dump_predictions_csv,
    evaluate,
    height_error,
    hre,
    hrmse,
    predict_paths,
    predict_records,
    species_mass,
)
from .model import (
    Checkpoint,
    CheckpointError,
    ModelConfig,
    build,
    denormalize,
    encode,
    load_checkpoint,
    predict_composition,
    predict_scalars,
    project,
    save_checkpoint,
)
from .optim import SgdMomentum
from .rng import Rng
from .tensor import Tape, Tensor, backward
from .train import (
    EpochEntry,
    TrainConfig,
    TrainLog,
    TransferError,
    finetune,
    pretrain,
    rmse_objective,
    transfer_weights,
)

__version__ = "0.1.0"
