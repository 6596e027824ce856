"""Bidirectional unsupervised domain adaptation segmentation on a synthetic
two-domain benchmark: disentangled content/pattern codes, a shared recomposing
generator, adversarial cross-domain translation, and drop-based evaluation.
"""

from .data import (
    AppearanceParams,
    DatasetBundle,
    ImageSample,
    Manifest,
    SynthConfig,
    augment,
    load_dataset,
    save_dataset,
    split_folds,
    synth_dataset,
)
from .losses import (
    LossParts,
    LossReport,
    LossWeights,
    cpc_loss,
    cycle_loss,
    gan_loss_d,
    gan_loss_g,
    lc_loss,
    seg_loss,
    total_loss,
)
from .networks import NetworkConfig, Networks, adain, build_networks
from .train import (
    Checkpoint,
    TrainConfig,
    Trainer,
    infer,
    load_checkpoint,
    poly_decay,
    save_checkpoint,
    train,
    train_upper_bound,
)

__version__ = "0.1.0"

__all__ = [
    "AppearanceParams",
    "Checkpoint",
    "DatasetBundle",
    "ImageSample",
    "LossParts",
    "LossReport",
    "LossWeights",
    "Manifest",
    "NetworkConfig",
    "Networks",
    "SynthConfig",
    "TrainConfig",
    "Trainer",
    "adain",
    "augment",
    "build_networks",
    "cpc_loss",
    "cycle_loss",
    "gan_loss_d",
    "gan_loss_g",
    "infer",
    "lc_loss",
    "load_checkpoint",
    "load_dataset",
    "poly_decay",
    "save_checkpoint",
    "save_dataset",
    "seg_loss",
    "split_folds",
    "synth_dataset",
    "total_loss",
    "train",
    "train_upper_bound",
]
