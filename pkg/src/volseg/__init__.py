"""Volumetric multi-label segmentation with presence-weighted training.

The package trains a 3D fully convolutional network on cohorts of labeled
volumes where any subset of the class roster may be annotated per volume:
classes without a reference mask enter the loss with weight zero, so partial
annotations train the same multi-head network without masking tricks at the
data level.  Everything runs on numpy with an internal reverse-mode tape.

Typical flow: generate phantom cohorts, build a subset plan (concentrated or
distributed labeling at a fixed annotation budget), train, then evaluate
sliding-window Dice per class.  The `experiment` module wires those stages
into a reproducible (mode, budget, repetition) grid.
"""

from .data import (
    LabeledVolume,
    PhantomSpec,
    StructureSpec,
    default_desk_spec,
    drop_labels,
    generate_cohort,
    generate_phantom,
    load_cohort,
    load_volume,
    save_cohort,
    save_volume,
    tiny_phantom_spec,
)
from .evaluation import (
    AggregateRow,
    MetricsRecord,
    aggregate,
    binarize,
    dice,
    evaluate_volumes,
    infer_volume,
    mean_ci95,
)
from .experiment import (
    ExperimentConfig,
    derive_seed,
    desk_network_config,
    desk_trainer_config,
    load_experiment_config,
    run_experiment,
)
from .loss import PresenceMask, masked_multilabel_loss, presence_from_labels
from .network import (
    ModelParams,
    NetworkConfig,
    build_network,
    load_checkpoint,
    network_forward,
    save_checkpoint,
)
from .sampling import (
    DatasetIndex,
    SubsetPlan,
    apply_plan,
    check_plan,
    load_index,
    load_plan,
    sample_plan,
    save_index,
    save_plan,
)
from .tensor import Tape, Tensor, backward
from .training import AdamState, TrainerConfig, adam_step, sample_patch, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AggregateRow",
    "DatasetIndex",
    "ExperimentConfig",
    "LabeledVolume",
    "MetricsRecord",
    "ModelParams",
    "NetworkConfig",
    "PhantomSpec",
    "PresenceMask",
    "StructureSpec",
    "SubsetPlan",
    "Tape",
    "Tensor",
    "TrainerConfig",
    "adam_step",
    "aggregate",
    "apply_plan",
    "backward",
    "binarize",
    "build_network",
    "check_plan",
    "default_desk_spec",
    "derive_seed",
    "desk_network_config",
    "desk_trainer_config",
    "dice",
    "drop_labels",
    "evaluate_volumes",
    "generate_cohort",
    "generate_phantom",
    "infer_volume",
    "load_checkpoint",
    "load_cohort",
    "load_experiment_config",
    "load_index",
    "load_plan",
    "load_volume",
    "masked_multilabel_loss",
    "mean_ci95",
    "network_forward",
    "presence_from_labels",
    "run_experiment",
    "sample_patch",
    "sample_plan",
    "save_checkpoint",
    "save_cohort",
    "save_index",
    "save_plan",
    "save_volume",
    "tiny_phantom_spec",
    "train",
]
