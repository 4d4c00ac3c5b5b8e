"""Subject-invariant representation learning for multi-subject time series."""

from .analysis import (
    AnovaResult,
    PairwiseComparison,
    StatTestResult,
    UnsupportedRangeError,
    accuracy,
    anova_oneway,
    export_latents,
    pca_fit,
    subject_dispersion,
    tukey_hsd,
)
from .autodiff import Var, backward, finite_difference_check, make_rng
from .data import (
    Dataset,
    DatasetFormatError,
    Sample,
    SynthConfig,
    load_dataset,
    min_max_normalize,
    save_dataset,
    split_by_subject,
    synth_generate,
)
from .losses import (
    KernelConfig,
    SubjectBatch,
    classification_loss,
    combined_pretrain_loss,
    domain_loss,
    gradient_reversal,
    mmd_pairwise,
    mmd_rbf,
    recon_loss,
    triplet_loss,
)
from .models import (
    Model,
    ModelSpec,
    ShapeMismatchError,
    SpecValidationError,
    auto_spec,
    build,
    load_checkpoint,
    preset_spec,
    save_checkpoint,
)
from .training import (
    AggregateReport,
    TrainingConfig,
    TrainingDivergedError,
    TrialReport,
    config_for_variant,
    evaluate,
    finetune,
    person_specific,
    person_specific_trials,
    pretrain,
    run_trial,
    run_trials,
)

__version__ = "0.1.0"
