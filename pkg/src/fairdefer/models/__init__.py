from fairdefer.models.bnn import (
    BnnConfig, BnnPosterior, bnn_predict, bnn_train, kl_to_prior, uncertainty_from_stats,
)
from fairdefer.models.common import PROB_FLOOR, SystemPrediction, clamp, log_likelihood
from fairdefer.models.concrete import concrete_sample, hard_concrete
from fairdefer.models.losses import (
    DiForm,
    GateEstimator,
    LossKind,
    LossSpec,
    loss_defer,
    loss_fair_binary,
    loss_reject,
)
from fairdefer.models.ordinal import (
    OrdinalOutput,
    loss_fair_punt,
    loss_punt,
    ordinal_decisions,
    ordinal_outputs,
)
from fairdefer.models.posthoc import (
    Decision,
    PosthocConfig,
    ThresholdSet,
    apply_thresholds,
    posthoc_threshold_search,
)
from fairdefer.models.serialization import TrainedModel, load_model, save_model

__all__ = [
    "BnnConfig", "BnnPosterior", "bnn_predict", "bnn_train", "kl_to_prior", "uncertainty_from_stats",
    "PROB_FLOOR", "SystemPrediction", "clamp", "log_likelihood",
    "concrete_sample", "hard_concrete",
    "DiForm", "GateEstimator", "LossKind", "LossSpec",
    "loss_defer", "loss_fair_binary", "loss_reject",
    "OrdinalOutput", "loss_fair_punt", "loss_punt", "ordinal_decisions", "ordinal_outputs",
    "Decision", "PosthocConfig", "ThresholdSet", "apply_thresholds", "posthoc_threshold_search",
    "TrainedModel", "load_model", "save_model",
]
