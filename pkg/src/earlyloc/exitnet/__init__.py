"""Multi-exit models, uncertainty scoring and the early-exit state machine."""

from .model import (
    DscpConfig,
    ExitBranch,
    ExitPolicy,
    ExitSetting,
    InferenceTrace,
    MultiExitModel,
    UjiConfig,
    build_depth_baseline,
    build_dscp_variant,
    build_reference_model,
    build_ujiloc_variant,
    infer_logits_with_exits,
    infer_with_exits,
    load_model,
    save_model,
)
from .training import (
    HyperParams,
    TrainingOrderError,
    head_accuracy,
    model_inputs,
    train_all_exits,
    train_baseline,
    train_exit_branch,
)
from .uncertainty import UncertaintyMethod, check_threshold, exit_decision, uncertainty_score

__all__ = [
    "DscpConfig",
    "ExitBranch",
    "ExitPolicy",
    "ExitSetting",
    "HyperParams",
    "InferenceTrace",
    "MultiExitModel",
    "TrainingOrderError",
    "UjiConfig",
    "UncertaintyMethod",
    "build_depth_baseline",
    "build_dscp_variant",
    "build_reference_model",
    "build_ujiloc_variant",
    "check_threshold",
    "exit_decision",
    "head_accuracy",
    "infer_logits_with_exits",
    "infer_with_exits",
    "load_model",
    "model_inputs",
    "save_model",
    "train_all_exits",
    "train_baseline",
    "train_exit_branch",
    "uncertainty_score",
]
