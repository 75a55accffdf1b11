"""Deterministic gradient inversion for ReLU fully connected networks, and a
gradient-preserving defense for batches without first-layer exclusivity."""

from .attack import AttackOptions, LossProfile, ReconResult, mask_gradient, reconstruct
from .defense import (
    BoundReport,
    PerturbationSubspace,
    perturbation_lower_bound,
    perturbation_subspace,
    sample_artifact_batch,
    verify_gradient_invariance,
)
from .errors import GradLeakError, NotApplicable
from .exclusivity import ExclusivityState, State, audit_batch, classify_batch, exan_counts
from .metrics import label_accuracy, match_and_score, mse, psnr
from .model import (
    Batch,
    FcnParams,
    GradientBundle,
    average_gradient,
    dpsgd_obfuscate,
    forward,
    generate_model,
    per_sample_gradient,
    remove_first_relu,
)

__version__ = "0.1.0"

__all__ = [
    "AttackOptions",
    "Batch",
    "BoundReport",
    "ExclusivityState",
    "FcnParams",
    "GradLeakError",
    "GradientBundle",
    "LossProfile",
    "NotApplicable",
    "PerturbationSubspace",
    "ReconResult",
    "State",
    "audit_batch",
    "average_gradient",
    "classify_batch",
    "dpsgd_obfuscate",
    "exan_counts",
    "forward",
    "generate_model",
    "label_accuracy",
    "mask_gradient",
    "match_and_score",
    "mse",
    "per_sample_gradient",
    "perturbation_lower_bound",
    "perturbation_subspace",
    "psnr",
    "reconstruct",
    "remove_first_relu",
    "sample_artifact_batch",
    "verify_gradient_invariance",
]
