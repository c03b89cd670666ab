"""Margin InfoNCE contrastive learning with equivalent-rule scaling.

The library couples a contrastive loss whose margin follows
m = tau*log(alpha/K) with the machinery to verify, at desk scale, that the
induced mutual-information bound and gradient-norm bound do not depend on
the physical negative count K.
"""

from .data import AugmentedVectors, DatasetConfig, ToyInstanceDataset, make_toy_dataset, make_views
from .encoder import (
    MlpParams,
    MomentumEncoder,
    encode,
    encode_backward,
    encode_backward_batch,
    encode_batch,
    init_mlp_params,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
)
from .estimator import ContrastiveEncoder, LinearProbe
from .loss import (
    GradNormBoundCheck,
    LossConfig,
    LossGrad,
    QueryInstance,
    batch_infonce,
    eqco_margin,
    grad_norm_bound_expectation,
    grad_norm_bound_pointwise,
    infonce_forward,
    infonce_forward_weighted,
    infonce_grad,
)
from .mi import (
    BoundReport,
    CorrelatedGaussian,
    McEstimate,
    empirical_bound,
    log_density_ratio,
    optimal_loss_mc,
    theoretical_bound_mc,
    true_mi,
)
from .numerics import l2_normalize, log1p_exp, log_sum_exp, normalize_rows
from .rng import SeededRng, sample_std_gaussian, unit_sphere
from .training import (
    MemoryBank,
    StepRecord,
    TrainConfig,
    TrainResult,
    linear_probe,
    lr_at_step,
    negatives_from_bank,
    negatives_in_batch,
    scaled_lr,
    simo_train_config,
    train,
)
from .validation import ConfigError, NumericError

__version__ = "0.1.0"

__all__ = [
    "AugmentedVectors",
    "BoundReport",
    "ConfigError",
    "ContrastiveEncoder",
    "CorrelatedGaussian",
    "DatasetConfig",
    "GradNormBoundCheck",
    "LinearProbe",
    "LossConfig",
    "LossGrad",
    "McEstimate",
    "MemoryBank",
    "MlpParams",
    "MomentumEncoder",
    "NumericError",
    "QueryInstance",
    "SeededRng",
    "StepRecord",
    "ToyInstanceDataset",
    "TrainConfig",
    "TrainResult",
    "batch_infonce",
    "empirical_bound",
    "encode",
    "encode_backward",
    "encode_backward_batch",
    "encode_batch",
    "eqco_margin",
    "grad_norm_bound_expectation",
    "grad_norm_bound_pointwise",
    "infonce_forward",
    "infonce_forward_weighted",
    "infonce_grad",
    "init_mlp_params",
    "l2_normalize",
    "linear_probe",
    "load_checkpoint",
    "log1p_exp",
    "log_density_ratio",
    "log_sum_exp",
    "lr_at_step",
    "make_toy_dataset",
    "make_views",
    "momentum_update",
    "negatives_from_bank",
    "negatives_in_batch",
    "normalize_rows",
    "optimal_loss_mc",
    "sample_std_gaussian",
    "save_checkpoint",
    "scaled_lr",
    "simo_train_config",
    "theoretical_bound_mc",
    "train",
    "true_mi",
    "unit_sphere",
]
