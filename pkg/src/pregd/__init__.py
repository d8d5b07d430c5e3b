"""Preprocess-then-optimize in-context learning for sparse linear regression."""
from .attention import AttentionModel, assemble_icl_model, forward, head_importance, mask_head
from .estimators import (
    GDRegressor,
    LassoCD,
    MinNormOLS,
    PreGDRegressor,
    RidgeClosedForm,
    gd_solve,
    lasso_cd,
    ols_solve,
    pre_gd_solve,
    ridge_solve,
)
from .linalg import ContractViolation, RandomSource
from .preprocess import CorrelationReweighter
from .tasks import InContextDataset, SparseLinearTask, build_prompt, sample_dataset, sample_task

__all__ = [
    "AttentionModel", "ContractViolation", "CorrelationReweighter", "GDRegressor", "InContextDataset",
    "LassoCD", "MinNormOLS", "PreGDRegressor", "RandomSource", "RidgeClosedForm", "SparseLinearTask",
    "assemble_icl_model", "build_prompt", "forward", "gd_solve", "head_importance", "lasso_cd", "mask_head",
    "ols_solve", "pre_gd_solve", "ridge_solve", "sample_dataset", "sample_task",
]
