"""Deep symbolic regression at desk scale."""

from .policy import Constraints, PolicyNet, SampledBatch, sample_expression
from .tokens import OPERATORS, Expression, Node, TokenSet, columns_of, decode, encode, is_complete
from .search import (DsrConfig, DsrModel, TrainResult, fit, nrmse, optimize_constants, policy_update, reward,
                    risk_filter, train)

__all__ = [
    "OPERATORS", "Constraints", "DsrConfig", "DsrModel", "Expression", "Node", "PolicyNet", "SampledBatch",
    "TokenSet", "TrainResult", "columns_of", "decode", "encode", "fit", "is_complete", "nrmse",
    "optimize_constants", "policy_update", "reward", "risk_filter", "sample_expression", "train",
]
