"""Gradient-sparsity attack and defense laboratory for federated learning."""

from .attack import PairsParams, QbiParams, pairs_init, qbi_bias, qbi_init, trap_weights_init
from .defense import AggpConfig, aggp_prune, p_keep
from .extraction import disaggregate, invert_batchnorm, invert_layernorm, match_reconstructions
from .metrics import (
    ExtractionMetrics,
    aggregate_ci,
    expected_A,
    expected_P,
    expected_R,
    observed_metrics,
)
from .model import LinearLayer, MaliciousModel, compute_gradients, forward
from .numerics import RngStream, matmul, normal_quantile

__version__ = "0.1.0"
