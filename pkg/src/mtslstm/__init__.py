"""Multi-timescale LSTM sequence models with Inverse Gamma timescale control."""

__version__ = "0.1.0"

from .timescale import (  # noqa: E402
    InverseGammaParams,
    TimescaleSpec,
    assign_timescales,
    estimate_timescale,
    forget_bias,
    forgetting_time,
    inv_gamma_cdf,
    inv_gamma_pdf,
    inv_gamma_quantile,
    mixture_decay,
    sample_inv_gamma,
)
from .estimators import DyckLSTMClassifier, MultiTimescaleLanguageModel, TimescaleDistributionFit  # noqa: E402

__all__ = [
    "InverseGammaParams",
    "TimescaleSpec",
    "assign_timescales",
    "estimate_timescale",
    "forget_bias",
    "forgetting_time",
    "inv_gamma_cdf",
    "inv_gamma_pdf",
    "inv_gamma_quantile",
    "mixture_decay",
    "sample_inv_gamma",
    "DyckLSTMClassifier",
    "MultiTimescaleLanguageModel",
    "TimescaleDistributionFit",
]
