"""Severity scoring of psoriasis from regional photo sets with attention MIL."""

from .pasi import (
    PASI_MAX,
    PASI_MIN,
    REGIONS,
    PasiValidationError,
    Region,
    SeverityComponents,
    area_fraction_to_score,
    regional_pasi,
    total_pasi,
)
from .model import EncoderConfig, ModelConfig, PsoNet, RegionalModel, init_params, load_model, save_model
from .training import TrainConfig, fit, predict_arrays
from .metrics import icc, mae_std, build_report
from .interpret import explain_set, grad_ram, attention_quartiles
from .estimator import PsoNetRegressor

__version__ = "0.1.0"
