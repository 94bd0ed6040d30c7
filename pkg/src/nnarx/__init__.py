"""Stability-certified Neural NARX identification."""

__version__ = "0.1.0"

from .datasets import Dataset, Trajectory, build_dataset
from .estimator import NnarxRegressor
from .exceptions import (
    ConfigError,
    ConvergenceFailure,
    InvalidArgument,
    InvalidModel,
    NnarxError,
    NormalizationError,
    NumericDivergence,
    SchemaError,
    TrainingFailure,
)
from .metrics import EvalReport, evaluate, fit_index
from .model import FfnnParams, Layer, NnarxModel, NormalizationStats, simulate_open_loop, step
from .plants import PhParams, PhPlant, SurrogatePlant
from .signals import MprsConfig, mprs_generate
from .stability import CertificateReport, Verdict, certify, contraction_probe, spectral_norm
from .training import ModelSpec, PenaltyConfig, TrainConfig, train
