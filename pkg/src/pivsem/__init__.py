"""MIIV/PIV estimation of structural equation models with mixed ordinal and continuous variables."""

from __future__ import annotations

__version__ = "0.1.0"

from .modelir import ModelSpec, build_system, parse_model, serialize_model, shea_r2
from .moments1 import StageOneStats, VariableMeta, assemble_omega
from .pivfit import EstimationError, FitResult, MomentInput, fit, fit_moments, implied_moments
from .reparam import ReparamSpec, ReparamStats, transform_moments
from .simlab import StudyConfig, StudySummary, generate_dataset, benchmark_design, run_study

__all__ = [
    "__version__",
    "ModelSpec",
    "parse_model",
    "serialize_model",
    "build_system",
    "shea_r2",
    "VariableMeta",
    "StageOneStats",
    "assemble_omega",
    "ReparamSpec",
    "ReparamStats",
    "transform_moments",
    "MomentInput",
    "FitResult",
    "EstimationError",
    "fit",
    "fit_moments",
    "implied_moments",
    "StudyConfig",
    "StudySummary",
    "generate_dataset",
    "benchmark_design",
    "run_study",
]
