"""Convergent unrolled half-quadratic splitting for non-blind deconvolution."""

from .errors import (ConvergenceError, DecunError, DegenerateReferenceError, DimensionError,
                     DivergenceError, IllPosedError, ImageFormatError, ModelFileError,
                     ModelValidityError, NumericalInstabilityError, ParameterError)
from .hqs import HqsConfig, gradient_filters, hqs_run, solve_u
from .network import DecunModel, ScheduleSpec, decun_forward, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "DecunError", "DegenerateReferenceError", "DimensionError",
    "DivergenceError", "IllPosedError", "ImageFormatError", "ModelFileError",
    "ModelValidityError", "NumericalInstabilityError", "ParameterError",
    "HqsConfig", "gradient_filters", "hqs_run", "solve_u",
    "DecunModel", "ScheduleSpec", "decun_forward", "load_model", "save_model",
]
