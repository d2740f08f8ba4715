"""Hybrid neural fields with polynomial-fitting derivative operators."""

from .errors import HNFDError
from .field import FieldConfig, HybridField, build_field, load_checkpoint, save_checkpoint
from .kernels import BACKEND
from .operators import (
    DerivativeEstimate,
    NeighborhoodSpec,
    OperatorSpec,
    fd_gradient,
    fd_laplacian,
    gad_gradient,
    polyfit_gradient,
    polyfit_hessian,
    sample_neighborhood,
    sfd_gradient,
    solve_least_squares,
    telescopic_search,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "HNFDError", "FieldConfig", "HybridField", "build_field", "load_checkpoint",
    "save_checkpoint", "DerivativeEstimate", "NeighborhoodSpec", "OperatorSpec", "fd_gradient",
    "fd_laplacian", "gad_gradient", "polyfit_gradient", "polyfit_hessian", "sample_neighborhood",
    "sfd_gradient", "solve_least_squares", "telescopic_search",
]
