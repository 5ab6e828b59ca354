"""Adaptive multivariate functional EWMA control charting."""

from amfewma.basis import BasisSystem, GramMatrices, build_basis, eval_basis, gram_matrices, inner_product
from amfewma.smoothing import CoefficientProfile, DiscreteProfile, fit_penalized, gcv_select, smooth_unit
from amfewma.mfpca import MFPCAModel, fit_mfpca

__version__ = "0.1.0"

__all__ = [
    "BasisSystem",
    "CoefficientProfile",
    "DiscreteProfile",
    "GramMatrices",
    "MFPCAModel",
    "build_basis",
    "eval_basis",
    "fit_mfpca",
    "fit_penalized",
    "gcv_select",
    "gram_matrices",
    "inner_product",
    "smooth_unit",
]
