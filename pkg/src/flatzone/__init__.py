"""Flat-zone solutions of -Δu + h(u)|∇u|² = λf with h singular at σ."""
__version__ = "0.1.0"

from .core import (DomainError, IntegrabilityReport, Nonlinearity, SingularLimit, Transform,
                   TruncatedNonlinearity, classify, touching_case, truncate)

__all__ = ["DomainError", "IntegrabilityReport", "Nonlinearity", "SingularLimit", "Transform",
           "TruncatedNonlinearity", "classify", "touching_case", "truncate", "__version__"]
