"""Residual-minimizing interpolation of parameterized time-dependent models."""

from .resmin_py import (
    KINETICS_S_RANGE,
    Interpolator,
    KlField,
    SolveResult,
    __version__,
    integrate_kinetics,
    kinetics_rhs,
)

__all__ = [
    "KINETICS_S_RANGE",
    "Interpolator",
    "KlField",
    "SolveResult",
    "__version__",
    "integrate_kinetics",
    "kinetics_rhs",
]
