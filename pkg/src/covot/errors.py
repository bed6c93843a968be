"""Error types raised by the toolkit.

Every error carries its short name in ``name`` so front ends can report it
verbatim.
"""
from __future__ import annotations


class CovotError(Exception):
    """Base class for all toolkit errors."""

    name = "CovotError"

    def __init__(self, message: str = "", **info):
        super().__init__(message or self.name)
        self.info = info

    def to_dict(self) -> dict:
        out = {"error": self.name, "message": str(self)}
        for key, val in self.info.items():
            if hasattr(val, "tolist"):
                val = val.tolist()
            out[key] = val
        return out


class PreconditionError(CovotError):
    """Input violates a documented precondition."""

    name = "PreconditionError"


class NonSymmetric(PreconditionError):
    name = "NonSymmetric"


class NegativeEigenvalue(PreconditionError):
    name = "NegativeEigenvalue"


class SingularMatrix(PreconditionError):
    name = "SingularMatrix"


class DegenerateCovariance(PreconditionError):
    """Covariance has rank below the ambient dimension.

    ``info`` holds ``rank`` and ``basis`` (orthonormal columns spanning the
    image) so callers can restrict to the image subspace.
    """

    name = "DegenerateCovariance"


class SizeExceeded(PreconditionError):
    name = "SizeExceeded"


class InfeasibleWeights(PreconditionError):
    name = "InfeasibleWeights"


class UnsupportedGeometry(PreconditionError):
    name = "UnsupportedGeometry"


class OutOfRange(PreconditionError):
    name = "OutOfRange"


class NotSymmetric(PreconditionError):
    """Measure fails the d-fold reflection symmetry check."""

    name = "NotSymmetric"


class DegenerateEnsemble(PreconditionError):
    name = "DegenerateEnsemble"


class NoConvergence(CovotError):
    """Iterative solver stopped without meeting its tolerance.

    ``info`` holds ``residual`` and, when available, ``last`` (the final
    iterate or partial result).
    """

    name = "NoConvergence"


class UnstableStep(CovotError):
    name = "UnstableStep"
