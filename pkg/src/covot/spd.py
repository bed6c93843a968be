"""Dense symmetric-matrix algebra.

Square roots, logarithms, powers and norms of symmetric positive
(semi-)definite matrices, and the affine-invariant geodesic

    C_t = C0^{1/2} (C0^{-1/2} C1 C0^{-1/2})^t C0^{1/2},

which is the covariance part of the moment geodesic between two centred
Gaussians with equal means.  All routines work on the explicitly
symmetrized matrix and use ``numpy.linalg.eigh``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import NegativeEigenvalue, NonSymmetric, SingularMatrix, SizeExceeded

MAX_DIM = 64
ASYM_TOL = 1e-12
NEG_TOL = 1e-10
PD_REL = 1e-12

__all__ = [
    "SpdMatrix",
    "symmetrize",
    "as_symmetric",
    "eps_pd",
    "sym_eig",
    "sym_sqrt",
    "sym_invsqrt",
    "sym_log",
    "sym_exp",
    "spd_power",
    "spd_inv",
    "norms",
    "spd_geodesic",
    "spd_dist_sq",
    "psd_min_eig",
    "sym_part",
    "skew_part",
]


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Return (M + Mᵀ)/2."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def sym_part(M: np.ndarray) -> np.ndarray:
    return symmetrize(M)


def skew_part(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return 0.5 * (M - M.T)


def as_symmetric(C, tol: float = ASYM_TOL) -> np.ndarray:
    """Validate a square matrix and return its symmetrization.

    Raises
    ------
    NonSymmetric
        If ``‖C − Cᵀ‖_F > tol · ‖C‖_F``.
    SizeExceeded
        If the dimension exceeds 64.
    """
    if isinstance(C, SpdMatrix):
        return C.entries
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise NonSymmetric(f"expected a square matrix, got shape {C.shape}")
    if C.shape[0] > MAX_DIM:
        raise SizeExceeded(f"dimension {C.shape[0]} exceeds {MAX_DIM}", dim=C.shape[0])
    if not np.all(np.isfinite(C)):
        raise NonSymmetric("matrix has non-finite entries")
    scale = np.linalg.norm(C)
    asym = np.linalg.norm(C - C.T)
    if asym > tol * max(scale, np.finfo(float).tiny):
        raise NonSymmetric(f"relative asymmetry {asym / scale:.3e} exceeds {tol:g}",
                           asymmetry=float(asym / scale))
    return symmetrize(C)


def sym_eig(C) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    if isinstance(C, SpdMatrix):
        return C.eigenvalues, C.eigenvectors
    return np.linalg.eigh(as_symmetric(C))


def eps_pd(C) -> float:
    """Strict-positivity threshold ``1e-12 · ‖C‖₂``."""
    w, _ = sym_eig(C)
    return PD_REL * float(np.max(np.abs(w))) if w.size else 0.0


def _spectral_checked(C, strict: bool) -> Tuple[np.ndarray, np.ndarray]:
    w, V = sym_eig(C)
    norm2 = float(np.max(np.abs(w)))
    if w[0] < -NEG_TOL * norm2:
        raise NegativeEigenvalue(f"minimum eigenvalue {w[0]:.3e} is negative",
                                 min_eigenvalue=float(w[0]))
    if strict and (norm2 == 0.0 or w[0] <= PD_REL * norm2):
        raise SingularMatrix(f"minimum eigenvalue {w[0]:.3e} below eps_pd",
                             min_eigenvalue=float(w[0]))
    return w, V


def _apply(w: np.ndarray, V: np.ndarray, f) -> np.ndarray:
    return symmetrize((V * f(w)) @ V.T)


def sym_sqrt(C, strict: bool = False) -> np.ndarray:
    """Symmetric PSD square root.

    Parameters
    ----------
    C : array_like
        Symmetric PSD matrix.
    strict : bool
        If True, eigenvalues below ``eps_pd`` are floored to ``eps_pd``
        before rooting; otherwise tiny negative round-off is set to zero.

    Returns
    -------
    ndarray
        ``S`` symmetric PSD with ``S @ S == C``.
    """
    w, V = _spectral_checked(C, strict=False)
    floor = eps_pd(C) if strict else 0.0
    return _apply(w, V, lambda x: np.sqrt(np.maximum(x, floor)))


def sym_invsqrt(C) -> np.ndarray:
    """``C^{-1/2}`` for strictly PD ``C``."""
    w, V = _spectral_checked(C, strict=True)
    return _apply(w, V, lambda x: 1.0 / np.sqrt(x))


def spd_inv(C) -> np.ndarray:
    """Inverse of a strictly PD matrix, returned exactly symmetric."""
    w, V = _spectral_checked(C, strict=True)
    return _apply(w, V, lambda x: 1.0 / x)


def sym_log(C) -> np.ndarray:
    """Matrix logarithm of a strictly PD matrix (symmetric result)."""
    w, V = _spectral_checked(C, strict=True)
    return _apply(w, V, np.log)


def sym_exp(L) -> np.ndarray:
    """Matrix exponential of a symmetric matrix."""
    w, V = np.linalg.eigh(as_symmetric(L))
    return _apply(w, V, np.exp)


def spd_power(C, t: float) -> np.ndarray:
    """Spectral power ``C^t``.

    Non-negative exponents accept rank-deficient PSD input; negative
    exponents require strict positivity.
    """
    t = float(t)
    w, V = _spectral_checked(C, strict=t < 0)
    if t == 0.0:
        return np.eye(len(w))
    return _apply(w, V, lambda x: np.power(np.maximum(x, 0.0), t))


def norms(M) -> Tuple[float, float]:
    """Hilbert-Schmidt and spectral norm of a square matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    hs = float(np.sqrt(np.sum(M * M)))
    spectral = float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0
    return hs, spectral


def psd_min_eig(M) -> float:
    """Smallest eigenvalue of the symmetric part of ``M``."""
    return float(np.linalg.eigvalsh(symmetrize(M))[0])


def _relative_matrix(C0, C1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    s0 = sym_sqrt(C0)
    is0 = sym_invsqrt(C0)
    sym_invsqrt(C1)  # strict positivity check on C1
    M = symmetrize(is0 @ as_symmetric(C1) @ is0)
    return s0, is0, M


def spd_geodesic(C0, C1, t: float) -> np.ndarray:
    """Point at time ``t`` on the affine-invariant geodesic from C0 to C1.

    Examples
    --------
    >>> spd_geodesic(np.eye(2), 4 * np.eye(2), 0.5)
    array([[2., 0.],
           [0., 2.]])
    """
    if t == 0:
        return as_symmetric(C0).copy()
    s0, _, M = _relative_matrix(C0, C1)
    return symmetrize(s0 @ spd_power(M, t) @ s0)


def spd_dist_sq(C0, C1) -> float:
    """Squared moment distance between equal-mean Gaussians.

    ``⅛ ‖log(C0^{-1/2} C1 C0^{-1/2})‖²_HS``.
    """
    _, _, M = _relative_matrix(C0, C1)
    w = np.linalg.eigvalsh(M)
    return float(np.sum(np.log(w) ** 2) / 8.0)


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric PSD matrix with cached eigendata.

    The entries are symmetrized on construction; ``strictly_positive`` is
    True iff the smallest eigenvalue exceeds ``eps_pd``.
    """

    entries: np.ndarray
    eigenvalues: np.ndarray = field(init=False, repr=False)
    eigenvectors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        C = as_symmetric(self.entries)
        w, V = np.linalg.eigh(C)
        norm2 = float(np.max(np.abs(w))) if w.size else 0.0
        if w.size and w[0] < -NEG_TOL * norm2:
            raise NegativeEigenvalue(f"minimum eigenvalue {w[0]:.3e} is negative",
                                     min_eigenvalue=float(w[0]))
        C.setflags(write=False)
        object.__setattr__(self, "entries", C)
        object.__setattr__(self, "eigenvalues", w)
        object.__setattr__(self, "eigenvectors", V)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def eps(self) -> float:
        return PD_REL * float(np.max(np.abs(self.eigenvalues)))

    @property
    def rank(self) -> int:
        return int(np.sum(self.eigenvalues > self.eps))

    @property
    def strictly_positive(self) -> bool:
        return bool(self.eigenvalues[0] > self.eps) if self.eps > 0 else False

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def to_json(self) -> dict:
        return {"dim": self.dim, "entries": self.entries.tolist()}

    @classmethod
    def from_json(cls, obj) -> "SpdMatrix":
        entries = np.asarray(obj["entries"] if isinstance(obj, dict) else obj, dtype=float)
        return cls(entries.reshape(entries.shape[0], -1))
