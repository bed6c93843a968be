"""Empirical measures, Gaussians, moments and normalization maps.

A normalization of a measure μ with mean m and covariance C = AAᵀ is the
push-forward under ``T_{m,A}(x) = A⁻¹(x − m)``; it has mean 0 and
covariance Id.  Any two normalizations differ by a rotation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import spd
from .errors import DegenerateCovariance, InfeasibleWeights, PreconditionError

MERGE_TOL = 1e-12

__all__ = [
    "EmpiricalMeasure",
    "Gaussian",
    "NormalizationMap",
    "moments",
    "normalize",
    "denormalize",
    "gaussian_entropy_terms",
    "reflect_symmetrize",
    "is_reflection_symmetric",
    "fold",
]


def _merge_duplicates(points: np.ndarray, weights: np.ndarray, tol: float):
    """Merge points closer than ``tol`` (sup norm), keeping first-seen order."""
    n = len(points)
    if n < 2:
        return points, weights
    order = np.lexsort(points.T[::-1])
    sp = points[order]
    same = np.all(np.abs(np.diff(sp, axis=0)) <= tol, axis=1)
    if not same.any():
        return points, weights
    group_sorted = np.concatenate([[0], np.cumsum(~same)])
    group = np.empty(n, dtype=int)
    group[order] = group_sorted
    first = np.full(group_sorted[-1] + 1, n, dtype=int)
    np.minimum.at(first, group, np.arange(n))
    keep = np.sort(first)
    relabel = np.empty_like(first)
    relabel[np.argsort(first)] = np.arange(len(first))
    w = np.zeros(len(first))
    np.add.at(w, relabel[group], weights)
    return points[keep], w


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud in ℝ^d.

    Weights are normalized to sum to one on construction and duplicate points
    (within 1e-12) are merged with summed weights unless ``merge=False``.
    """

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights=None, merge: bool = True):
        X = np.asarray(points, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise PreconditionError("points must be an n×d array with n ≥ 1")
        if not np.all(np.isfinite(X)):
            raise PreconditionError("points must be finite")
        if weights is None:
            w = np.full(X.shape[0], 1.0 / X.shape[0])
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape[0] != X.shape[0]:
                raise InfeasibleWeights("weights and points differ in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
                raise InfeasibleWeights("weights must be non-negative, finite, with positive sum")
            keep = w > 0
            X, w = X[keep], w[keep]
            w = w / w.sum()
        if merge:
            X, w = _merge_duplicates(X, w, MERGE_TOL)
        X = np.ascontiguousarray(X)
        X.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_json(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "EmpiricalMeasure":
        return cls(obj["points"], obj.get("weights"))


@dataclass(frozen=True)
class Gaussian:
    """Normal distribution N_{m,C}."""

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        C = spd.SpdMatrix(np.atleast_2d(cov)).entries
        if C.shape[0] != m.shape[0]:
            raise PreconditionError("mean and covariance dimensions differ")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", C)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Gaussian":
        return cls(obj["mean"], obj["cov"])


@dataclass(frozen=True)
class NormalizationMap:
    """Affine map ``T_{m,A}(x) = A⁻¹(x − m)``."""

    shift: np.ndarray
    root: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.linalg.solve(self.root, (x - self.shift).T).T

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        return y @ self.root.T + self.shift


def moments(mu: EmpiricalMeasure) -> Tuple[np.ndarray, np.ndarray, float]:
    """Mean, covariance about the mean and variance ``tr C`` of ``mu``."""
    w = mu.weights
    m = w @ mu.points
    Y = mu.points - m
    C = spd.symmetrize((Y * w[:, None]).T @ Y)
    return m, C, float(np.trace(C))


def _image_basis(C: np.ndarray):
    w, V = np.linalg.eigh(C)
    thr = spd.PD_REL * max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    mask = w > thr
    return int(mask.sum()), V[:, mask]


def normalize(mu: EmpiricalMeasure, root: Optional[np.ndarray] = None,
              ) -> Tuple[EmpiricalMeasure, NormalizationMap]:
    """Push ``mu`` to mean 0 and covariance Id.

    Parameters
    ----------
    mu : EmpiricalMeasure
    root : ndarray, optional
        Left square root A with AAᵀ = C(μ).  Defaults to the symmetric root.

    Returns
    -------
    (EmpiricalMeasure, NormalizationMap)

    Raises
    ------
    DegenerateCovariance
        If C(μ) is rank deficient; ``info`` has ``rank`` and ``basis``.
    """
    m, C, _ = moments(mu)
    rank, basis = _image_basis(C)
    if rank < mu.dim:
        raise DegenerateCovariance(f"covariance has rank {rank} < {mu.dim}",
                                   rank=rank, basis=basis)
    if root is None:
        A = spd.sym_sqrt(C)
    else:
        A = np.asarray(root, dtype=float)
        if np.linalg.norm(A @ A.T - C) > 1e-10 * np.linalg.norm(C):
            raise PreconditionError("root does not satisfy A·Aᵀ = C(μ)")
    T = NormalizationMap(shift=m, root=A)
    return EmpiricalMeasure(T.apply(mu.points), mu.weights, merge=False), T


def denormalize(eta: EmpiricalMeasure, T: NormalizationMap) -> EmpiricalMeasure:
    """Inverse of :func:`normalize` for a recorded map."""
    return EmpiricalMeasure(T.inverse(eta.points), eta.weights, merge=False)


def gaussian_entropy_terms(g: Gaussian, target: Gaussian) -> Tuple[float, float]:
    """Relative entropy and covariance-weighted Fisher information of Gaussians.

    With g = N(m, C) and target = N(x0, B)::

        E = −½ (log det(B⁻¹C) + tr[Id − B⁻¹C] − |B^{-1/2}(m − x0)|²)
        I = ‖Id − B^{-1/2} C B^{-1/2}‖²_HS + |C^{1/2} B⁻¹ (m − x0)|²

    The Fisher term is ``∫ |C^{1/2} ∇ log(g/target)|² dg``.  Its covariance
    part equals ``tr[(Id − B⁻¹C)²]``, the squared HS norm of the symmetrized
    matrix (which differs from the plain Frobenius norm of Id − B⁻¹C when C
    and B do not commute).
    """
    C, B = g.cov, target.cov
    Bis = spd.sym_invsqrt(B)
    spd.sym_invsqrt(C)
    M = spd.symmetrize(Bis @ C @ Bis)
    lam = np.linalg.eigvalsh(M)
    dm = g.mean - target.mean
    u = Bis @ dm
    d = len(lam)
    rel = -0.5 * (np.sum(np.log(lam)) + d - np.sum(lam) - u @ u)
    v = spd.sym_sqrt(C) @ (Bis @ u)
    fisher = float(np.sum((1.0 - lam) ** 2) + v @ v)
    return float(rel), fisher


def reflect_symmetrize(mu: EmpiricalMeasure) -> EmpiricalMeasure:
    """Average of ``mu`` over the 2^d coordinate sign flips."""
    d = mu.dim
    signs = np.array(list(itertools.product([1.0, -1.0], repeat=d)))
    pts = (mu.points[None, :, :] * signs[:, None, :]).reshape(-1, d)
    w = np.tile(mu.weights, len(signs)) / len(signs)
    return EmpiricalMeasure(pts, w)


def fold(mu: EmpiricalMeasure) -> EmpiricalMeasure:
    """Push-forward under ``x ↦ (|x_1|, …, |x_d|)``."""
    return EmpiricalMeasure(np.abs(mu.points), mu.weights)


def is_reflection_symmetric(mu: EmpiricalMeasure, tol: float = 1e-8) -> bool:
    """True if ``(σ_k)_# μ = μ`` for every coordinate flip within ``tol``."""
    P, w = mu.points, mu.weights
    order = np.lexsort(P.T[::-1])
    Ps, ws = P[order], w[order]
    for k in range(mu.dim):
        Q = P.copy()
        Q[:, k] = -Q[:, k]
        o2 = np.lexsort(Q.T[::-1])
        if np.max(np.abs(Q[o2] - Ps)) > tol or np.max(np.abs(w[o2] - ws)) > tol:
            return False
    return True
