"""Exact discrete optimal transport and Gaussian Wasserstein distances.

Discrete problems are solved exactly: equal-size uniform marginals go to the
Hungarian-type assignment solver of :mod:`scipy.optimize`, everything else to
the HiGHS simplex through :func:`scipy.optimize.linprog`.  The LP route also
returns dual potentials, which drive the plan-degeneracy diagnostic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

from . import spd
from .errors import CovotError, InfeasibleWeights, PreconditionError, SizeExceeded
from .measures import EmpiricalMeasure, Gaussian, moments

MAX_SUPPORT = 5000
WEIGHT_TOL = 1e-9

__all__ = [
    "TransportPlan",
    "solve_ot",
    "solve_w2",
    "gaussian_w2",
    "plan_covariance",
    "w2_geodesic_moments",
]


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two empirical measures with its squared-distance cost.

    ``degenerate`` is True when more zero-reduced-cost cells than a single
    basis were found (several optimal vertices may exist), False when the
    optimum was certified unique by the duals, and None when not diagnosed.
    """

    src: EmpiricalMeasure
    dst: EmpiricalMeasure
    coupling: np.ndarray
    cost: float
    degenerate: Optional[bool] = None

    def support(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sparse triplets ``(i, j, mass)`` of the positive entries."""
        i, j = np.nonzero(self.coupling > 0)
        return i, j, self.coupling[i, j]

    def marginal_error(self) -> float:
        r = np.abs(self.coupling.sum(axis=1) - self.src.weights).max()
        c = np.abs(self.coupling.sum(axis=0) - self.dst.weights).max()
        return float(max(r, c))


def _lp_plan(a: np.ndarray, b: np.ndarray, M: np.ndarray):
    n, m = M.shape
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A_eq = sparse.vstack([rows, cols]).tocsc()
    b_eq = np.concatenate([a, b])
    res = linprog(M.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise CovotError(f"linear program failed: {res.message}")
    P = np.maximum(res.x.reshape(n, m), 0.0)
    y = res.eqlin.marginals
    u, v = y[:n], y[n:]
    reduced = M - u[:, None] - v[None, :]
    scale = max(float(np.max(np.abs(M))), 1.0)
    tight = int(np.sum(np.abs(reduced) <= 1e-9 * scale))
    return P, tight > n + m - 1


def solve_ot(a, b, M, diagnose: bool = False) -> Tuple[np.ndarray, Optional[bool]]:
    """Exact optimal coupling for marginals ``a``, ``b`` and cost matrix ``M``.

    Returns
    -------
    coupling : ndarray
    degenerate : bool or None
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    M = np.asarray(M, dtype=float)
    if abs(a.sum() - b.sum()) > WEIGHT_TOL:
        raise InfeasibleWeights(f"marginal masses differ: {a.sum()} vs {b.sum()}")
    if np.any(a < 0) or np.any(b < 0):
        raise InfeasibleWeights("negative marginal weights")
    n, m = M.shape
    if n == 1 or m == 1:
        return np.outer(a, b) / max(a.sum(), np.finfo(float).tiny), False
    uniform = (n == m and np.ptp(a) <= 1e-15 and np.ptp(b) <= 1e-15)
    if uniform and not diagnose:
        r, c = linear_sum_assignment(M)
        P = np.zeros((n, m))
        P[r, c] = a[r]
        return P, None
    return _lp_plan(a, b, M)


def solve_w2(mu0: EmpiricalMeasure, mu1: EmpiricalMeasure, diagnose: bool = False) -> TransportPlan:
    """Optimal plan for the squared Euclidean cost.

    Parameters
    ----------
    mu0, mu1 : EmpiricalMeasure
        Marginals in the same dimension with at most 5000 points combined.
    diagnose : bool
        Force the LP route and report dual degeneracy.

    Returns
    -------
    TransportPlan
        ``cost`` equals W₂(μ0, μ1)².
    """
    if mu0.dim != mu1.dim:
        raise PreconditionError("measures live in different dimensions")
    if mu0.n + mu1.n > MAX_SUPPORT:
        raise SizeExceeded(f"combined support {mu0.n + mu1.n} exceeds {MAX_SUPPORT}",
                           support=mu0.n + mu1.n)
    M = cdist(mu0.points, mu1.points, "sqeuclidean")
    P, degenerate = solve_ot(mu0.weights, mu1.weights, M, diagnose=diagnose)
    return TransportPlan(mu0, mu1, P, float(np.sum(P * M)), degenerate)


def gaussian_w2(g0: Gaussian, g1: Gaussian, weight=None) -> float:
    """Squared Wasserstein distance between two Gaussians.

    Without ``weight``::

        |m0 − m1|² + tr[C0 + C1 − 2 (C1^{1/2} C0 C1^{1/2})^{1/2}]

    With a strictly PD ``weight`` C the distance is taken in the norm
    ``|v|_C = |C^{-1/2} v|``, i.e. the same formula for the effective
    covariances ``C^{-1/2} Σ_i C^{-1/2}`` and the mean gap ``|m0 − m1|_C``.

    Returns
    -------
    float
        The squared distance.
    """
    m0, m1 = g0.mean, g1.mean
    S0, S1 = g0.cov, g1.cov
    if weight is not None:
        W = spd.sym_invsqrt(weight)
        m0, m1 = W @ m0, W @ m1
        S0 = spd.symmetrize(W @ S0 @ W)
        S1 = spd.symmetrize(W @ S1 @ W)
    r1 = spd.sym_sqrt(S1)
    cross = spd.sym_sqrt(spd.symmetrize(r1 @ S0 @ r1))
    dm = m0 - m1
    val = float(dm @ dm + np.trace(S0) + np.trace(S1) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def plan_covariance(plan: TransportPlan) -> np.ndarray:
    """Symmetrized cross covariance ``Cov(γ)`` of a coupling."""
    m0, _, _ = moments(plan.src)
    m1, _, _ = moments(plan.dst)
    i, j, w = plan.support()
    X = plan.src.points[i] - m0
    Y = plan.dst.points[j] - m1
    K = (X * w[:, None]).T @ Y
    return spd.symmetrize(K)


def w2_geodesic_moments(plan: TransportPlan, t: float, tol: float = 1e-9):
    """Moments of the displacement interpolation ``((1−t)x + ty)_# γ``.

    The covariance is computed by direct summation over the plan and checked
    against ``(1−t)² C0 + t² C1 + 2t(1−t) Cov(γ)`` and must lie below
    ``(1−t) C0 + t C1`` in PSD order.  For an optimal plan ``tr Cov(γ) ≥ 0``
    (it beats the independent coupling), which is checked as well.  The
    matrix lower bound ``Cov(γ) ≽ 0`` is not checked: it fails for optimal
    plans in d ≥ 2, e.g. between a Gaussian and a rotated copy.

    Returns
    -------
    mean : ndarray
    cov : ndarray
    var : float

    Raises
    ------
    PreconditionError
        If ``tr Cov(γ) < 0``, which signals a non-optimal plan.
    """
    t = float(t)
    i, j, w = plan.support()
    Z = (1.0 - t) * plan.src.points[i] + t * plan.dst.points[j]
    mean = w @ Z
    Y = Z - mean
    cov = spd.symmetrize((Y * w[:, None]).T @ Y)

    _, C0, _ = moments(plan.src)
    _, C1, _ = moments(plan.dst)
    K = plan_covariance(plan)
    formula = (1 - t) ** 2 * C0 + t ** 2 * C1 + 2 * t * (1 - t) * K
    scale = max(np.linalg.norm(C0) + np.linalg.norm(C1), 1.0)
    resid = np.linalg.norm(cov - formula)
    if resid > tol * scale:
        raise CovotError(f"covariance identity residual {resid:.3e}")
    upper = spd.psd_min_eig((1 - t) * C0 + t * C1 - cov)
    if np.trace(K) < -1e-10 * scale:
        raise PreconditionError("tr Cov(γ) < 0; the plan is not optimal")
    if upper < -1e-10 * scale:
        raise CovotError("upper PSD bound violated")
    return mean, cov, float(np.trace(cov))
