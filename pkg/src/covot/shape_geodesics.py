"""Covariance-constrained geodesics for reflection-symmetric marginals.

For normalized, d-fold reflection-symmetric marginals the constrained
geodesic is obtained from a component-wise dilation

    [G^ω x]_k = (ω_k / sin ω_k)^{1/2} x_k,

where ω solves the fixed-point condition ``cos ω_k = E[γ_k(0) γ_k(1)]`` under
the optimal plan between ``G^ω_# μ0`` and ``G^ω_# μ1``.  Particles then move
on arcs

    γ_k(s) = sin(ω_k(1−s)) / sin ω_k · x_k + sin(ω_k s) / sin ω_k · y_k

and the kinetic energy of the family is

    E∫|γ̇|² = W₂(G^ω_# μ0, G^ω_# μ1)² − 2 Σ_k (ω_k/sin ω_k)(1 − cos ω_k − ½ ω_k sin ω_k).

Optimal plans between symmetric marginals pair points with equal sign
patterns, so every transport problem here is solved between the folded
measures ``|x|_# μ`` (one orthant) and unfolded afterwards.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import spd
from .errors import (CovotError, DegenerateCovariance, NoConvergence, NotSymmetric,
                     OutOfRange, PreconditionError, UnsupportedGeometry)
from .measures import (EmpiricalMeasure, fold, is_reflection_symmetric, moments, normalize,
                       reflect_symmetrize)
from .moment_geodesics import shoot_moment_geodesic, solve_diagonal_moments
from .ot_core import TransportPlan, solve_w2, w2_geodesic_moments

log = logging.getLogger(__name__)

__all__ = [
    "OmegaGeodesic",
    "TrajectoryFamily",
    "dilation_factors",
    "dilate",
    "fixed_point_omega",
    "constrained_trajectories",
    "modulated_distance_symmetric",
    "normalized_w2_geodesic",
    "trajectory_deviation",
]

NORMALIZED_TOL = 1e-8


def _omega_over_sin(omega: np.ndarray) -> np.ndarray:
    return 1.0 / np.sinc(np.asarray(omega, dtype=float) / np.pi)


def _arc_weights(omega: np.ndarray, s: float) -> Tuple[np.ndarray, np.ndarray]:
    """``sin(ω(1−s))/sin ω`` and ``sin(ωs)/sin ω`` with the linear limit at ω = 0."""
    den = np.sinc(omega / np.pi)
    a = (1.0 - s) * np.sinc(omega * (1.0 - s) / np.pi) / den
    b = s * np.sinc(omega * s / np.pi) / den
    return a, b


def dilation_factors(omega) -> np.ndarray:
    """Per-coordinate scale ``(ω_k / sin ω_k)^{1/2}`` (1 where ω_k = 0)."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega < 0) or np.any(omega > np.pi / 2 + 1e-12):
        raise OutOfRange("each ω_k must lie in [0, π/2]", omega=omega)
    return np.sqrt(_omega_over_sin(np.clip(omega, 0.0, np.pi / 2)))


def dilate(mu: EmpiricalMeasure, omega) -> EmpiricalMeasure:
    """Push-forward of ``mu`` under the dilation ``G^ω``."""
    g = dilation_factors(omega)
    if g.shape[0] != mu.dim:
        raise PreconditionError("omega has the wrong length")
    return EmpiricalMeasure(mu.points * g, mu.weights, merge=False)


@dataclass
class OmegaGeodesic:
    """Result of the ω fixed-point iteration.

    ``plan`` couples the folded, dilated marginals (points in the closed
    positive orthant); :meth:`pairs` unfolds it to a coupling of the
    original symmetric marginals.  ``constrained_dist_sq`` is the kinetic
    energy ``E∫|γ̇|²`` of the trajectory family.
    """

    omega: np.ndarray
    plan: TransportPlan
    constrained_dist_sq: float
    iterations: int
    residual: float
    converged: bool = True
    folded0: Optional[EmpiricalMeasure] = field(default=None, repr=False)
    folded1: Optional[EmpiricalMeasure] = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    def correlations(self) -> np.ndarray:
        return _correlations(self.plan, self.folded0, self.folded1)

    def pairs(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unfolded coupling as ``(start_points, end_points, masses)``."""
        i, j, w = self.plan.support()
        X = self.folded0.points[i]
        Y = self.folded1.points[j]
        d = X.shape[1]
        signs = np.array(list(itertools.product([1.0, -1.0], repeat=d)))
        S = (X[None] * signs[:, None]).reshape(-1, d)
        E = (Y[None] * signs[:, None]).reshape(-1, d)
        M = np.tile(w, len(signs)) / len(signs)
        return S, E, M

    def to_json(self) -> dict:
        return {"omega": self.omega.tolist(), "dist_sq": self.constrained_dist_sq,
                "iterations": self.iterations, "residual": self.residual,
                "converged": self.converged}


@dataclass
class TrajectoryFamily:
    """Particle paths ``γ(s)`` for a coupling, sampled at ``times``.

    ``positions[k, p]`` is the position of pair ``p`` at ``times[k]``.
    """

    start_points: np.ndarray
    end_points: np.ndarray
    masses: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    omega: Optional[np.ndarray] = None

    def sampler(self, pair: int, s: float) -> np.ndarray:
        if self.omega is None:
            raise CovotError("this family has no closed-form sampler")
        a, b = _arc_weights(self.omega, s)
        return a * self.start_points[pair] + b * self.end_points[pair]

    def measure_at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.positions[k], self.masses)

    def second_moments(self) -> np.ndarray:
        """``E[γ_k(s)²]`` per sampled time and coordinate."""
        return np.einsum("p,spk->sk", self.masses, self.positions ** 2)

    def cross_moments(self) -> np.ndarray:
        """``E[γ(s) γ(s)ᵀ]`` per sampled time."""
        return np.einsum("p,spk,spl->skl", self.masses, self.positions, self.positions)

    def means(self) -> np.ndarray:
        return np.einsum("p,spk->sk", self.masses, self.positions)


def _check_normalized(mu: EmpiricalMeasure, name: str):
    m, C, _ = moments(mu)
    if np.max(np.abs(m)) > NORMALIZED_TOL or np.max(np.abs(C - np.eye(mu.dim))) > NORMALIZED_TOL:
        raise PreconditionError(f"{name} is not normalized (mean 0, covariance Id)")


def _correlations(plan: TransportPlan, f0: EmpiricalMeasure, f1: EmpiricalMeasure) -> np.ndarray:
    i, j, w = plan.support()
    return np.einsum("p,pk,pk->k", w, f0.points[i], f1.points[j])


def _omega_map(f0, f1, omega):
    g = dilation_factors(omega)
    plan = solve_w2(EmpiricalMeasure(f0.points * g, f0.weights, merge=False),
                    EmpiricalMeasure(f1.points * g, f1.weights, merge=False))
    rho = _correlations(plan, f0, f1)
    excess = float(max(0.0, -rho.min(), rho.max() - 1.0))
    if rho.min() < -1e-12:
        log.warning("negative correlation %.3e clamped to 0", rho.min())
    return np.arccos(np.clip(rho, 0.0, 1.0)), plan, rho, excess


def _iterate(f0, f1, omega, tol, max_iter, damping):
    excess = 0.0
    for it in range(1, max_iter + 1):
        target, _, _, ex = _omega_map(f0, f1, omega)
        excess = max(excess, ex)
        new = (1.0 - damping) * omega + damping * target
        step = float(np.max(np.abs(new - omega)))
        omega = new
        if step < tol:
            return omega, it, True, excess
    return omega, max_iter, False, excess


def fixed_point_omega(mu0: EmpiricalMeasure, mu1: EmpiricalMeasure, tol: float = 1e-10,
                      max_iter: int = 200, damping: float = 0.5, omega0=None,
                      symmetrize: bool = False, multistart: bool = False) -> OmegaGeodesic:
    """Damped fixed-point iteration ``ω ← (1−θ)ω + θ R(ω)``.

    ``R_k(ω) = arccos((sin ω_k/ω_k) Σ_ij π_ij ξ_ik η_jk)`` with ``π`` optimal
    between the dilated marginals ``ξ = G^ω x``, ``η = G^ω y``.  The argument
    is clamped to [0, 1].

    Parameters
    ----------
    mu0, mu1 : EmpiricalMeasure
        Normalized, reflection-symmetric marginals.
    tol : float
        Stop when ``‖ω_new − ω‖_∞ < tol``.
    max_iter : int
    damping : float
        θ in (0, 1].
    omega0 : array_like, optional
        Start point, default 0.
    symmetrize : bool
        Replace the inputs by their reflection orbits first.
    multistart : bool
        Also run from the corners of [0, π/2]^d (at most 8 starts, padded
        with edge midpoints in d = 2) and record distinct fixed points in
        ``info['fixed_points']``.

    Returns
    -------
    OmegaGeodesic

    Raises
    ------
    NotSymmetric
        If a marginal is not reflection symmetric within 1e-8.
    NoConvergence
        After ``max_iter`` iterations; ``info['last']`` holds the result.
    """
    if symmetrize:
        mu0, mu1 = reflect_symmetrize(mu0), reflect_symmetrize(mu1)
    if mu0.dim != mu1.dim:
        raise PreconditionError("marginals live in different dimensions")
    for mu, name in ((mu0, "mu0"), (mu1, "mu1")):
        if not is_reflection_symmetric(mu, NORMALIZED_TOL):
            raise NotSymmetric(f"{name} is not reflection symmetric")
        _check_normalized(mu, name)
    if not 0.0 < damping <= 1.0:
        raise PreconditionError("damping must lie in (0, 1]")
    d = mu0.dim
    f0, f1 = fold(mu0), fold(mu1)
    start = np.zeros(d) if omega0 is None else np.asarray(omega0, dtype=float)
    omega, iters, ok, excess = _iterate(f0, f1, start, tol, max_iter, damping)

    _, plan, rho, _ = _omega_map(f0, f1, omega)
    residual = float(np.max(np.abs(np.cos(omega) - rho)))
    q = _omega_over_sin(omega)
    dist = plan.cost - 2.0 * float(np.sum(q * (1.0 - np.cos(omega) - 0.5 * omega * np.sin(omega))))
    result = OmegaGeodesic(omega=omega, plan=plan, constrained_dist_sq=dist, iterations=iters,
                           residual=residual, converged=ok, folded0=f0, folded1=f1)
    result.info["clamp_excess"] = excess
    if multistart:
        result.info["fixed_points"] = _multistart(f0, f1, tol, max_iter, damping, omega)
        result.info["multiple"] = len(result.info["fixed_points"]) > 1
    if not ok:
        raise NoConvergence(f"ω iteration did not settle in {max_iter} steps",
                            residual=residual, last=result)
    return result


def _multistart(f0, f1, tol, max_iter, damping, reference) -> List[np.ndarray]:
    d = f0.dim
    corners = [np.array(c) for c in itertools.product([0.0, np.pi / 2], repeat=d)][:8]
    if d == 2:
        h = np.pi / 4
        corners += [np.array(c) for c in ([h, 0.0], [0.0, h], [h, np.pi / 2], [np.pi / 2, h])]
    found = [reference]
    for c in corners[:8]:
        om, _, ok, _ = _iterate(f0, f1, c, tol, max_iter, damping)
        if ok and all(np.max(np.abs(om - f)) > 1e-6 for f in found):
            found.append(om)
    return found


def constrained_trajectories(result: OmegaGeodesic, s_samples) -> TrajectoryFamily:
    """Sample the arcs ``γ(s)`` of every unfolded pair of the plan."""
    X, Y, w = result.pairs()
    s_samples = np.asarray(s_samples, dtype=float)
    pos = np.empty((len(s_samples),) + X.shape)
    for k, s in enumerate(s_samples):
        if s == 0.0:
            pos[k] = X
        elif s == 1.0:
            pos[k] = Y
        else:
            a, b = _arc_weights(result.omega, s)
            pos[k] = a * X + b * Y
    return TrajectoryFamily(X, Y, w, s_samples, pos, omega=result.omega.copy())


def _is_diagonal(C: np.ndarray, tol: float = 1e-10) -> bool:
    off = C - np.diag(np.diag(C))
    return float(np.max(np.abs(off))) <= tol * max(float(np.max(np.abs(C))), 1e-300)


def modulated_distance_symmetric(mu0: EmpiricalMeasure, mu1: EmpiricalMeasure, tol: float = 1e-10,
                                 N: int = 200) -> Tuple[float, float, float]:
    """Split distance for marginals with diagonal covariances and symmetric shapes.

    Both measures are normalized with their (diagonal) symmetric roots.  The
    shape term is half the kinetic energy of the constrained family, which
    matches the ½-normalized action of the moment term; the moment term comes
    from the diagonal closed form when the mean shift lies on one axis and
    from shooting otherwise.

    Returns
    -------
    total_sq, shape_sq, moment_sq : float

    Raises
    ------
    UnsupportedGeometry
        If a covariance is not diagonal or a normalized marginal is not
        reflection symmetric.
    """
    m0, C0, _ = moments(mu0)
    m1, C1, _ = moments(mu1)
    if not (_is_diagonal(C0) and _is_diagonal(C1)):
        raise UnsupportedGeometry("covariances must be diagonal in the implemented regime")
    n0, _ = normalize(mu0)
    n1, _ = normalize(mu1)
    if not (is_reflection_symmetric(n0, NORMALIZED_TOL) and is_reflection_symmetric(n1, NORMALIZED_TOL)):
        raise UnsupportedGeometry("normalized marginals must be reflection symmetric")
    shape = fixed_point_omega(n0, n1, tol=tol)
    shape_sq = 0.5 * max(shape.constrained_dist_sq, 0.0)

    delta = m1 - m0
    nz = np.flatnonzero(np.abs(delta) > 1e-12 * max(np.max(np.abs(delta)), 1.0))
    if len(nz) <= 1:
        axis = int(nz[0]) if len(nz) else 0
        moment_sq = solve_diagonal_moments(m0, m1, np.diag(C0), np.diag(C1), axis).dist_sq
    else:
        moment_sq = shoot_moment_geodesic(m0, C0, m1, C1, N=N).dist_sq
    return shape_sq + moment_sq, shape_sq, moment_sq


def normalized_w2_geodesic(mu0: EmpiricalMeasure, mu1: EmpiricalMeasure, s_samples) -> TrajectoryFamily:
    """Displacement interpolation renormalized to mean 0 and covariance Id.

    Raises
    ------
    DegenerateCovariance
        If the interpolated covariance is singular at some sampled time.
    """
    plan = solve_w2(mu0, mu1)
    i, j, w = plan.support()
    X, Y = mu0.points[i], mu1.points[j]
    s_samples = np.asarray(s_samples, dtype=float)
    pos = np.empty((len(s_samples),) + X.shape)
    for k, s in enumerate(s_samples):
        m, C, _ = w2_geodesic_moments(plan, s)
        try:
            W = spd.sym_invsqrt(C)
        except CovotError as exc:
            raise DegenerateCovariance(f"interpolated covariance singular at s={s}",
                                       rank=int(np.linalg.matrix_rank(C))) from exc
        pos[k] = ((1.0 - s) * X + s * Y - m) @ W
    return TrajectoryFamily(X, Y, w, s_samples, pos)


def trajectory_deviation(a: TrajectoryFamily, b: TrajectoryFamily) -> float:
    """Largest W₂ distance between the two families at common sample times."""
    worst = 0.0
    for k in range(len(a.times)):
        plan = solve_w2(a.measure_at(k), b.measure_at(k))
        worst = max(worst, float(np.sqrt(max(plan.cost, 0.0))))
    return worst
