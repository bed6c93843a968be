"""Geodesics in (mean, covariance) space.

The moment action of a curve ``t ↦ (m_t, C_t)`` is

    I(m, C) = ∫₀¹ ½⟨ṁ, C⁻¹ṁ⟩ + ⅛ tr(Ċ C⁻¹ Ċ C⁻¹) dt.

Writing ``C = AAᵀ`` with the adapted root ``Ȧ = ½ Ċ A^{-T}`` (so that
``A⁻¹Ȧ`` is symmetric) the integrand becomes ``½|A⁻¹ṁ|² + ½‖A⁻¹Ȧ‖²_HS``.
Critical points satisfy, with constant ``α ∈ ℝ^d`` and constant skew ``Q``,

    ṁ = AAᵀα,   Ȧ = AZ,   Ż = [Z, Q] − (Aᵀα)(Aᵀα)ᵀ,

where ``Z = A⁻¹Ȧ``.  ``Q = 0`` for the free problem; a prescribed terminal
co-rotation ``R = C₁^{-1/2} A₁`` requires a general ``Q``.  The boundary
value problems are solved by single shooting with a damped Newton method.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import expm, logm
from scipy.optimize import minimize_scalar

from . import spd
from ._ode import rk4, uniform_grid
from .errors import NoConvergence, PreconditionError, SingularMatrix, UnsupportedGeometry

log = logging.getLogger(__name__)

__all__ = [
    "MomentCurve",
    "ActionForms",
    "VarianceMomentSolution",
    "moment_action_density",
    "action_moment",
    "adapted_root",
    "corotation_residual",
    "solve_variance_moments",
    "solve_diagonal_moments",
    "product_upper_bound",
    "shoot_moment_geodesic",
    "constrained_equal_mean",
    "rotation_search",
    "apriori_cov_ok",
]


# ---------------------------------------------------------------------------
# containers


@dataclass
class MomentCurve:
    """Time-sampled moment curve with adapted roots and co-rotations.

    ``mean_dots`` and ``cov_dots`` hold exact velocities when the producer
    knows them (shooting, closed forms); otherwise they are None.
    """

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    roots: np.ndarray
    rotations: np.ndarray
    alpha: Optional[np.ndarray] = None
    skewQ: Optional[np.ndarray] = None
    dist_sq: Optional[float] = None
    mean_dots: Optional[np.ndarray] = None
    cov_dots: Optional[np.ndarray] = None
    residual: float = 0.0
    converged: bool = True
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def density(self) -> np.ndarray:
        """Pointwise ``⟨ṁ, C⁻¹ṁ⟩ + ¼ tr(ĊC⁻¹ĊC⁻¹)`` (twice the action integrand)."""
        if self.mean_dots is None or self.cov_dots is None:
            mdot = _spline_derivative(self.times, self.means)
            cdot = _spline_derivative(self.times, self.covs)
        else:
            mdot, cdot = self.mean_dots, self.cov_dots
        return np.array([2.0 * moment_action_density(a, C, b)
                         for a, C, b in zip(mdot, self.covs, cdot)])


class ActionForms(NamedTuple):
    """Moment action computed in three equivalent ways."""

    cov_form: float
    a_form: float
    sigma_form: float


@dataclass
class VarianceMomentSolution:
    """Explicit geodesic for the mean/variance problem.

    ``m(t)`` moves along the segment from ``m0`` to ``m1`` and ``(|m − m0|, σ)``
    traces a hyperbolic geodesic.  ``beta = √2 · sqrt(dist_sq)``.
    """

    m0: np.ndarray
    m1: np.ndarray
    n: float
    sigma0: float
    sigma1: float
    beta: float
    t0: float
    dist_sq: float
    times: np.ndarray = field(repr=False, default=None)
    means: np.ndarray = field(repr=False, default=None)
    sigmas: np.ndarray = field(repr=False, default=None)

    def profile(self, t) -> Tuple[np.ndarray, np.ndarray]:
        """Fraction of the mean displacement and σ at times ``t``."""
        t = np.asarray(t, dtype=float)
        if self.n == 0.0:
            frac = np.zeros_like(t)
            sig = self.sigma0 ** (1 - t) * self.sigma1 ** t
            return frac, sig
        b, t0 = self.beta, self.t0
        x = b * t + t0
        lsb = _log_sinh(b)
        frac = np.exp(_log_sinh(b * t) + _log_cosh(b + t0) - lsb - _log_cosh(x))
        frac = np.where(t > 0, frac, 0.0)
        sig = np.exp(np.log(self.n) + _log_cosh(b + t0) + _log_cosh(t0) - lsb - _log_cosh(x))
        return frac, sig

    def mean(self, t) -> np.ndarray:
        frac, _ = self.profile(t)
        return self.m0 + np.multiply.outer(frac, self.m1 - self.m0)

    def sigma(self, t) -> np.ndarray:
        return self.profile(t)[1]


def _log_cosh(x):
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0)


def _log_sinh(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 0, x + np.log(-np.expm1(-2.0 * np.maximum(x, 1e-300))) - np.log(2.0),
                        -np.inf)


# ---------------------------------------------------------------------------
# actions and adapted roots


def moment_action_density(mdot, C, Cdot) -> float:
    """Integrand ``½⟨ṁ, C⁻¹ṁ⟩ + ⅛ tr(ĊC⁻¹ĊC⁻¹)``."""
    Ci = np.linalg.inv(C)
    mdot = np.atleast_1d(mdot)
    K = Cdot @ Ci
    return float(0.5 * mdot @ Ci @ mdot + 0.125 * np.trace(K @ K))


def _spline_derivative(times, values):
    return CubicSpline(times, values, axis=0)(times, 1)


def action_moment(curve: MomentCurve) -> ActionForms:
    """Trapezoidal moment action of a sampled curve in three forms.

    Velocities are taken from cubic-spline interpolants of the samples.  The
    covariance form uses ``C``, the root form uses ``curve.roots`` (adapted
    roots required) and the Σ form uses ``Σ = C^{1/2}`` through
    ``¼ tr(ĊC⁻¹ĊC⁻¹) = ¼ ‖Σ̇Σ⁻¹ + Σ⁻¹Σ̇‖²_HS``.
    """
    t = curve.times
    mdot = _spline_derivative(t, curve.means)
    Cdot = _spline_derivative(t, curve.covs)
    Adot = _spline_derivative(t, curve.roots)
    Sig = np.array([spd.sym_sqrt(C) for C in curve.covs])
    Sdot = _spline_derivative(t, Sig)

    f_cov = np.empty(len(t))
    f_a = np.empty(len(t))
    f_s = np.empty(len(t))
    for k in range(len(t)):
        C = curve.covs[k]
        f_cov[k] = moment_action_density(mdot[k], C, Cdot[k])
        Ai = np.linalg.inv(curve.roots[k])
        u = Ai @ mdot[k]
        W = Ai @ Adot[k]
        f_a[k] = 0.5 * u @ u + 0.5 * np.sum(W * W)
        Si = np.linalg.inv(Sig[k])
        S = Sdot[k] @ Si + Si @ Sdot[k]
        f_s[k] = 0.5 * mdot[k] @ np.linalg.solve(C, mdot[k]) + 0.125 * np.sum(S * S)
    return ActionForms(float(np.trapezoid(f_cov, t)), float(np.trapezoid(f_a, t)),
                       float(np.trapezoid(f_s, t)))


def adapted_root(covs, A0=None, times=None, cov_dot=None):
    """Integrate ``Ȧ = ½ Ċ A^{-T}`` with RK4.

    Parameters
    ----------
    covs : ndarray, shape (N+1, d, d)
        Sampled covariance curve.
    A0 : ndarray, optional
        Initial left root with ``A0 A0ᵀ = covs[0]``; default ``covs[0]^{1/2}``.
    times : ndarray, optional
        Sample times, default uniform on [0, 1].
    cov_dot : callable, optional
        Exact ``t ↦ Ċ(t)``.  Without it a cubic spline of ``covs`` is
        differentiated.

    Returns
    -------
    roots, rotations : ndarray
        ``A_t`` and the co-rotations ``R_t = C_t^{-1/2} A_t``.
    """
    covs = np.asarray(covs, dtype=float)
    if times is None:
        times = np.linspace(0.0, 1.0, len(covs))
    times = np.asarray(times, dtype=float)
    if A0 is None:
        A0 = spd.sym_sqrt(covs[0])
    A0 = np.asarray(A0, dtype=float)
    if np.linalg.norm(A0 @ A0.T - covs[0]) > 1e-8 * max(np.linalg.norm(covs[0]), 1e-300):
        raise PreconditionError("A0·A0ᵀ must equal the first covariance")
    if cov_dot is None:
        cov_dot = CubicSpline(times, covs, axis=0).derivative()

    def rhs(t, A):
        return 0.5 * np.linalg.solve(A, cov_dot(t).T).T

    roots = rk4(rhs, A0, times)
    rotations = np.array([spd.sym_invsqrt(C) @ A for C, A in zip(covs, roots)])
    return roots, rotations


def corotation_residual(covs, rotations, times) -> float:
    """Max residual of ``Ṙ = ½[Σ̇, Σ⁻¹] R`` along a sampled curve."""
    Sig = np.array([spd.sym_sqrt(C) for C in covs])
    Sdot = _spline_derivative(times, Sig)
    Rdot = _spline_derivative(times, rotations)
    worst = 0.0
    for S, Sd, R, Rd in zip(Sig, Sdot, rotations, Rdot):
        Si = np.linalg.inv(S)
        rhs = 0.5 * (Sd @ Si - Si @ Sd) @ R
        worst = max(worst, float(np.linalg.norm(Rd - rhs)))
    return worst


# ---------------------------------------------------------------------------
# mean/variance problem


def solve_variance_moments(m0, m1, sigma0: float, sigma1: float,
                           times: Optional[Sequence[float]] = None) -> VarianceMomentSolution:
    """Closed-form geodesic for the action ``∫ (|ṁ|² + σ̇²) / (2σ²) dt``.

    With ``n = |m1 − m0|`` and ``s = n² + σ0² + σ1²``::

        D² = ½ |log((s − √(s² − 4σ0²σ1²)) / (2σ0σ1))|²
        m(t) = m0 + (m1 − m0)(tanh(βt + t0) − tanh t0) / (tanh(β + t0) − tanh t0)
        σ(t) = n / (tanh(β + t0) − tanh t0) / cosh(βt + t0)

    with ``β = √2 D`` and ``t0 = log((σ0² − σ1² − n² + √(s² − 4σ0²σ1²)) / (2nσ0))``.
    For ``n = 0`` the mean is constant and ``σ(t) = σ0^{1−t} σ1^t``.

    Returns
    -------
    VarianceMomentSolution
        Sampled on ``times`` (default 201 uniform nodes).
    """
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    s0, s1 = float(sigma0), float(sigma1)
    if s0 <= 0 or s1 <= 0:
        raise PreconditionError("sigma0 and sigma1 must be positive")
    n = float(np.linalg.norm(m1 - m0))
    if n == 0.0:
        beta = abs(np.log(s1 / s0))
        t0 = 0.0
    else:
        root = np.sqrt((n * n + (s0 - s1) ** 2) * (n * n + (s0 + s1) ** 2))
        # log((s + root) / (2σ0σ1)) without cancellation
        beta = float(np.log1p((n * n + (s0 - s1) ** 2 + root) / (2 * s0 * s1)))
        a = s0 * s0 - s1 * s1 - n * n
        num = a + root if a >= 0 else 4 * s0 * s0 * n * n / (root - a)
        t0 = float(np.log(num / (2 * n * s0)))
    sol = VarianceMomentSolution(m0=m0, m1=m1, n=n, sigma0=s0, sigma1=s1,
                                 beta=beta, t0=t0, dist_sq=0.5 * beta * beta)
    if times is None:
        times = np.linspace(0.0, 1.0, 201)
    sol.times = np.asarray(times, dtype=float)
    sol.means = sol.mean(sol.times)
    sol.sigmas = sol.sigma(sol.times)
    return sol


def _diag_curve(times, means, lam, lam_dot, mdot, dist_sq) -> MomentCurve:
    covs = np.array([np.diag(l) for l in lam])
    roots = np.array([np.diag(np.sqrt(l)) for l in lam])
    d = lam.shape[1]
    rots = np.broadcast_to(np.eye(d), covs.shape).copy()
    return MomentCurve(times=times, means=means, covs=covs, roots=roots, rotations=rots,
                       dist_sq=dist_sq, mean_dots=mdot,
                       cov_dots=np.array([np.diag(l) for l in lam_dot]))


def solve_diagonal_moments(m0, m1, lambda0, lambda1, axis: int,
                           times: Optional[Sequence[float]] = None) -> MomentCurve:
    """Geodesic between diagonal covariances with a shift along one axis.

    Coordinate ``axis`` follows the mean/variance solution with ``σ = √λ``;
    every other eigenvalue is interpolated geometrically.  The squared
    distance is ``D_var² + ⅛ Σ_{i≠axis} (log λ_i(1) − log λ_i(0))²``.

    Raises
    ------
    UnsupportedGeometry
        If ``m1 − m0`` has components off ``axis``.
    """
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    l0 = np.asarray(lambda0, dtype=float)
    l1 = np.asarray(lambda1, dtype=float)
    if np.any(l0 <= 0) or np.any(l1 <= 0):
        raise SingularMatrix("eigenvalues must be positive")
    d = len(m0)
    delta = m1 - m0
    off = np.delete(delta, axis)
    if off.size and np.max(np.abs(off)) > 1e-12 * max(np.max(np.abs(delta)), 1.0):
        raise UnsupportedGeometry("mean shift has components off the chosen axis")
    if times is None:
        times = np.linspace(0.0, 1.0, 201)
    times = np.asarray(times, dtype=float)

    sol = solve_variance_moments(m0[axis], m1[axis], np.sqrt(l0[axis]), np.sqrt(l1[axis]), times)
    lam = l0[None, :] ** (1 - times[:, None]) * l1[None, :] ** times[:, None]
    lam_dot = lam * np.log(l1 / l0)[None, :]
    lam[:, axis] = sol.sigmas ** 2
    means = np.repeat(m0[None, :], len(times), axis=0)
    means[:, axis] = sol.means[:, 0]

    # exact velocities of the axis coordinate
    h = 1e-6
    tp, tm = np.minimum(times + h, 1.0 + h), times - h
    sp, sm = sol.sigma(tp), sol.sigma(tm)
    mp, mm = sol.mean(tp)[:, 0], sol.mean(tm)[:, 0]
    lam_dot[:, axis] = (sp ** 2 - sm ** 2) / (2 * h)
    mdot = np.zeros_like(means)
    mdot[:, axis] = (mp - mm) / (2 * h)

    others = [i for i in range(d) if i != axis]
    dist_sq = sol.dist_sq + 0.125 * float(np.sum(np.log(l1[others] / l0[others]) ** 2))
    curve = _diag_curve(times, means, lam, lam_dot, mdot, dist_sq)
    curve.info["variance_solution"] = sol
    return curve


def product_upper_bound(m0, m1, lambda0, lambda1) -> float:
    """Upper bound ``Σ_i D_var(|δ_i|, √λ_i(0), √λ_i(1))²`` for diagonal data.

    Coordinate-wise product curves are admissible, so this bounds the
    squared moment distance for any mean shift.
    """
    m0, m1 = np.asarray(m0, float), np.asarray(m1, float)
    l0, l1 = np.asarray(lambda0, float), np.asarray(lambda1, float)
    return float(sum(solve_variance_moments(m0[i], m1[i], np.sqrt(l0[i]), np.sqrt(l1[i]),
                                            times=[0.0]).dist_sq for i in range(len(m0))))


# ---------------------------------------------------------------------------
# shooting


class _Layout:
    """Packing of (α, Z0, Q) and of terminal residuals into flat vectors."""

    def __init__(self, d: int, constrained: bool):
        self.d = d
        self.constrained = constrained
        self.iu = np.triu_indices(d)
        self.iu1 = np.triu_indices(d, 1)
        self.n_alpha = d
        self.n_sym = len(self.iu[0])
        self.n_skew = len(self.iu1[0]) if constrained else 0
        self.size = self.n_alpha + self.n_sym + self.n_skew

    def unpack(self, P: np.ndarray):
        P = np.atleast_2d(P)
        d, b = self.d, P.shape[0]
        alpha = P[:, :d]
        Z = np.zeros((b, d, d))
        Z[:, self.iu[0], self.iu[1]] = P[:, d:d + self.n_sym]
        Z = Z + np.swapaxes(Z, 1, 2) - Z * np.eye(d)
        Q = np.zeros((b, d, d))
        if self.constrained:
            Q[:, self.iu1[0], self.iu1[1]] = P[:, d + self.n_sym:]
            Q = Q - np.swapaxes(Q, 1, 2)
        return alpha, Z, Q

    def pack(self, alpha, Z, Q=None) -> np.ndarray:
        parts = [np.asarray(alpha, float), np.asarray(Z, float)[self.iu]]
        if self.constrained:
            parts.append(np.asarray(Q, float)[self.iu1])
        return np.concatenate(parts)


def _integrate(alpha, Z0, Q, m0, A0, times, keep: bool = False):
    """Batched RK4 for ``ṁ = AAᵀα, Ȧ = AZ, Ż = ZQ − QZ − uuᵀ`` with ``u = Aᵀα``."""
    b = alpha.shape[0]
    m = np.broadcast_to(m0, (b,) + m0.shape).copy()
    A = np.broadcast_to(A0, (b,) + A0.shape).copy()
    Z = Z0.copy()

    def rhs(m, A, Z):
        u = np.einsum("pji,pj->pi", A, alpha)
        md = np.einsum("pij,pj->pi", A, u)
        Ad = A @ Z
        Zd = Z @ Q - Q @ Z - u[:, :, None] * u[:, None, :]
        return md, Ad, Zd

    if keep:
        ms, As, Zs = [m.copy()], [A.copy()], [Z.copy()]
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        k1 = rhs(m, A, Z)
        k2 = rhs(m + 0.5 * h * k1[0], A + 0.5 * h * k1[1], Z + 0.5 * h * k1[2])
        k3 = rhs(m + 0.5 * h * k2[0], A + 0.5 * h * k2[1], Z + 0.5 * h * k2[2])
        k4 = rhs(m + h * k3[0], A + h * k3[1], Z + h * k3[2])
        m = m + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        A = A + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Z = Z + (h / 6) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if keep:
            ms.append(m.copy())
            As.append(A.copy())
            Zs.append(Z.copy())
    if keep:
        return np.stack(ms, 1), np.stack(As, 1), np.stack(Zs, 1)
    return m, A, Z


class _Problem:
    def __init__(self, m0, C0, m1, C1, R, times):
        self.m0, self.m1 = m0, m1
        self.C0, self.C1 = C0, C1
        self.A0 = spd.sym_sqrt(C0)
        self.C1h = spd.sym_sqrt(C1)
        self.C1ih = spd.sym_invsqrt(C1)
        self.R = R
        self.times = times
        self.layout = _Layout(len(m0), R is not None)
        self.scale_C = max(np.linalg.norm(C1), 1e-300)

    def terminal(self, P, m1=None):
        m1 = self.m1 if m1 is None else m1
        alpha, Z, Q = self.layout.unpack(P)
        m, A, _ = _integrate(alpha, Z, Q, self.m0, self.A0, self.times)
        rm = m - m1
        if self.R is None:
            C = A @ np.swapaxes(A, 1, 2)
            D = C - self.C1
            rc = D[:, self.layout.iu[0], self.layout.iu[1]]
        else:
            D = A - self.C1h @ self.R
            rc = D.reshape(len(P), -1)
        return np.concatenate([rm, rc], axis=1), m, A

    def report_residual(self, m, A, m1=None) -> float:
        m1 = self.m1 if m1 is None else m1
        C = A @ A.T
        r = np.linalg.norm(C - self.C1) + np.linalg.norm(m - m1)
        if self.R is not None:
            r += np.linalg.norm(self.C1ih @ A - self.R)
        return float(r)


def _newton(prob: _Problem, p0: np.ndarray, tol: float, max_iter: int, m1=None):
    p = p0.copy()
    with np.errstate(all="ignore"):
        F, m, A = prob.terminal(p[None], m1)
    r, res = F[0], prob.report_residual(m[0], A[0], m1)
    if not np.isfinite(res):
        return p, np.inf, False, 0
    n = len(p)
    for it in range(max_iter):
        if res < tol:
            return p, res, True, it
        h = 1e-6 * np.maximum(1.0, np.abs(p))
        Pp = p[None, :] + np.diag(h)
        Pm = p[None, :] - np.diag(h)
        with np.errstate(all="ignore"):
            Fb, _, _ = prob.terminal(np.vstack([Pp, Pm]), m1)
        J = ((Fb[:n] - Fb[n:]) / (2 * h[:, None])).T
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r))):
            return p, res, False, it
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam, nr = 1.0, np.linalg.norm(r)
        while lam > 1e-4:
            with np.errstate(all="ignore"):
                F2, m2, A2 = prob.terminal((p + lam * step)[None], m1)
            if np.linalg.norm(F2[0]) < (1 - 1e-4 * lam) * nr:
                break
            lam *= 0.5
        else:
            return p, res, False, it
        p = p + lam * step
        r, res = F2[0], prob.report_residual(m2[0], A2[0], m1)
    return p, res, res < tol, max_iter


def _bch_residual(B, M):
    Ba = spd.skew_part(B)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return expm(B) @ expm(-Ba) - M


def constrained_equal_mean(C0, C1, R, max_iter: int = 60, tol: float = 1e-13):
    """Explicit geodesics for equal means and prescribed terminal rotation.

    Solves ``e^{B} e^{−B^asym} = C0^{-1/2} C1^{1/2} R`` for ``B`` by Newton's
    method; then ``A_t = C0^{1/2} e^{tB} e^{−tB^asym}``, ``Z0 = B^sym``,
    ``Q = −B^asym`` and the squared distance is ``½‖B^sym‖²_HS``.  In d = 2 the
    starts ``log M ± 2π J`` are tried as well, so up to three branches are
    returned, sorted by distance.

    Returns
    -------
    list of (B, dist_sq)
    """
    C0 = spd.as_symmetric(C0)
    C1 = spd.as_symmetric(C1)
    d = C0.shape[0]
    M = spd.sym_invsqrt(C0) @ spd.sym_sqrt(C1) @ np.asarray(R, float)
    L = np.real(logm(M))
    starts = [L]
    if d == 2:
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        starts += [L + 2 * np.pi * J, L - 2 * np.pi * J]
    found = []
    for B in starts:
        B = B.copy()
        for _ in range(max_iter):
            with np.errstate(all="ignore"):
                F = _bch_residual(B, M)
            if not np.all(np.isfinite(F)) or np.linalg.norm(F) < tol:
                break
            h = 1e-7
            Jac = np.empty((d * d, d * d))
            for k in range(d * d):
                E = np.zeros(d * d)
                E[k] = h
                E = E.reshape(d, d)
                with np.errstate(all="ignore"):
                    Jac[:, k] = ((_bch_residual(B + E, M) - _bch_residual(B - E, M)) / (2 * h)).ravel()
            if not np.all(np.isfinite(Jac)):
                break
            step = np.linalg.lstsq(Jac, -F.ravel(), rcond=None)[0].reshape(d, d)
            lam = 1.0
            while lam > 1e-4 and np.linalg.norm(_bch_residual(B + lam * step, M)) >= np.linalg.norm(F):
                lam *= 0.5
            B = B + lam * step
        with np.errstate(all="ignore"):
            final = np.linalg.norm(_bch_residual(B, M))
        if final < 1e-10:
            dist = 0.5 * float(np.sum(spd.sym_part(B) ** 2))
            if not any(np.linalg.norm(B - Bf) < 1e-6 for Bf, _ in found):
                found.append((B, dist))
    found.sort(key=lambda x: x[1])
    return found


def _curve_from_params(prob: _Problem, p: np.ndarray, res: float, ok: bool) -> MomentCurve:
    lay = prob.layout
    alpha, Z0, Q = lay.unpack(p)
    m, A, Z = _integrate(alpha, Z0, Q, prob.m0, prob.A0, prob.times, keep=True)
    m, A, Z, alpha, Q = m[0], A[0], Z[0], alpha[0], Q[0]
    covs = A @ np.swapaxes(A, 1, 2)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    rots = np.array([spd.sym_invsqrt(C) @ a for C, a in zip(covs, A)])
    u = np.einsum("kji,j->ki", A, alpha)
    mdot = np.einsum("kij,kj->ki", A, u)
    cdot = 2.0 * A @ Z @ np.swapaxes(A, 1, 2)
    dens = np.sum(u * u, axis=1) + np.sum(Z * Z, axis=(1, 2))
    dist_sq = 0.5 * float(np.trapezoid(dens, prob.times))
    curve = MomentCurve(times=prob.times, means=m, covs=covs, roots=A, rotations=rots,
                        alpha=alpha, skewQ=Q if lay.constrained else None, dist_sq=dist_sq,
                        mean_dots=mdot, cov_dots=cdot, residual=res, converged=ok)
    curve.info["density_spread"] = float(np.ptp(dens))
    curve.info["Z0"] = Z0[0]
    return curve


def _solve_with_continuation(prob: _Problem, p0: np.ndarray, p_equal: Optional[np.ndarray],
                             tol: float, max_iter: int):
    p, res, ok, _ = _newton(prob, p0, tol, max_iter)
    if ok or p_equal is None:
        return p, res, ok
    shift = prob.m1 - prob.m0
    for steps in (4, 16, 64):
        q = p_equal.copy()
        good = True
        for s in np.linspace(0.0, 1.0, steps + 1)[1:]:
            target = prob.m0 + s * shift
            q, res_s, ok_s, _ = _newton(prob, q, tol if s == 1.0 else max(tol, 1e-8),
                                        max_iter, m1=target)
            if not ok_s:
                good = False
                break
        if good:
            return q, res_s, True
    best = p if res <= res_s else q
    return best, min(res, res_s), False


def shoot_moment_geodesic(m0, C0, m1, C1, rotation_constraint=None, tol: float = 1e-9,
                          N: int = 200, max_iter: int = 50) -> MomentCurve:
    """Solve the moment geodesic boundary value problem by shooting.

    Parameters
    ----------
    m0, m1 : array_like
        End means.
    C0, C1 : array_like
        Strictly PD end covariances.
    rotation_constraint : array_like, optional
        Terminal co-rotation ``R ∈ SO(d)``; the end root must equal
        ``C1^{1/2} R``.  None solves the free problem (``Q = 0``).
    tol : float
        Bound on ``‖C(1) − C1‖_HS + |m(1) − m1|`` (plus
        ``‖C1^{-1/2}A(1) − R‖_HS`` when constrained).
    N : int
        Number of RK4 steps on [0, 1].

    Returns
    -------
    MomentCurve
        With ``alpha``, ``skewQ``, ``dist_sq`` and ``info['branches']`` (all
        converged solutions found, sorted by distance).

    Raises
    ------
    NoConvergence
        With ``info['last']`` holding the best curve found.
    """
    m0 = np.atleast_1d(np.asarray(m0, dtype=float))
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    C0 = spd.as_symmetric(C0)
    C1 = spd.as_symmetric(C1)
    spd.sym_invsqrt(C0)
    spd.sym_invsqrt(C1)
    d = len(m0)
    R = None
    if rotation_constraint is not None:
        R = np.asarray(rotation_constraint, dtype=float)
        if np.linalg.norm(R.T @ R - np.eye(d)) > 1e-8 or np.linalg.det(R) <= 0:
            raise PreconditionError("rotation_constraint must lie in SO(d)")
    times = uniform_grid(N)
    prob = _Problem(m0, C0, m1, C1, R, times)
    lay = prob.layout

    starts: List[Tuple[np.ndarray, np.ndarray]] = []
    Cmid = spd.spd_geodesic(C0, C1, 0.5)
    alpha0 = np.linalg.solve(Cmid, m1 - m0)
    if R is None:
        Z0 = 0.5 * spd.sym_log(spd.symmetrize(spd.sym_invsqrt(C0) @ C1 @ spd.sym_invsqrt(C0)))
        p_eq = lay.pack(np.zeros(d), Z0)
        starts.append((lay.pack(alpha0, Z0), p_eq))
    else:
        for B, _ in constrained_equal_mean(C0, C1, R):
            p_eq = lay.pack(np.zeros(d), spd.sym_part(B), -spd.skew_part(B))
            starts.append((lay.pack(alpha0, spd.sym_part(B), -spd.skew_part(B)), p_eq))
        if not starts:
            Z0 = 0.5 * spd.sym_log(spd.symmetrize(spd.sym_invsqrt(C0) @ C1 @ spd.sym_invsqrt(C0)))
            p_eq = lay.pack(np.zeros(d), Z0, np.zeros((d, d)))
            starts.append((p_eq.copy(), None))

    branches = []
    best = None
    for p0, p_eq in starts:
        if np.allclose(m0, m1) and p_eq is not None:
            p0 = p_eq
        p, res, ok = _solve_with_continuation(prob, p0, p_eq, tol, max_iter)
        curve = _curve_from_params(prob, p, res, ok)
        if ok:
            if not any(abs(b.dist_sq - curve.dist_sq) < 1e-9 and
                       np.allclose(b.info["Z0"], curve.info["Z0"], atol=1e-7) for b in branches):
                branches.append(curve)
        if best is None or (res, curve.dist_sq) < (best.residual, best.dist_sq):
            best = curve
    if not branches:
        raise NoConvergence(f"shooting residual {best.residual:.3e} above tol {tol:g}",
                            residual=best.residual, last=best)
    branches.sort(key=lambda c: c.dist_sq)
    out = branches[0]
    out.info["branches"] = [{"alpha": b.alpha, "Z0": b.info["Z0"], "Q": b.skewQ,
                             "dist_sq": b.dist_sq, "residual": b.residual} for b in branches]
    out.info["apriori_ok"] = apriori_cov_ok(out)
    return out


def rotation_search(m0, C0, m1, C1, n_grid: int = 24, tol: float = 1e-9, N: int = 200):
    """Minimize the rotation-constrained distance over SO(2).

    A grid over the angle is refined by a bounded scalar search around the
    best grid point.

    Returns
    -------
    theta : float
    dist_sq : float
    """
    C0 = spd.as_symmetric(C0)
    if C0.shape[0] != 2:
        raise UnsupportedGeometry("rotation search is implemented for d = 2 only")

    def value(theta):
        c, s = np.cos(theta), np.sin(theta)
        R = np.array([[c, -s], [s, c]])
        try:
            return shoot_moment_geodesic(m0, C0, m1, C1, R, tol=tol, N=N).dist_sq
        except NoConvergence:
            return np.inf

    grid = np.linspace(-np.pi, np.pi, n_grid, endpoint=False)
    vals = np.array([value(t) for t in grid])
    k = int(np.argmin(vals))
    h = 2 * np.pi / n_grid
    res = minimize_scalar(value, bounds=(grid[k] - h, grid[k] + h), method="bounded",
                          options={"xatol": 1e-10})
    if res.fun <= vals[k]:
        return float(res.x), float(res.fun)
    return float(grid[k]), float(vals[k])


def apriori_cov_ok(curve: MomentCurve, slack: float = 1e-8) -> bool:
    """Check ``C0 e^{−2√(2I)} ≼ C_t ≼ C0 e^{2√(2I)}`` along a curve.

    ``I`` is the moment action (``curve.dist_sq``); the bound follows from
    ``|d/dt log⟨ξ, C_t ξ⟩| ≤ 2 (⟨ṁ, C⁻¹ṁ⟩ + ¼ tr(ĊC⁻¹ĊC⁻¹))^{1/2}``.
    """
    I = curve.dist_sq if curve.dist_sq is not None else action_moment(curve).cov_form
    f = np.exp(2.0 * np.sqrt(2.0 * max(I, 0.0)))
    C0 = curve.covs[0]
    sc = np.linalg.norm(C0)
    for C in curve.covs:
        if spd.psd_min_eig(C - C0 / f) < -slack * sc or spd.psd_min_eig(C0 * f - C) < -slack * sc:
            return False
    return True
