"""Acceptance criteria, one test per criterion with a printed pass/fail line."""
import time

import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.optimize import minimize

from covot import spd
from covot.flows import (
    ParticleEnsemble, QuadraticTarget, condition_kappa, covariance_moment_flow,
    decay_report, eks_simulate, ou_contraction_check, variance_moment_flow,
)
from covot.measures import Gaussian
from covot.moment_geodesics import adapted_root, shoot_moment_geodesic, solve_variance_moments
from covot.ot_core import solve_w2
from covot.shape_geodesics import constrained_trajectories, fixed_point_omega

from _instances import alltoone, random_spd, rectangle, symmetric_normalized
from conftest import record_criterion


def flow_instances(seed=6, count=20):
    """Random (m0, C0, x0, B) with d ≤ 3 and eigenvalues log-uniform in [1/4, 4]."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        d = 1 + k % 3
        out.append((rng.normal(size=d), random_spd(rng, d), rng.normal(size=d), random_spd(rng, d)))
    return out


# ---------------------------------------------------------------------------
# 1. splitting identity


def _particle_curve(rng, n=6, d=2):
    a, b, c = rng.normal(size=(3, n, d))
    w = rng.uniform(0.5, 1.5, size=n)
    return a, b, c, w / w.sum()


def _split_terms(a, b, c, w, N=500):
    t = np.linspace(0.0, 1.0, N + 1)
    X = a[None] + b[None] * t[:, None, None] + c[None] * np.sin(np.pi * t)[:, None, None]
    V = b[None] + c[None] * np.pi * np.cos(np.pi * t)[:, None, None]
    m = np.einsum("i,tid->td", w, X)
    md = np.einsum("i,tid->td", w, V)
    Y, Yd = X - m[:, None], V - md[:, None]
    C = np.einsum("i,tia,tib->tab", w, Y, Y)
    Cd = np.einsum("i,tia,tib->tab", w, Yd, Y)
    Cd = Cd + np.swapaxes(Cd, 1, 2)

    def cov_dot(s):
        x = a + b * s + c * np.sin(np.pi * s)
        v = b + c * np.pi * np.cos(np.pi * s)
        y, yd = x - w @ x, v - w @ v
        K = (yd * w[:, None]).T @ y
        return K + K.T

    roots, _ = adapted_root(C, spd.sym_sqrt(C[0]), t, cov_dot)
    full = np.empty(N + 1)
    moment = np.empty(N + 1)
    shape = np.empty(N + 1)
    for k in range(N + 1):
        Ci = np.linalg.inv(C[k])
        full[k] = 0.5 * np.einsum("i,id,de,ie->", w, V[k], Ci, V[k])
        K = Cd[k] @ Ci
        moment[k] = 0.5 * md[k] @ Ci @ md[k] + 0.125 * np.trace(K @ K)
        A = roots[k]
        Ai = np.linalg.inv(A)
        Adot = 0.5 * np.linalg.solve(A, Cd[k].T).T
        xh = (Y[k]) @ Ai.T
        vh = (V[k] - md[k] - xh @ Adot.T) @ Ai.T
        shape[k] = 0.5 * np.einsum("i,id,id->", w, vh, vh)
    return simpson(full, x=t), simpson(moment, x=t), simpson(shape, x=t)


def test_criterion_01_splitting_identity():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        full, moment, shape = _split_terms(*_particle_curve(rng))
        worst = max(worst, abs(full - moment - shape) / full)
    ok = worst < 1e-5
    record_criterion(1, ok, f"max relative gap {worst:.2e} (tol 1e-5)")
    assert ok


# ---------------------------------------------------------------------------
# 2. variance moments vs direct minimization


def _direct_variance(m0, m1, s0, s1, N=400):
    """Minimize the exact action of piecewise-linear curves in (m, σ)."""
    h = 1.0 / N
    d = len(m0)
    t = np.linspace(0.0, 1.0, N + 1)
    m_init = m0[None] + t[:, None] * (m1 - m0)[None]
    ls_init = (1 - t) * np.log(s0) + t * np.log(s1) + 0.5 * np.sin(np.pi * t)

    def unpack(z):
        M = np.vstack([m0, z[:(N - 1) * d].reshape(N - 1, d), m1])
        L = np.concatenate([[np.log(s0)], z[(N - 1) * d:], [np.log(s1)]])
        return M, L

    def f(z):
        M, L = unpack(z)
        S = np.exp(L)
        dM, dS = np.diff(M, axis=0), np.diff(S)
        num = np.sum(dM ** 2, axis=1) + dS ** 2
        den = 2 * h * S[:-1] * S[1:]
        val = np.sum(num / den)
        g_num_M = 2 * dM / den[:, None]
        gM = np.zeros_like(M)
        gM[:-1] -= g_num_M
        gM[1:] += g_num_M
        gS = np.zeros_like(S)
        gS[:-1] -= 2 * dS / den
        gS[1:] += 2 * dS / den
        q = num / den
        gS[:-1] -= q / S[:-1]
        gS[1:] -= q / S[1:]
        gL = gS * S
        return val, np.concatenate([gM[1:-1].ravel(), gL[1:-1]])

    z0 = np.concatenate([m_init[1:-1].ravel(), ls_init[1:-1]])
    res = minimize(f, z0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 20000, "maxcor": 30, "ftol": 1e-15, "gtol": 1e-11})
    return res.fun


def test_criterion_02_variance_moments():
    rng = np.random.default_rng(2)
    worst_rel = worst_bd = worst_beta = 0.0
    for k in range(50):
        d = 1 + k % 2
        m0 = rng.normal(size=d)
        m1 = m0 + rng.normal(size=d) * rng.uniform(0.0, 1.5)
        s0, s1 = np.exp(rng.uniform(np.log(0.3), np.log(3.0), size=2))
        sol = solve_variance_moments(m0, m1, s0, s1)
        direct = _direct_variance(m0, m1, s0, s1)
        worst_rel = max(worst_rel, abs(direct - sol.dist_sq) / sol.dist_sq)
        bd = max(abs(sol.sigma(0.0) - s0), abs(sol.sigma(1.0) - s1),
                 float(np.max(np.abs(sol.mean(0.0) - m0))), float(np.max(np.abs(sol.mean(1.0) - m1))))
        worst_bd = max(worst_bd, bd)
        worst_beta = max(worst_beta, abs(sol.beta - np.sqrt(2.0 * sol.dist_sq)) / sol.beta)
    ok = worst_rel < 1e-3 and worst_bd < 1e-10 and worst_beta < 1e-14
    record_criterion(2, ok, f"rel gap {worst_rel:.2e}, boundary {worst_bd:.1e}, "
                            f"beta rel {worst_beta:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. SPD geodesic by shooting


def test_criterion_03_spd_geodesic_by_shooting():
    rng = np.random.default_rng(3)
    worst_hs = worst_d = 0.0
    for k in range(20):
        d = 2 + k % 2
        C0, C1 = random_spd(rng, d), random_spd(rng, d)
        m = rng.normal(size=d)
        curve = shoot_moment_geodesic(m, C0, m, C1, N=200)
        for idx in range(0, 201, 20):
            t = curve.times[idx]
            worst_hs = max(worst_hs, np.linalg.norm(curve.covs[idx] - spd.spd_geodesic(C0, C1, t)))
        worst_d = max(worst_d, abs(curve.dist_sq - spd.spd_dist_sq(C0, C1)))
    ok = worst_hs < 1e-6 and worst_d < 1e-8
    record_criterion(3, ok, f"max HS gap {worst_hs:.1e}, max D² gap {worst_d:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. ω fixed point, Dirac family


def test_criterion_04_dirac_family():
    rng = np.random.default_rng(4)
    worst_w = worst_d = slowest = 0.0
    for _ in range(5):
        rho = rng.uniform(0.05, 0.95, size=2)
        mu0, mu1 = alltoone(rho)
        t0 = time.perf_counter()
        res = fixed_point_omega(mu0, mu1)
        slowest = max(slowest, time.perf_counter() - t0)
        omega = np.arccos(rho)
        worst_w = max(worst_w, float(np.max(np.abs(res.omega - omega))))
        worst_d = max(worst_d, abs(res.constrained_dist_sq - omega @ omega))
    ok = worst_w < 1e-10 and worst_d < 1e-9 and slowest < 1.0
    record_criterion(4, ok, f"ω gap {worst_w:.1e}, dist gap {worst_d:.1e}, slowest {slowest:.3f}s")
    assert ok


# ---------------------------------------------------------------------------
# 5. rectangle fixed point


def test_criterion_05_rectangle():
    omega_star = np.array([0.10, 0.15])
    t0 = time.perf_counter()
    mu0, mu1 = rectangle(omega_star, n=41)
    res = fixed_point_omega(mu0, mu1)
    fam = constrained_trajectories(res, np.linspace(0.1, 0.9, 9))
    elapsed = time.perf_counter() - t0
    gap_w = float(np.max(np.abs(res.omega - omega_star)))
    gap_m = float(np.max(np.abs(fam.second_moments() - 1.0)))
    ok = gap_w < 1e-3 and gap_m < 1e-5 and elapsed < 30.0
    record_criterion(5, ok, f"ω gap {gap_w:.1e}, second-moment gap {gap_m:.1e}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6-8. moment flows and decay


@pytest.fixture(scope="module")
def flow_traces():
    return [covariance_moment_flow(m0, C0, QuadraticTarget(x0, B), T=5.0, N=2000)
            for m0, C0, x0, B in flow_instances()]


def test_criterion_06_flow_closed_form(flow_traces):
    worst = max(max(tr.max_deviation, tr.info["mean_deviation"]) for tr in flow_traces)
    ok = worst < 1e-6
    record_criterion(6, ok, f"max deviation {worst:.1e} over 20 flows")
    assert ok


def _fixed_mean_instances(seed=7, count=10, above=False):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        d = 1 + k % 3
        B = random_spd(rng, d)
        C0 = B + random_spd(rng, d, 0.05, 2.0) if above else random_spd(rng, d)
        x0 = rng.normal(size=d)
        out.append(covariance_moment_flow(x0, C0, QuadraticTarget(x0, B), T=5.0, N=2000))
    return out


def test_criterion_07_gaussian_decay(flow_traces):
    failures = []
    general = [decay_report(tr) for tr in flow_traces]
    for k, rep in enumerate(general):
        for name in ("entropy", "fisher"):
            if not rep.checks[name]:
                failures.append(f"general#{k}:{name}")
    fixed = [decay_report(tr) for tr in _fixed_mean_instances()]
    for k, rep in enumerate(fixed):
        for name in ("entropy_fixed_mean", "fisher_fixed_mean"):
            if not rep.checks[name]:
                failures.append(f"fixed#{k}:{name}")
    above = [decay_report(tr) for tr in _fixed_mean_instances(seed=8, above=True)]
    for k, rep in enumerate(above):
        for name in ("entropy_unit_prefactor", "fisher_unit_prefactor", "fisher_fixed_mean"):
            if not rep.checks.get(name, False):
                failures.append(f"above#{k}:{name}")
    ok = not failures
    record_criterion(7, ok, "all bounds hold on 40 flows" if ok else ", ".join(failures))
    assert ok


def test_criterion_08_w2_decay(flow_traces):
    reports = [decay_report(tr) for tr in flow_traces]
    kappas = [r.constants["kappa"] for r in reports]
    literal = [r.checks["w2_kappa"] for r in reports]
    sharp = [r.checks["w2"] for r in reports]
    ok = all(literal) and all(sharp)
    record_criterion(8, ok, f"κ-prefactor bound {sum(literal)}/20, κ^(1/2)-prefactor bound "
                            f"{sum(sharp)}/20, κ range [{min(kappas):.2f}, {max(kappas):.2f}]")
    assert ok


# ---------------------------------------------------------------------------
# 9. ensemble Kalman sampler


def test_criterion_09_eks_mean_field():
    rng = np.random.default_rng(9)
    target = QuadraticTarget([1.0, -0.5], [[1.0, 0.3], [0.3, 0.6]])
    X0 = rng.multivariate_normal([-1.0, 1.0], [[2.0, -0.4], [-0.4, 1.5]], size=5000)
    t0 = time.perf_counter()
    tr = eks_simulate(ParticleEnsemble(X0, seed=2024), target, T=3.0, dt=1e-3,
                      record=[0.5, 1.0, 2.0, 3.0])
    elapsed = time.perf_counter() - t0
    err = max(float(np.max(tr.mean_rel_error)), float(np.max(tr.cov_rel_error)))
    ok = err < 0.05 and tr.drift_gap < 1e-10 and elapsed < 60.0
    record_criterion(9, ok, f"max rel error {err:.3f}, drift gap {tr.drift_gap:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 10. OU contraction


def test_criterion_10_ou_contraction():
    rng = np.random.default_rng(10)
    ok_all = True
    worst_sat = 0.0
    for k in range(10):
        d = 1 + k % 3
        ga = Gaussian(rng.normal(size=d), random_spd(rng, d))
        gb = Gaussian(rng.normal(size=d), random_spd(rng, d))
        res = ou_contraction_check(ga, gb, T=5.0, N=50)
        ok_all &= res["ok"] and len(res["t"]) >= 50
        C = random_spd(rng, d)
        m = rng.normal(size=d)
        res = ou_contraction_check(Gaussian(m, C), Gaussian(m + rng.normal(size=d), C), T=5.0, N=50)
        ok_all &= res["ok"]
        worst_sat = max(worst_sat, float(np.max(np.abs(res["ratio"][1:] - 1.0))))
    ok = ok_all and worst_sat < 1e-10
    record_criterion(10, ok, f"bound holds: {ok_all}, offset saturation gap {worst_sat:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 11. comparison sandwich


def test_criterion_11_comparison_lower_bound():
    rng = np.random.default_rng(11)
    margins = []
    for k in range(10):
        mu0 = symmetric_normalized(rng, 4 + k)
        mu1 = symmetric_normalized(rng, 3 + (2 * k) % 7)
        w2 = solve_w2(mu0, mu1).cost
        res = fixed_point_omega(mu0, mu1)
        margins.append(res.constrained_dist_sq - 0.5 * w2)
    ok = min(margins) >= -1e-12
    record_criterion(11, ok, f"min margin {min(margins):.3e} over 10 instances")
    assert ok


# ---------------------------------------------------------------------------
# 12. variance-flow LSI decay


def test_criterion_12_variance_flow_lsi():
    bad = []
    for k, (m0, C0, x0, B) in enumerate(flow_instances(seed=12)):
        tr = variance_moment_flow(m0, C0, QuadraticTarget(x0, B), T=5.0, N=2000)
        if not decay_report(tr).checks["entropy_lsi"]:
            bad.append(k)
    ok = not bad
    record_criterion(12, ok, "bound holds on 20 flows" if ok else f"violations at {bad}")
    assert ok
