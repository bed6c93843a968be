import dataclasses

import numpy as np
import pytest

from covot.errors import NotSymmetric, OutOfRange, PreconditionError, UnsupportedGeometry
from covot.measures import EmpiricalMeasure, moments, normalize, reflect_symmetrize
from covot.ot_core import solve_w2
from covot.shape_geodesics import (
    constrained_trajectories, dilate, dilation_factors, fixed_point_omega,
    modulated_distance_symmetric, normalized_w2_geodesic, trajectory_deviation,
)

from _instances import alltoone, rectangle, symmetric_normalized

INTERIOR = np.linspace(0.0, 1.0, 13)[1:-1]


def test_dilation_factors():
    np.testing.assert_array_equal(dilation_factors([0.0, 0.0]), [1.0, 1.0])
    assert dilation_factors([np.pi / 2])[0] == pytest.approx(np.sqrt(np.pi / 2), rel=1e-15)
    assert dilation_factors([np.pi / 2])[0] == pytest.approx(1.2533, abs=1e-4)
    mu = EmpiricalMeasure([[1.0, 2.0]])
    np.testing.assert_array_equal(dilate(mu, [0.0, 0.0]).points, mu.points)
    with pytest.raises(OutOfRange):
        dilation_factors([2.0])


def test_identical_marginals():
    rng = np.random.default_rng(0)
    mu = symmetric_normalized(rng, 6)
    res = fixed_point_omega(mu, mu)
    np.testing.assert_allclose(res.omega, 0.0, atol=1e-10)
    assert res.constrained_dist_sq == pytest.approx(0.0, abs=1e-12)


def test_alltoone_reference():
    mu0, mu1 = alltoone([0.5, 0.5])
    res = fixed_point_omega(mu0, mu1)
    np.testing.assert_allclose(res.omega, np.pi / 3, atol=1e-9)
    assert res.constrained_dist_sq == pytest.approx(2 * np.pi ** 2 / 9, abs=1e-9)
    assert res.constrained_dist_sq == pytest.approx(2.19325, abs=1e-5)
    assert res.residual < 1e-9
    assert res.to_json()["converged"] is True


@pytest.mark.parametrize("rho", [(0.3, 0.8), (0.9, 0.1), (0.6, 0.6, 0.4)])
def test_alltoone_family(rho):
    mu0, mu1 = alltoone(rho)
    res = fixed_point_omega(mu0, mu1)
    omega = np.arccos(rho)
    np.testing.assert_allclose(res.omega, omega, atol=1e-9)
    assert res.constrained_dist_sq == pytest.approx(omega @ omega, abs=1e-9)


def _kinetic_energy(res, n=4001):
    s = np.linspace(0.0, 1.0, n)
    fam = constrained_trajectories(res, s)
    vel = np.gradient(fam.positions, s, axis=0, edge_order=2)
    dens = np.einsum("p,spk->s", fam.masses, vel ** 2)
    return np.trapezoid(dens, s)


def _check_constraints(res, atol):
    fam = constrained_trajectories(res, INTERIOR)
    np.testing.assert_allclose(fam.second_moments(), 1.0, atol=atol)
    cross = fam.cross_moments()
    off = cross - np.einsum("sk,kl->skl", np.einsum("skk->sk", cross), np.eye(cross.shape[1]))
    assert np.max(np.abs(off)) < 1e-12
    np.testing.assert_allclose(fam.means(), 0.0, atol=1e-12)


def test_generic_instances_satisfy_constraints():
    rng = np.random.default_rng(1)
    for k in range(5):
        mu0 = symmetric_normalized(rng, 5 + k)
        mu1 = symmetric_normalized(rng, 4 + 2 * k)
        res = fixed_point_omega(mu0, mu1)
        assert res.residual < 1e-9
        assert np.all(np.abs(np.cos(res.omega) - res.correlations()) < 1e-9)
        assert res.info["clamp_excess"] <= 1e-12
        _check_constraints(res, 1e-9)
        # the stored distance is the kinetic energy of the trajectories
        assert res.constrained_dist_sq == pytest.approx(_kinetic_energy(res), rel=1e-6)
        # an admissible transport curve costs at least W₂²
        assert res.constrained_dist_sq >= solve_w2(mu0, mu1).cost - 1e-12


def test_rectangle_instance():
    mu0, mu1 = rectangle([0.2, 0.05], n=21)
    res = fixed_point_omega(mu0, mu1)
    np.testing.assert_allclose(res.omega, [0.2, 0.05], atol=1e-3)
    _check_constraints(res, 1e-9)


def test_trajectory_endpoints_and_small_omega_limit():
    rng = np.random.default_rng(2)
    mu0, mu1 = symmetric_normalized(rng, 5), symmetric_normalized(rng, 6)
    res = fixed_point_omega(mu0, mu1)
    fam = constrained_trajectories(res, [0.0, 0.3, 1.0])
    np.testing.assert_array_equal(fam.positions[0], fam.start_points)
    np.testing.assert_array_equal(fam.positions[-1], fam.end_points)
    tiny = dataclasses.replace(res, omega=np.full(2, 1e-8))
    s = np.linspace(0, 1, 11)
    fam = constrained_trajectories(tiny, s)
    straight = (1 - s)[:, None, None] * fam.start_points + s[:, None, None] * fam.end_points
    np.testing.assert_allclose(fam.positions, straight, atol=1e-14)
    np.testing.assert_allclose(fam.sampler(3, 0.4), straight[4, 3], atol=1e-14)


def test_preconditions():
    rng = np.random.default_rng(3)
    sym = symmetric_normalized(rng, 5)
    skew = EmpiricalMeasure([[1.0, 1.0], [-1.0, -1.0]])
    with pytest.raises(NotSymmetric):
        fixed_point_omega(skew, sym)
    scaled = EmpiricalMeasure(2 * sym.points, sym.weights)
    with pytest.raises(PreconditionError):
        fixed_point_omega(scaled, sym)
    with pytest.raises(PreconditionError):
        fixed_point_omega(sym, sym, damping=0.0)


def test_symmetrize_option_and_multistart():
    rng = np.random.default_rng(4)
    X = np.abs(rng.normal(size=(5, 2)))
    base = reflect_symmetrize(EmpiricalMeasure(X))
    s = np.sqrt(base.weights @ base.points ** 2)
    raw = EmpiricalMeasure(X / s)
    mu1 = symmetric_normalized(rng, 4)
    res = fixed_point_omega(raw, mu1, symmetrize=True, multistart=True)
    assert res.converged
    fps = res.info["fixed_points"]
    assert 1 <= len(fps) <= 9
    np.testing.assert_array_equal(fps[0], res.omega)
    assert isinstance(res.info["multiple"], bool)


# ---------------------------------------------------------------------------
# split distance


def test_split_identical():
    rng = np.random.default_rng(5)
    mu = symmetric_normalized(rng, 6)
    assert modulated_distance_symmetric(mu, mu) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)


def test_split_same_shape_different_moments():
    rng = np.random.default_rng(6)
    eta = symmetric_normalized(rng, 6)
    mu0 = EmpiricalMeasure(eta.points * [1.0, 2.0] + [0.5, -1.0], eta.weights)
    mu1 = EmpiricalMeasure(eta.points * [0.5, 1.0] + [2.0, -1.0], eta.weights)
    total, shape, moment = modulated_distance_symmetric(mu0, mu1)
    assert shape == pytest.approx(0.0, abs=1e-12)
    assert total == pytest.approx(moment)
    assert moment > 0


def test_split_same_moments_different_shapes():
    rng = np.random.default_rng(7)
    mu0, mu1 = symmetric_normalized(rng, 5), symmetric_normalized(rng, 7)
    total, shape, moment = modulated_distance_symmetric(mu0, mu1)
    assert moment == pytest.approx(0.0, abs=1e-12)
    assert total == pytest.approx(shape)
    assert total >= 0.5 * solve_w2(mu0, mu1).cost


def test_split_rejects_correlated_covariance():
    mu = EmpiricalMeasure([[0.0, 0.0], [1.0, 1.0], [2.0, 1.0]])
    with pytest.raises(UnsupportedGeometry):
        modulated_distance_symmetric(mu, mu)


# ---------------------------------------------------------------------------
# normalized Wasserstein geodesic


def test_normalized_w2_identical_is_constant():
    rng = np.random.default_rng(8)
    mu = symmetric_normalized(rng, 5)
    fam = normalized_w2_geodesic(mu, mu, INTERIOR)
    for k in range(len(INTERIOR)):
        np.testing.assert_allclose(fam.positions[k], fam.start_points, atol=1e-12)


def test_normalized_w2_one_dimensional_trace_matches():
    rng = np.random.default_rng(9)
    mu0 = symmetric_normalized(rng, 7, d=1)
    mu1 = symmetric_normalized(rng, 5, d=1)
    res = fixed_point_omega(mu0, mu1)
    cons = constrained_trajectories(res, INTERIOR)
    for k, s in enumerate(INTERIOR):
        # the constrained arc point a·x + b·y is the normalized chord at s' = b / (a + b)
        a = np.sin(res.omega[0] * (1 - s)) / np.sin(res.omega[0])
        b = np.sin(res.omega[0] * s) / np.sin(res.omega[0])
        fam = normalized_w2_geodesic(mu0, mu1, [b / (a + b)])
        plan = solve_w2(cons.measure_at(k), fam.measure_at(0))
        assert plan.cost < 1e-20


def test_normalized_w2_two_dimensional_deviation_reported():
    rng = np.random.default_rng(10)
    mu0, mu1 = symmetric_normalized(rng, 5), symmetric_normalized(rng, 6)
    cons = constrained_trajectories(fixed_point_omega(mu0, mu1), INTERIOR)
    w2fam = normalized_w2_geodesic(mu0, mu1, INTERIOR)
    for k in range(len(INTERIOR)):
        m, C, _ = moments(w2fam.measure_at(k))
        np.testing.assert_allclose(m, 0.0, atol=1e-12)
        np.testing.assert_allclose(C, np.eye(2), atol=1e-10)
    dev = trajectory_deviation(cons, w2fam)
    print(f"max W2 deviation between constrained and normalized W2 trajectories: {dev:.3e}")
    assert np.isfinite(dev) and dev >= 0.0
