import numpy as np
import pytest
from scipy.optimize import minimize

from covot import spd
from covot.errors import NegativeEigenvalue, NonSymmetric, SingularMatrix, SizeExceeded

from _instances import random_spd


def test_sym_sqrt_examples():
    np.testing.assert_allclose(spd.sym_sqrt(4 * np.eye(2)), 2 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(spd.sym_sqrt(np.diag([1.0, 9.0])), np.diag([1.0, 3.0]), atol=1e-14)
    C = np.array([[2.0, 1.0], [1.0, 2.0]])
    S = spd.sym_sqrt(C)
    np.testing.assert_allclose(S @ S, C, atol=1e-12)
    u, v = np.array([1.0, -1.0]) / np.sqrt(2), np.array([1.0, 1.0]) / np.sqrt(2)
    np.testing.assert_allclose(S @ u, u, atol=1e-12)
    np.testing.assert_allclose(S @ v, np.sqrt(3) * v, atol=1e-12)


@pytest.mark.parametrize("d", [1, 2, 5, 10])
def test_sym_sqrt_squares_back(rng, d):
    C = random_spd(rng, d, 1e-3, 1e3)
    S = spd.sym_sqrt(C)
    assert np.linalg.norm(S @ S - C, 2) <= 1e-11 * np.linalg.norm(C, 2)
    np.testing.assert_allclose(S, S.T, atol=0)


def test_sym_log_examples():
    np.testing.assert_allclose(spd.sym_log(np.eye(3)), np.zeros((3, 3)), atol=1e-15)
    np.testing.assert_allclose(spd.sym_log(np.diag([np.e ** 2, np.e ** -1])), np.diag([2.0, -1.0]),
                               atol=1e-14)
    C = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert np.linalg.norm(spd.sym_exp(spd.sym_log(C)) - C) < 1e-12


def test_spd_power():
    np.testing.assert_allclose(spd.spd_power(4 * np.eye(2), 0.5), 2 * np.eye(2), atol=1e-14)
    C = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(spd.spd_power(C, 1.0), C, atol=1e-14)
    np.testing.assert_allclose(spd.spd_power(C, -1.0), np.linalg.inv(C), atol=1e-13)


def test_norms():
    assert spd.norms(np.eye(3)) == pytest.approx((np.sqrt(3), 1.0), abs=1e-15)
    assert spd.norms(np.diag([3.0, -4.0])) == pytest.approx((5.0, 4.0), abs=1e-15)
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    v = np.ones(2)
    for _ in range(200):
        v = M.T @ (M @ v)
        v /= np.linalg.norm(v)
    power = np.sqrt(v @ M.T @ M @ v)
    assert spd.norms(M)[1] == pytest.approx(power, rel=1e-12)
    assert spd.norms(M)[1] == pytest.approx(1 + np.sqrt(2), rel=1e-12)


def test_preconditions():
    with pytest.raises(NonSymmetric):
        spd.sym_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(NegativeEigenvalue):
        spd.sym_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(SingularMatrix):
        spd.sym_invsqrt(np.diag([1.0, 0.0]))
    with pytest.raises(SingularMatrix):
        spd.sym_log(np.diag([1.0, 0.0]))
    with pytest.raises(SizeExceeded):
        spd.sym_sqrt(np.eye(65))
    np.testing.assert_allclose(spd.sym_sqrt(np.diag([4.0, 0.0])), np.diag([2.0, 0.0]))


def test_geodesic_examples():
    np.testing.assert_allclose(spd.spd_geodesic(np.eye(2), 4 * np.eye(2), 0.5), 2 * np.eye(2),
                               atol=1e-14)
    C0 = np.array([[2.0, 1.0], [1.0, 2.0]])
    C1 = np.array([[3.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(spd.spd_geodesic(C0, C1, 0.0), C0, atol=1e-10)
    np.testing.assert_allclose(spd.spd_geodesic(C0, C1, 1.0), C1, atol=1e-10)
    D0, D1 = np.diag([1.0, 3.0]), np.diag([2.0, 0.5])
    np.testing.assert_allclose(spd.spd_geodesic(D0, D1, 0.3),
                               np.diag(np.diag(D0) ** 0.7 * np.diag(D1) ** 0.3), atol=1e-13)


def _chol_params_to_spd(p):
    L = np.array([[np.exp(p[0]), 0.0], [p[1], np.exp(p[2])]])
    return L @ L.T


def test_geodesic_matches_brute_force_action_minimizer():
    C0 = np.array([[2.0, 1.0], [1.0, 2.0]])
    C1 = np.array([[3.0, 0.0], [0.0, 1.0]])
    N = 24
    h = 1.0 / N

    def to_params(C):
        L = np.linalg.cholesky(C)
        return np.array([np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])])

    def action(z):
        Cs = [C0] + [_chol_params_to_spd(z[3 * k:3 * k + 3]) for k in range(N - 1)] + [C1]
        total = 0.0
        for a, b in zip(Cs[:-1], Cs[1:]):
            # Simpson rule on the linear segment
            for wgt, s in ((1 / 6, 0.0), (4 / 6, 0.5), (1 / 6, 1.0)):
                K = (b - a) @ np.linalg.inv((1 - s) * a + s * b)
                total += wgt * 0.125 * np.trace(K @ K) / h
        return total

    z0 = np.concatenate([to_params((1 - t) * C0 + t * C1) for t in np.arange(1, N) * h])
    res = minimize(action, z0, method="BFGS", options={"gtol": 1e-9, "maxiter": 5000})
    mid = _chol_params_to_spd(res.x[3 * (N // 2 - 1):3 * (N // 2)])
    np.testing.assert_allclose(mid, spd.spd_geodesic(C0, C1, 0.5), atol=1e-3)
    assert res.fun == pytest.approx(spd.spd_dist_sq(C0, C1), rel=1e-3)


def test_affine_invariance_and_metric_symmetry(rng):
    for d in (2, 3, 4):
        C, D = random_spd(rng, d), random_spd(rng, d)
        G = rng.normal(size=(d, d)) + 2 * np.eye(d)
        for t in (0.25, 0.5, 0.9):
            lhs = spd.spd_geodesic(G @ C @ G.T, G @ D @ G.T, t)
            rhs = G @ spd.spd_geodesic(C, D, t) @ G.T
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(rhs)
        mid = spd.spd_geodesic(C, D, 0.5)
        np.testing.assert_allclose(mid, mid.T, atol=0)
        assert np.linalg.eigvalsh(mid).min() > 0
        assert abs(spd.spd_dist_sq(C, D) - spd.spd_dist_sq(D, C)) < 1e-10


def test_spd_matrix_json_round_trip():
    S = spd.SpdMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    obj = S.to_json()
    assert obj["dim"] == 2
    back = spd.SpdMatrix.from_json(obj)
    np.testing.assert_array_equal(np.asarray(back), np.asarray(S))
    assert S.strictly_positive and S.rank == 2
