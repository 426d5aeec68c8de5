import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmp import manifold as mf
from dmp.errors import DegenerateSpectrumError, InsufficientSamplesError, InvalidInputError

from oracles import central_difference, naive_covariance, random_orthogonal, random_spd, rel_err

G1 = mf.MetricKind(mf.GRASSMANN, 1)


def point(U, mu=None, C=None, eig=None):
    d = U.shape[0]
    C = np.eye(d) if C is None else C
    eig = np.ones(d) if eig is None else eig
    mu = np.zeros(d) if mu is None else np.asarray(mu, float)
    return mf.ManifoldPoint(C=C, U=U, eigenvalues=eig, mu=mu)


def test_covariance_two_points():
    np.testing.assert_allclose(mf.covariance(np.array([[1.0, -1.0]]), np.zeros(1)), [[2.0]])


def test_covariance_constant_columns():
    H = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 5))
    np.testing.assert_allclose(mf.covariance(H), np.zeros((3, 3)))


def test_covariance_matches_double_loop(rng):
    H = rng.normal(size=(4, 10))
    mean = H.mean(axis=1)
    np.testing.assert_allclose(mf.covariance(H, mean), naive_covariance(H, mean), atol=1e-12)


def test_covariance_needs_two_samples():
    with pytest.raises(InsufficientSamplesError):
        mf.covariance(np.ones((3, 1)))


def test_manifold_point_one_hot_span():
    H = np.zeros((4, 6))
    H[0, :3] = [1, -1, 0.5]
    H[1, 3:] = [2, -2, 0.3]
    p = mf.manifold_point(H, mf.MetricKind(mf.GRASSMANN, 2))
    P = p.projector()
    np.testing.assert_allclose(P, np.diag([1.0, 1.0, 0.0, 0.0]), atol=1e-12)


def test_manifold_point_rank_one(rng):
    v = rng.normal(size=5)
    v /= np.linalg.norm(v)
    H = np.outer(v, rng.normal(size=7))
    p = mf.manifold_point(H, G1)
    assert abs(abs(p.U[:, 0] @ v) - 1.0) < 1e-10


def test_manifold_point_uses_top_eigenvectors(rng):
    H = rng.normal(size=(5, 12))
    p = mf.manifold_point(H, mf.MetricKind(mf.GRASSMANN, 3))
    w, V = np.linalg.eigh(naive_covariance(H, H.mean(axis=1)))
    top = V[:, ::-1][:, :3]
    np.testing.assert_allclose(p.projector(), top @ top.T, atol=1e-10)
    assert np.max(np.abs(p.U.T @ p.U - np.eye(3))) < 1e-9
    assert np.all(np.diff(p.eigenvalues) <= 0) and np.all(p.eigenvalues >= 0)


def test_grassmann_identical_and_orthogonal_lines():
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    assert mf.grassmann_distance(point(e1), point(e1)) == 0.0
    assert mf.grassmann_distance(point(e1), point(e2)) == pytest.approx(0.5)


def test_grassmann_angle():
    th = math.pi / 6
    u = np.array([[1.0], [0.0]])
    v = np.array([[math.cos(th)], [math.sin(th)]])
    Pd = u @ u.T - v @ v.T
    expected = np.sum(Pd * Pd) / 4
    assert mf.grassmann_distance(point(u), point(v)) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(2 * math.sin(th) ** 2 / 4)


def test_affine_grassmann_examples():
    e1 = np.array([[1.0], [0.0]])
    assert mf.affine_grassmann_distance(point(e1, [3, 1]), point(e1, [3, 1])) == 0.0
    # means differ only along the subspace
    assert mf.affine_grassmann_distance(point(e1, [3, 0]), point(e1, [-1, 0])) == pytest.approx(0.0, abs=1e-15)
    assert mf.affine_grassmann_distance(point(e1, [0, 1]), point(e1, [0, 0])) == pytest.approx(0.25)


def test_log_euclidean_examples(rng):
    I = np.eye(2)
    C = random_spd(2, rng)
    assert mf.log_euclidean_distance(point(I, C=C), point(I, C=C), 1e-5) == 0.0
    d = mf.log_euclidean_distance(point(I, C=np.diag([np.e, 1.0])), point(I, C=I), 1e-12)
    assert d == pytest.approx(0.25, abs=1e-10)


def test_log_euclidean_matches_oracle(rng):
    C1, C2 = random_spd(4, rng), random_spd(4, rng)
    eps = 1e-5

    def log_oracle(C):
        w, V = np.linalg.eigh(C + eps * np.eye(4))
        return V @ np.diag(np.log(w)) @ V.T

    expected = np.linalg.norm(log_oracle(C1) - log_oracle(C2)) / 16
    I = np.eye(4)
    assert mf.log_euclidean_distance(point(I, C=C1), point(I, C=C2), eps) == pytest.approx(expected, abs=1e-9)


def test_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        mf.grassmann_distance(point(np.eye(2)[:, :1]), point(np.eye(3)[:, :1]))
    with pytest.raises(InvalidInputError):
        mf.affine_grassmann_distance(point(np.eye(3)[:, :1]), point(np.eye(3)[:, :2]))


def test_metric_kind_validation():
    with pytest.raises(InvalidInputError):
        mf.MetricKind("cosine")
    with pytest.raises(InvalidInputError):
        mf.MetricKind(mf.GRASSMANN, 0)
    with pytest.raises(InvalidInputError):
        mf.MetricKind(mf.LOG_EUCLIDEAN, eps=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(mf.METRIC_KINDS))
def test_metric_symmetry_and_identity(seed, kind):
    rng = np.random.default_rng(seed)
    metric = mf.MetricKind(kind, 2)
    P = mf.manifold_point(rng.normal(size=(4, 9)), metric)
    Q = mf.manifold_point(rng.normal(size=(4, 9)) + 1.0, metric)
    assert mf.distance(P, Q, metric) == mf.distance(Q, P, metric)
    assert mf.distance(P, Q, metric) >= 0
    assert abs(mf.distance(P, P, metric)) < 1e-12


def test_grassmann_rotation_invariance(rng):
    # rotating data inside its own span leaves the subspace unchanged
    H = rng.normal(size=(6, 3)) @ rng.normal(size=(3, 10))
    U = np.linalg.qr(H)[0][:, :3]
    R = random_orthogonal(3, rng)
    H_rot = U @ R @ U.T @ H
    metric = mf.MetricKind(mf.GRASSMANN, 3)
    other = mf.manifold_point(rng.normal(size=(6, 10)), metric)
    a = mf.grassmann_distance(mf.manifold_point(H, metric), other)
    b = mf.grassmann_distance(mf.manifold_point(H_rot, metric), other)
    assert abs(a - b) < 1e-10
    # and replacing U by U R directly
    p = mf.manifold_point(H, metric)
    q = mf.ManifoldPoint(p.C, p.U @ R, p.eigenvalues, p.mu)
    assert abs(mf.grassmann_distance(p, other) - mf.grassmann_distance(q, other)) < 1e-10


def test_alignment_gradient_vanishes_for_identical_batches(rng):
    H = rng.normal(size=(5, 8))
    loss, dHs, dHt = mf.grassmann_alignment(H, H, 3)
    assert loss == 0.0
    assert np.max(np.abs(dHs)) < 1e-9 and np.max(np.abs(dHt)) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_alignment_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    Hs = rng.normal(size=(5, 8))
    Ht = rng.normal(size=(5, 8)) + 0.3
    metric = mf.MetricKind(mf.GRASSMANN, 3)
    dHs, dHt = mf.grassmann_alignment_gradient(Hs, Ht, 3)

    def f_s(X):
        return mf.grassmann_distance(mf.manifold_point(X, metric), mf.manifold_point(Ht, metric))

    def f_t(X):
        return mf.grassmann_distance(mf.manifold_point(Hs, metric), mf.manifold_point(X, metric))

    assert rel_err(dHs, central_difference(f_s, Hs)) < 1e-4
    assert rel_err(dHt, central_difference(f_t, Ht)) < 1e-4


def test_alignment_gradient_wide_features(rng):
    # more feature dimensions than samples: exercises the null-space term
    Hs = rng.normal(size=(9, 5))
    Ht = rng.normal(size=(9, 5))
    metric = mf.MetricKind(mf.GRASSMANN, 4)
    dHs, _ = mf.grassmann_alignment_gradient(Hs, Ht, 4)
    fd = central_difference(
        lambda X: mf.grassmann_distance(mf.manifold_point(X, metric), mf.manifold_point(Ht, metric)), Hs)
    assert rel_err(dHs, fd) < 1e-4


def test_alignment_directional_derivative_inside_subspace(rng):
    Hs = rng.normal(size=(5, 8))
    Ht = rng.normal(size=(5, 8))
    As = Hs - Hs.mean(axis=1, keepdims=True)
    U = np.linalg.svd(As)[0][:, :3]
    direction = U @ U.T @ As     # scales the leading singular values only
    dHs, _ = mf.grassmann_alignment_gradient(Hs, Ht, 3)
    assert abs(np.sum(dHs * direction)) < 1e-6
    h = 1e-5
    metric = mf.MetricKind(mf.GRASSMANN, 3)
    Pt = mf.manifold_point(Ht, metric)
    fp = mf.grassmann_distance(mf.manifold_point(Hs + h * direction, metric), Pt)
    fm = mf.grassmann_distance(mf.manifold_point(Hs - h * direction, metric), Pt)
    assert abs((fp - fm) / (2 * h)) < 1e-6


def test_alignment_degenerate_spectrum():
    H = np.zeros((4, 6))
    H[0] = [1, -1, 1, -1, 1, -1]
    H[1] = [1, 1, -1, -1, 0, 0]
    with pytest.raises(DegenerateSpectrumError):
        mf.grassmann_alignment(H, H + 0.0, 3)   # rank 2 < d' = 3


def test_alignment_loss_finite_difference_metrics(rng):
    Hs = rng.normal(size=(3, 6))
    Ht = rng.normal(size=(3, 6)) + 0.5
    for kind in (mf.AFFINE_GRASSMANN, mf.LOG_EUCLIDEAN):
        metric = mf.MetricKind(kind, 2)
        loss, dHs, dHt = mf.alignment_loss(Hs, Ht, metric)
        assert loss == pytest.approx(mf.alignment_value(Hs, Ht, metric))
        fd = central_difference(lambda X: mf.alignment_value(X, Ht, metric), Hs)
        assert rel_err(dHs, fd) < 1e-4
