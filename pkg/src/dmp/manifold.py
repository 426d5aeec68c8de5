"""Covariance-derived domain representations and manifold alignment metrics.

A batch of layer features ``H`` (d x n, one column per sample) is summarised
as a :class:`ManifoldPoint`: its column mean, sample covariance and the
leading eigenvectors of that covariance. Three distances compare two such
points (Grassmann, affine Grassmann, Log-Euclidean), each scaled by
``1/d**2``. The Grassmann alignment loss also has an exact analytic
gradient with respect to the features, propagated through the singular
vectors of the centred feature matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DegenerateSpectrumError, InsufficientSamplesError, InvalidInputError
from .numdiff import central_difference

GRASSMANN = "grassmann"
AFFINE_GRASSMANN = "affine"
LOG_EUCLIDEAN = "log_euclidean"
METRIC_KINDS = (GRASSMANN, AFFINE_GRASSMANN, LOG_EUCLIDEAN)


@dataclass(frozen=True)
class MetricKind:
    """Which alignment metric to use and its parameters.

    ``d_prime`` is the subspace dimension for the two Grassmann metrics;
    ``None`` means "one less than the batch size", resolved by the caller.
    """

    kind: str = GRASSMANN
    d_prime: int | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise InvalidInputError(f"unknown metric {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.d_prime is not None and self.d_prime < 1:
            raise InvalidInputError(f"d_prime must be >= 1, got {self.d_prime}")
        if self.kind == LOG_EUCLIDEAN and not self.eps > 0:
            raise InvalidInputError("Log-Euclidean metric needs eps > 0")

    def with_d_prime(self, d_prime):
        return MetricKind(self.kind, d_prime, self.eps)


@dataclass(frozen=True)
class ManifoldPoint:
    C: np.ndarray
    U: np.ndarray
    eigenvalues: np.ndarray
    mu: np.ndarray

    @property
    def dim(self):
        return self.C.shape[0]

    def projector(self):
        return self.U @ self.U.T


def covariance(H, mean=None):
    """Unbiased sample covariance of the columns of ``H`` about ``mean``."""
    H = linalg.as_matrix(H, "H")
    d, n = H.shape
    if n < 2:
        raise InsufficientSamplesError(f"covariance needs at least 2 samples, got {n}")
    if mean is None:
        mean = H.mean(axis=1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.shape[0] != d:
        raise InvalidInputError(f"mean has length {mean.shape[0]}, expected {d}")
    Hc = H - mean[:, None]
    C = Hc @ Hc.T / (n - 1)
    return 0.5 * (C + C.T)


def manifold_point(H, metric: MetricKind) -> ManifoldPoint:
    H = linalg.as_matrix(H, "H")
    if H.shape[1] < 2:
        raise InsufficientSamplesError("a manifold point needs at least 2 samples")
    mu = H.mean(axis=1)
    C = covariance(H, mu)
    eig = linalg.sym_eig(C)
    if metric.kind == LOG_EUCLIDEAN:
        U = eig.eigenvectors
    else:
        d_prime = metric.d_prime if metric.d_prime is not None else H.shape[1] - 1
        if d_prime > C.shape[0]:
            raise InvalidInputError(f"d_prime={d_prime} exceeds feature dimension {C.shape[0]}")
        U = eig.eigenvectors[:, :d_prime]
    return ManifoldPoint(C=C, U=U, eigenvalues=np.maximum(eig.eigenvalues, 0.0), mu=mu)


def _check_pair(P, Q, need_same_rank=True):
    if P.dim != Q.dim:
        raise InvalidInputError(f"dimension mismatch: {P.dim} vs {Q.dim}")
    if need_same_rank and P.U.shape != Q.U.shape:
        raise InvalidInputError(f"subspace dimension mismatch: {P.U.shape[1]} vs {Q.U.shape[1]}")


def projector_distance(P, Q):
    """Unscaled, unsquared ``||U_P U_P^T - U_Q U_Q^T||_F``."""
    _check_pair(P, Q)
    return linalg.frobenius(P.projector() - Q.projector())


def displacement_distance(P, Q):
    """``||(I - U_P U_P^T) mu_P - (I - U_Q U_Q^T) mu_Q||_2``."""
    _check_pair(P, Q)
    rp = P.mu - P.U @ (P.U.T @ P.mu)
    rq = Q.mu - Q.U @ (Q.U.T @ Q.mu)
    return float(np.linalg.norm(rp - rq))


def grassmann_distance(P: ManifoldPoint, Q: ManifoldPoint) -> float:
    """``(1/d^2) ||U_P U_P^T - U_Q U_Q^T||_F^2``."""
    return projector_distance(P, Q) ** 2 / P.dim ** 2


def affine_grassmann_distance(P: ManifoldPoint, Q: ManifoldPoint) -> float:
    """``(1/d^2) (||U_P U_P^T - U_Q U_Q^T||_F + ||displacement difference||_2)``.

    The projector term is not squared here, unlike :func:`grassmann_distance`.
    """
    return (projector_distance(P, Q) + displacement_distance(P, Q)) / P.dim ** 2


def log_euclidean_distance(P: ManifoldPoint, Q: ManifoldPoint, eps: float) -> float:
    """``(1/d^2) ||log(C_P + eps I) - log(C_Q + eps I)||_F``."""
    _check_pair(P, Q, need_same_rank=False)
    diff = linalg.matrix_log_spd(P.C, eps) - linalg.matrix_log_spd(Q.C, eps)
    return linalg.frobenius(diff) / P.dim ** 2


def distance(P, Q, metric: MetricKind) -> float:
    if metric.kind == GRASSMANN:
        return grassmann_distance(P, Q)
    if metric.kind == AFFINE_GRASSMANN:
        return affine_grassmann_distance(P, Q)
    return log_euclidean_distance(P, Q, metric.eps)


def _checked_svd(A, r):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    s_next = s[r] if r < s.shape[0] else 0.0
    if s[r - 1] - s_next < linalg.DEGENERACY_RTOL * s[0] or s[r - 1] == 0.0:
        raise DegenerateSpectrumError(
            f"singular value gap {s[r - 1] - s_next:.3g} at d'={r} is below "
            f"{linalg.DEGENERACY_RTOL:g} * sigma_1")
    return U, s, Vt.T


def _projector_gradient(A, r, G, svd=None):
    """Gradient w.r.t. ``A`` of a loss whose derivative w.r.t. the projector
    ``P = U_r U_r^T`` onto the top-``r`` left singular subspace is the
    symmetric ``G``.

    Built from the antisymmetric SVD perturbation coefficients for every
    pair (i inside the subspace, j outside); the rows of ``A``'s column
    complement are handled as singular value zero.
    """
    d, n = A.shape
    U, s, V = svd if svd is not None else _checked_svd(A, r)
    k = s.shape[0]
    GU = G @ U
    g = U.T @ GU
    inner = np.zeros((k, k))
    si = s[:r]
    sj = s[r:]
    coef = 2.0 * g[:r, r:] / (si[:, None] ** 2 - sj[None, :] ** 2)
    # d/dA of sum coef_ij (s_i u_j v_i^T + s_j u_i v_j^T)
    inner[r:, :r] = (coef * si[:, None]).T
    inner[:r, r:] = coef * sj[None, :]
    grad = U @ inner @ V.T
    if d > k:
        null_part = GU[:, :r] - U @ g[:, :r]
        grad += (null_part / si[None, :]) @ V[:, :r].T * 2.0
    return grad


def grassmann_alignment(Hs, Ht, d_prime):
    """Grassmann alignment loss between two batches and its exact gradients.

    Returns ``(loss, dHs, dHt)``. Raises :class:`DegenerateSpectrumError`
    when either batch has no clear gap after its ``d_prime``-th singular
    value; callers skip the alignment gradient for that batch.
    """
    Hs = linalg.as_matrix(Hs, "Hs")
    Ht = linalg.as_matrix(Ht, "Ht")
    if Hs.shape[0] != Ht.shape[0]:
        raise InvalidInputError("source and target features differ in dimension")
    d = Hs.shape[0]
    for H in (Hs, Ht):
        if H.shape[1] < d_prime + 1:
            raise InvalidInputError(f"need at least d'+1={d_prime + 1} samples, got {H.shape[1]}")
        if d_prime > d:
            raise InvalidInputError(f"d_prime={d_prime} exceeds feature dimension {d}")
    As = Hs - Hs.mean(axis=1, keepdims=True)
    At = Ht - Ht.mean(axis=1, keepdims=True)
    svd_s = _checked_svd(As, d_prime)
    svd_t = _checked_svd(At, d_prime)
    Us = svd_s[0][:, :d_prime]
    Ut = svd_t[0][:, :d_prime]
    diff = Us @ Us.T - Ut @ Ut.T
    loss = float(np.sum(diff * diff)) / d ** 2
    G = 2.0 * diff / d ** 2
    dAs = _projector_gradient(As, d_prime, G, svd_s)
    dAt = _projector_gradient(At, d_prime, -G, svd_t)
    # back through the column centring
    dHs = dAs - dAs.mean(axis=1, keepdims=True)
    dHt = dAt - dAt.mean(axis=1, keepdims=True)
    return loss, dHs, dHt


def grassmann_alignment_gradient(Hs, Ht, d_prime):
    _, dHs, dHt = grassmann_alignment(Hs, Ht, d_prime)
    return dHs, dHt


def alignment_value(Hs, Ht, metric: MetricKind):
    d_prime = metric.d_prime if metric.d_prime is not None else min(Hs.shape[1], Ht.shape[1]) - 1
    m = metric.with_d_prime(d_prime)
    return distance(manifold_point(Hs, m), manifold_point(Ht, m), m)


def alignment_loss(Hs, Ht, metric: MetricKind, fd_step=1e-6):
    """Alignment loss and feature gradients for any metric.

    Grassmann uses the analytic SVD-Jacobian gradient. The affine Grassmann
    and Log-Euclidean metrics have no analytic gradient here and fall back
    to central differences over every feature entry.
    """
    if metric.kind == GRASSMANN:
        d_prime = metric.d_prime if metric.d_prime is not None else min(Hs.shape[1], Ht.shape[1]) - 1
        return grassmann_alignment(Hs, Ht, d_prime)
    loss = alignment_value(Hs, Ht, metric)
    dHs = central_difference(lambda X: alignment_value(X, Ht, metric), Hs, fd_step)
    dHt = central_difference(lambda X: alignment_value(Hs, X, metric), Ht, fd_step)
    return loss, dHs, dHt
