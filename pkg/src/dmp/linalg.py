"""Dense double-precision matrix kernel.

Thin wrappers over LAPACK (through :mod:`numpy.linalg`) that validate their
inputs and fix the output conventions every other module relies on:
descending spectra and a deterministic sign for each singular/eigen vector
(the entry of largest magnitude is made positive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalDomainError

#: Relative gap below which neighbouring singular values count as degenerate.
DEGENERACY_RTOL = 1e-8

#: Relative asymmetry tolerated by :func:`sym_eig`.
SYMMETRY_RTOL = 1e-9


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class ThinSvd:
    """Leading ``r`` singular triplets of a matrix.

    ``boundary_gap`` is ``sigma[r-1] - sigma[r]`` (the next singular value is
    taken as zero when ``r`` equals the smaller dimension). ``degenerate`` is
    set when any neighbouring pair among ``sigma[0..r]`` is closer than
    ``DEGENERACY_RTOL * sigma[0]``.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    boundary_gap: float
    degenerate: bool


def as_matrix(A, name="matrix") -> np.ndarray:
    """Return ``A`` as a finite 2-D float64 array or raise InvalidInputError."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Sign multipliers (+1/-1) making the largest-magnitude entry of each
    column positive. Ties go to the first such entry."""
    if vectors.size == 0:
        return np.ones(vectors.shape[1])
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def thin_svd(A, r: int) -> ThinSvd:
    """First ``r`` singular triplets of ``A`` in descending order."""
    A = as_matrix(A, "A")
    k = min(A.shape)
    if not 1 <= r <= k:
        raise InvalidInputError(f"r must be in [1, {k}], got {r}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    signs = fix_signs(U[:, :r])
    Ur = U[:, :r] * signs
    Vr = Vt[:r].T * signs
    s_ext = np.append(s, 0.0)[: r + 1]
    gaps = -np.diff(s_ext)
    tol = DEGENERACY_RTOL * s[0]
    degenerate = bool(s[0] == 0.0 or np.any(gaps < tol))
    return ThinSvd(U=Ur, sigma=s[:r].copy(), V=Vr,
                   boundary_gap=float(gaps[-1]), degenerate=degenerate)


def check_symmetric(C, name="C") -> np.ndarray:
    C = as_matrix(C, name)
    if C.shape[0] != C.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {C.shape}")
    scale = max(np.max(np.abs(C)), np.finfo(float).tiny)
    if np.max(np.abs(C - C.T)) > SYMMETRY_RTOL * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    return 0.5 * (C + C.T)


def sym_eig(C) -> SymEig:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    C = check_symmetric(C)
    w, V = np.linalg.eigh(C)
    w = w[::-1].copy()
    V = V[:, ::-1]
    V = V * fix_signs(V)
    return SymEig(eigenvalues=w, eigenvectors=V)


def matrix_log_spd(C, eps: float) -> np.ndarray:
    """``U log(D + eps I) U^T`` for symmetric positive semidefinite ``C``."""
    if not eps > 0:
        raise InvalidInputError(f"eps must be positive, got {eps}")
    eig = sym_eig(C)
    shifted = eig.eigenvalues + eps
    if np.any(shifted <= 0):
        raise NumericalDomainError(
            f"C + eps*I is not positive definite (min eigenvalue {shifted.min():.3g})")
    V = eig.eigenvectors
    L = (V * np.log(shifted)) @ V.T
    return 0.5 * (L + L.T)


def frobenius(A) -> float:
    return float(np.linalg.norm(A, "fro"))


def svd_left_jacobian(A, r: int, o: int, i: int) -> np.ndarray:
    """Derivative of the leading ``r`` left singular vectors of ``A`` with
    respect to the single entry ``A[o, i]``.

    Uses ``dU = U @ Omega`` with ``Omega`` antisymmetric; each off-diagonal
    pair ``(Omega_U[k, l], Omega_V[k, l])`` solves the 2x2 system

        sigma_l * x - sigma_k * y = u_ok * v_il
       -sigma_k * x + sigma_l * y = u_ol * v_ik

    Left singular vectors outside the row space (``k >= n`` when ``A`` is
    tall) have no partner in V, and their system collapses to
    ``sigma_l * x = u_ok * v_il``. Vectors follow the sign convention of
    :func:`thin_svd`. Costs a full SVD per call; meant for verification.
    """
    A = as_matrix(A, "A")
    d, n = A.shape
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    V = Vt.T
    signs = fix_signs(U[:, :r])
    U[:, :r] *= signs
    V[:, :r] *= signs
    m = min(d, n)
    omega = np.zeros((d, r))
    for l in range(r):
        for k in range(d):
            if k == l:
                continue
            if k < m:
                system = np.array([[s[l], -s[k]], [-s[k], s[l]]])
                rhs = np.array([U[o, k] * V[i, l], U[o, l] * V[i, k]])
                omega[k, l] = np.linalg.solve(system, rhs)[0]
            else:
                omega[k, l] = U[o, k] * V[i, l] / s[l]
    return U @ omega
