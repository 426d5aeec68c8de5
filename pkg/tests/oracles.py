"""Independent reference computations used only by the tests.

Nothing here calls into ``dmp``; each oracle takes a different route from
the code it checks (Jacobi rotations, Taylor series, explicit loops).
"""

import itertools
import math

import numpy as np


def jacobi_svd(A, sweeps=60, tol=1e-15):
    """One-sided Jacobi SVD: returns (U, sigma, V) with sigma descending."""
    A = np.array(A, dtype=float)
    m, n = A.shape
    transpose = m < n
    if transpose:
        A = A.T
        m, n = n, m
    U = A.copy()
    V = np.eye(n)
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = U[:, p] @ U[:, p]
                beta = U[:, q] @ U[:, q]
                gamma = U[:, p] @ U[:, q]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                Up, Uq = U[:, p].copy(), U[:, q].copy()
                U[:, p], U[:, q] = c * Up - s * Uq, s * Up + c * Uq
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * Vp - s * Vq, s * Vp + c * Vq
        if off < tol:
            break
    sigma = np.linalg.norm(U, axis=0)
    order = np.argsort(-sigma)
    sigma = sigma[order]
    U = U[:, order] / np.where(sigma > 0, sigma, 1.0)
    V = V[:, order]
    if transpose:
        U, V = V, U
    return U, sigma, V


def expm_taylor(A, terms=30):
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    A = np.array(A, dtype=float)
    norm = np.linalg.norm(A, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.25))) if norm > 0.25 else 0)
    B = A / (2 ** s)
    E = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ B / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def naive_covariance(H, mean):
    d, n = H.shape
    C = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            acc = 0.0
            for j in range(n):
                acc += (H[a, j] - mean[a]) * (H[b, j] - mean[b])
            C[a, b] = acc / (n - 1)
    return C


def central_difference(f, X, step=1e-5):
    X = np.array(X, dtype=float, order="C")
    G = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = X[idx]
        X[idx] = orig + step
        fp = f(X)
        X[idx] = orig - step
        fm = f(X)
        X[idx] = orig
        G[idx] = (fp - fm) / (2 * step)
    return G


def rel_err(a, f, floor=1e-6):
    a = np.asarray(a, float)
    f = np.asarray(f, float)
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def random_orthogonal(n, rng):
    Q, R = np.linalg.qr(rng.normal(size=(n, n)))
    return Q * np.sign(np.diag(R))


def random_spd(n, rng, floor=0.1):
    Q = random_orthogonal(n, rng)
    return (Q * rng.uniform(floor, 3.0, size=n)) @ Q.T


def inter_loss_direct(H, labels, overall, c):
    """Direct double loop: mean cosine over pairs of present classes."""
    cols = {}
    for i in range(c):
        idx = [j for j in range(H.shape[1]) if labels[j] == i]
        if not idx:
            continue
        z = np.mean(H[:, idx], axis=1) - overall
        if np.linalg.norm(z) > 0:
            cols[i] = z / np.linalg.norm(z)
    pairs = list(itertools.combinations(sorted(cols), 2))
    if not pairs:
        return 0.0
    return sum(float(cols[i] @ cols[j]) for i, j in pairs) / len(pairs)


def intra_loss_direct(Ht, P, class_means, w, k):
    c, n = P.shape
    total = 0.0
    for j in range(n):
        top = sorted(range(c), key=lambda i: (-P[i, j], i))[:k]
        h = Ht[:, j]
        hn = np.linalg.norm(h)
        for i in top:
            a = class_means[:, i]
            an = np.linalg.norm(a)
            if an == 0 or hn == 0:
                continue
            total += c * w[i] * P[i, j] * (a @ h) / (an * hn)
    return -total / (n * k)
