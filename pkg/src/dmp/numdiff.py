"""Central finite differences over dense arrays."""

import numpy as np


def central_difference(fun, X, step=1e-5):
    """Gradient of scalar ``fun`` at array ``X`` by central differences.

    ``fun`` is called with a perturbed copy of ``X``; ``X`` itself is not
    modified.
    """
    X = np.array(X, dtype=np.float64, order="C")
    grad = np.zeros_like(X)
    flat = X.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fplus = fun(X)
        flat[j] = orig - step
        fminus = fun(X)
        flat[j] = orig
        gflat[j] = (fplus - fminus) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest element-wise ``|a - f| / max(|a|, |f|, floor)``.

    ``floor`` keeps entries that are zero up to round-off from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom))
