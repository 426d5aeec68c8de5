"""Concentration bounds for subspace estimation and their Monte-Carlo check.

The estimation error of a top-``d'`` eigen-projector from ``n`` samples of a
distribution supported in the ball ``||x|| <= M`` is controlled by

    E(delta) = 4 M / sqrt(n) * (1 + sqrt(ln(1/delta) / 2))

divided by the eigen-gap ``lambda_{d'} - lambda_{d'+1}``. The error indices
below turn that into a computable score for choosing ``d'``; the Monte-Carlo
routines sample a distribution with known spectrum and count how often the
bounds fail.

All distances here are the unscaled, unsquared norms that the bounds speak
about. The training metrics carry an extra ``1/d**2`` (and, for Grassmann, a
square); divide a bound by ``d**2`` to compare it with the affine metric, or
square it and divide by ``d**2`` for the Grassmann metric.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import linalg
from .errors import ConfigurationError, InvalidInputError
from .manifold import covariance

SQRT8 = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class BoundParams:
    """Feature-norm bound ``M``, sample count ``n`` and failure probability.

    ``delta = 1`` is accepted as the limiting case where the log term
    vanishes.
    """

    M: float
    n: int
    delta: float

    def __post_init__(self):
        if not self.M > 0:
            raise InvalidInputError(f"M must be positive, got {self.M}")
        if self.n < 1:
            raise InvalidInputError(f"n must be >= 1, got {self.n}")
        if not 0 < self.delta <= 1:
            raise InvalidInputError(f"delta must lie in (0, 1], got {self.delta}")


def e_delta(p: BoundParams) -> float:
    """``E(delta) = (4M/sqrt(n)) (1 + sqrt(ln(1/delta)/2))``."""
    return 4.0 * p.M / math.sqrt(p.n) * (1.0 + math.sqrt(math.log(1.0 / p.delta) / 2.0))


def sample_threshold(M, gap, delta):
    """Smallest ``n`` for which the projector bound is asserted to hold."""
    BoundParams(M, 1, delta)   # validates M and delta
    if not gap > 0:
        return math.inf
    return math.ceil((4.0 * M / gap * (1.0 + math.sqrt(math.log(1.0 / delta) / 2.0))) ** 2)


def _gap(eig, d_prime):
    eig = np.asarray(eig, dtype=np.float64).reshape(-1)
    if d_prime < 1 or eig.shape[0] < d_prime + 1:
        raise InvalidInputError(f"need a spectrum of length >= d'+1={d_prime + 1}, got {eig.shape[0]}")
    return float(eig[d_prime - 1] - eig[d_prime])


def _term(gap, d_prime, scale=1.0):
    if scale == 0.0:
        return 0.0
    if gap <= 0.0:
        return math.inf
    return math.sqrt(d_prime) * scale / gap


def error_index_grassmann(eig_s, eig_t, d_prime) -> float:
    """``sqrt(d')/gap_s + sqrt(d')/gap_t``; ``inf`` when either gap is zero."""
    return _term(_gap(eig_s, d_prime), d_prime) + _term(_gap(eig_t, d_prime), d_prime)


def error_index_affine(eig_s, eig_t, mean_s, mean_t, d_prime) -> float:
    """Grassmann error index with each domain's term weighted by ``||mean||``."""
    ns = float(np.linalg.norm(mean_s))
    nt = float(np.linalg.norm(mean_t))
    return _term(_gap(eig_s, d_prime), d_prime, ns) + _term(_gap(eig_t, d_prime), d_prime, nt)


def error_index_partial(w_true, w_est, alpha, eG, E) -> float:
    """``alpha ||w**2 - w_est**2|| + 2 sqrt(2) E eG``.

    ``alpha`` has no known closed form; treat the result as a relative
    diagnostic for comparing weight estimates, not as a calibrated bound.
    """
    w_true = np.asarray(w_true, dtype=np.float64).reshape(-1)
    w_est = np.asarray(w_est, dtype=np.float64).reshape(-1)
    if w_true.shape != w_est.shape:
        raise InvalidInputError(f"weight vectors differ in length: {w_true.shape[0]} vs {w_est.shape[0]}")
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")
    weight_term = alpha * float(np.linalg.norm(w_true ** 2 - w_est ** 2)) if alpha else 0.0
    return weight_term + SQRT8 * E * eG


@dataclass(frozen=True)
class ErrorIndexCurve:
    """Error index as a function of ``d'`` with the spectra it came from.

    ``argmin`` is ``None`` when every value is infinite. ``reference`` is the
    value at ``d' = b_s - 1`` when a batch size was supplied and that
    dimension lies on the curve.
    """

    d_prime: np.ndarray
    values: np.ndarray
    lambda_s: np.ndarray
    lambda_t: np.ndarray
    argmin: int | None
    reference_d_prime: int | None = None
    reference: float | None = None
    affine: np.ndarray | None = None

    def rows(self):
        """Yield one dict per ``d'`` with the table columns."""
        for i, dp in enumerate(self.d_prime):
            row = {
                "d_prime": int(dp),
                "e_index": float(self.values[i]),
                "lambda_s": float(self.lambda_s[i]),
                "lambda_t": float(self.lambda_t[i]),
            }
            if self.affine is not None:
                row["e_affine"] = float(self.affine[i])
            row["argmin"] = int(dp == self.argmin)
            if self.reference_d_prime is not None:
                row["reference"] = int(dp == self.reference_d_prime)
            yield row


def suggest_dimension(eig_s, eig_t, d_max, mean_s=None, mean_t=None, b_s=None) -> ErrorIndexCurve:
    """Evaluate the Grassmann error index for ``d' = 1..d_max`` and pick its minimiser.

    With ``mean_s`` and ``mean_t`` the affine index is also tabulated. Ties
    resolve to the smallest ``d'``.
    """
    eig_s = np.asarray(eig_s, dtype=np.float64).reshape(-1)
    eig_t = np.asarray(eig_t, dtype=np.float64).reshape(-1)
    limit = min(eig_s.shape[0], eig_t.shape[0]) - 1
    if d_max < 1 or d_max > limit:
        raise InvalidInputError(f"d_max must lie in [1, {limit}], got {d_max}")
    dps = np.arange(1, d_max + 1)
    values = np.array([error_index_grassmann(eig_s, eig_t, int(k)) for k in dps])
    affine = None
    if mean_s is not None and mean_t is not None:
        affine = np.array([error_index_affine(eig_s, eig_t, mean_s, mean_t, int(k)) for k in dps])
    finite = np.isfinite(values)
    argmin = int(dps[np.argmin(np.where(finite, values, np.inf))]) if finite.any() else None
    ref_dp = ref = None
    if b_s is not None and 1 <= b_s - 1 <= d_max:
        ref_dp = b_s - 1
        ref = float(values[ref_dp - 1])
    return ErrorIndexCurve(dps, values, eig_s[:d_max], eig_t[:d_max], argmin, ref_dp, ref, affine)


# ---------------------------------------------------------------------------
# Monte-Carlo verification


@dataclass(frozen=True)
class BoxDistribution:
    """``x = mu + R (s * u)`` with ``u`` uniform on ``[-1, 1]^dim``.

    Since ``|u_i| <= 1``, ``||x|| <= ||mu|| + ||s|| = M`` exactly, and the
    covariance is ``R diag(s**2 / 3) R^T``.
    """

    mu: np.ndarray
    R: np.ndarray
    s: np.ndarray

    @property
    def dim(self):
        return self.s.shape[0]

    @property
    def M(self):
        return float(np.linalg.norm(self.mu) + np.linalg.norm(self.s))

    @property
    def eigenvalues(self):
        return np.sort(self.s ** 2 / 3.0)[::-1]

    def covariance(self):
        return (self.R * (self.s ** 2 / 3.0)) @ self.R.T

    def projector(self, d_prime):
        order = np.argsort(-self.s ** 2, kind="stable")[:d_prime]
        U = self.R[:, order]
        return U @ U.T

    def sample(self, n, rng):
        u = rng.uniform(-1.0, 1.0, size=(self.dim, n))
        return self.mu[:, None] + self.R @ (self.s[:, None] * u)


def box_distribution(dim, d_prime, seed=0, radius=1.0, mean_fraction=0.0):
    """A bounded distribution with a clean eigen-gap after ``d'``.

    The leading ``d'`` scales decrease slowly from 1 and the trailing ones
    sit below 0.25, so the spectrum is strictly decreasing with a large gap
    at ``d'``. ``mean_fraction`` of the radius goes to the mean.
    """
    if not 1 <= d_prime < dim:
        raise ConfigurationError(f"d_prime must lie in [1, {dim - 1}], got {d_prime}")
    if not 0.0 <= mean_fraction < 1.0:
        raise ConfigurationError("mean_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    head = 1.0 - 0.1 * np.arange(d_prime) / d_prime
    tail = 0.22 * (dim - np.arange(d_prime, dim)) / (dim - d_prime)
    s = np.sqrt(np.concatenate([head, tail]))
    s *= radius * (1.0 - mean_fraction) / np.linalg.norm(s)
    Q, Rq = np.linalg.qr(rng.normal(size=(dim, dim)))
    R = Q * np.sign(np.diag(Rq))
    mu = np.zeros(dim)
    if mean_fraction > 0:
        direction = rng.normal(size=dim)
        mu = radius * mean_fraction * direction / np.linalg.norm(direction)
    return BoxDistribution(mu=mu, R=R, s=s)


@dataclass(frozen=True)
class MonteCarloResult:
    """Outcome of a Monte-Carlo bound check.

    ``violations / trials`` is kept exact in ``fraction``; ``deviations``
    holds the per-trial left-hand side and ``bound`` the right-hand side
    (per trial when it depends on sample statistics).
    """

    violations: int
    trials: int
    deviations: np.ndarray
    bound: np.ndarray
    n: int
    delta: float

    @property
    def empty(self):
        return self.trials == 0

    @property
    def fraction(self):
        return Fraction(self.violations, self.trials) if self.trials else Fraction(0)

    @property
    def rate(self):
        return float(self.fraction)

    def rows(self):
        for i, (dev, b) in enumerate(zip(self.deviations, self.bound)):
            yield {"trial": i, "deviation": float(dev), "bound": float(b), "violated": int(dev > b)}


def _empirical_projector(X, d_prime):
    C = covariance(X)
    U = linalg.sym_eig(C).eigenvectors[:, :d_prime]
    return U @ U.T, X.mean(axis=1)


def _run_trials(trial, trials, seed, workers):
    children = np.random.SeedSequence(seed).spawn(trials)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(trial, children))
    return [trial(ss) for ss in children]


def _resolve_n(n, M, gap, delta):
    threshold = sample_threshold(M, gap, delta)
    if n is None:
        return threshold
    if n < threshold:
        raise ConfigurationError(f"n={n} is below the sample threshold {threshold} for this gap and delta")
    return n


def _check_gap(dist, d_prime):
    lam = dist.eigenvalues
    gap = float(lam[d_prime - 1] - lam[d_prime])
    if gap <= linalg.DEGENERACY_RTOL * lam[0]:
        raise ConfigurationError(f"distribution spectrum is degenerate at d'={d_prime}")
    return gap


def monte_carlo_projector_bound(dim, n, d_prime, delta, trials, seed=0, workers=1,
                                distribution=None) -> MonteCarloResult:
    """Fraction of trials where the empirical top-``d'`` projector misses the
    true one by more than ``2 sqrt(2) E(delta) sqrt(d') / gap`` in Frobenius norm.

    ``n=None`` uses the smallest admissible sample size.
    """
    dist = distribution if distribution is not None else box_distribution(dim, d_prime, seed)
    gap = _check_gap(dist, d_prime)
    n = _resolve_n(n, dist.M, gap, delta)
    if trials == 0:
        return MonteCarloResult(0, 0, np.zeros(0), np.zeros(0), n, delta)
    bound = SQRT8 * e_delta(BoundParams(dist.M, n, delta)) * math.sqrt(d_prime) / gap
    P_true = dist.projector(d_prime)

    def trial(ss):
        X = dist.sample(n, np.random.default_rng(ss))
        P, _ = _empirical_projector(X, d_prime)
        return linalg.frobenius(P - P_true)

    dev = np.array(_run_trials(trial, trials, seed + 1, workers))
    bounds = np.full(trials, bound)
    return MonteCarloResult(int(np.sum(dev > bounds)), trials, dev, bounds, n, delta)


def _affine_residual(P, mu):
    return mu - P @ mu


def monte_carlo_distance_bound(dim, n, d_prime, delta, trials, metric="grassmann", seed=0,
                               workers=1, source=None, target=None) -> MonteCarloResult:
    """Check the distance-estimation bound for two domains.

    For ``metric="grassmann"`` the deviation is
    ``| ||P_s - P_t||_F - ||P~_s - P~_t||_F |`` against ``2 sqrt(2) E e^G``.
    For ``metric="affine"`` the displacement term is added to both distances
    and the bound is ``2 sqrt(2) E (sqrt(2 dim)/4 + e^AG)`` with ``e^AG``
    built from the sample means of the trial.
    """
    if metric not in ("grassmann", "affine"):
        raise ConfigurationError(f"no bound for metric {metric!r}")
    mean_fraction = 0.2 if metric == "affine" else 0.0
    src = source if source is not None else box_distribution(dim, d_prime, seed, mean_fraction=mean_fraction)
    tgt = target if target is not None else box_distribution(dim, d_prime, seed + 7919, mean_fraction=mean_fraction)
    gap_s = _check_gap(src, d_prime)
    gap_t = _check_gap(tgt, d_prime)
    M = max(src.M, tgt.M)
    n = _resolve_n(n, M, min(gap_s, gap_t), delta)
    if trials == 0:
        return MonteCarloResult(0, 0, np.zeros(0), np.zeros(0), n, delta)
    E = e_delta(BoundParams(M, n, delta))
    eG = error_index_grassmann(src.eigenvalues, tgt.eigenvalues, d_prime)
    Ps, Pt = src.projector(d_prime), tgt.projector(d_prime)
    d_true = linalg.frobenius(Ps - Pt)
    if metric == "affine":
        d_true += float(np.linalg.norm(_affine_residual(Ps, src.mu) - _affine_residual(Pt, tgt.mu)))

    def trial(ss):
        rs, rt = [np.random.default_rng(c) for c in ss.spawn(2)]
        Qs, ms = _empirical_projector(src.sample(n, rs), d_prime)
        Qt, mt = _empirical_projector(tgt.sample(n, rt), d_prime)
        d_emp = linalg.frobenius(Qs - Qt)
        if metric == "grassmann":
            return abs(d_true - d_emp), SQRT8 * E * eG
        d_emp += float(np.linalg.norm(_affine_residual(Qs, ms) - _affine_residual(Qt, mt)))
        eAG = error_index_affine(src.eigenvalues, tgt.eigenvalues, ms, mt, d_prime)
        return abs(d_true - d_emp), SQRT8 * E * (math.sqrt(2 * dim) / 4.0 + eAG)

    out = _run_trials(trial, trials, seed + 1, workers)
    dev = np.array([o[0] for o in out])
    bounds = np.array([o[1] for o in out])
    return MonteCarloResult(int(np.sum(dev > bounds)), trials, dev, bounds, n, delta)
