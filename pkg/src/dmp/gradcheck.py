"""Finite-difference verification of the full training objective.

Small random networks and batches are drawn from a seed; for each
combination of enabled loss terms the analytic parameter gradient of
:func:`dmp.trainer.dmp_objective` is compared with central differences.
Anchors and class weights are held fixed, as they are between refreshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import discriminant as ds
from . import network as nn
from .trainer import RefreshState, TrainConfig, dmp_objective, objective_terms, total_from_terms

#: (name, lambda1, lambda2, lambda_ent, use_intra)
COMBINATIONS = (
    ("ce", 0.0, 0.0, 0.0, False),
    ("ce+inter", 1e1, 0.0, 0.0, False),
    ("ce+inter+intra", 1e1, 0.0, 0.0, True),
    ("ce+align", 0.0, 5e3, 0.0, False),
    ("ce+entropy", 0.0, 0.0, 1.0, False),
    ("all", 1e1, 5e3, 1.0, True),
)


@dataclass(frozen=True)
class GradCheck:
    seed: int
    combination: str
    rel_error: float
    passed: bool


@dataclass(frozen=True)
class Instance:
    params: nn.NetworkParams
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    state: RefreshState
    config: TrainConfig


def norm_relative_error(a, f):
    """``||a - f|| / max(||a||, ||f||)``, zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(f))
    return float(np.linalg.norm(a - f) / scale) if scale > 0 else 0.0


def make_instance(seed, max_dim=8, max_classes=4, max_batch=6) -> Instance:
    """A tiny random problem: input dim <= 8, classes <= 4, batch <= 6."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, max_dim + 1))
    c = int(rng.integers(2, max_classes + 1))
    b_s = int(rng.integers(3, max_batch + 1))
    hidden = (int(rng.integers(b_s, b_s + 4)), int(rng.integers(b_s, b_s + 3)))
    mode = ds.PARTIAL if seed % 2 else ds.VANILLA
    config = TrainConfig(hidden=hidden, batch_size=b_s, k=int(rng.integers(1, c + 1)), mode=mode, seed=seed)
    params = nn.build_network(d, hidden, c, config.activations, config.slope, rng)
    # anchors and weights from larger "full" sets, as a refresh would produce
    n_full = 6 * c
    full_x = rng.normal(size=(d, n_full))
    full_y = np.arange(n_full) % c
    trace = nn.forward(params, full_x)
    anchors = tuple(ds.compute_anchors(H, full_y, c) for H in trace.features)
    weights = ds.class_weights(nn.forward(params, rng.normal(size=(d, n_full))).P, mode)
    state = RefreshState(anchors, np.asarray(weights), 1)
    xs = rng.normal(size=(d, b_s))
    ys = rng.permutation(np.arange(b_s) % c)    # at least two classes present
    xt = rng.normal(size=(d, b_s)) + 0.5
    return Instance(params, xs, ys, xt, state, config)


TERMS = ("L_CE", "L_inter", "L_intra", "L_AL", "L_ent")


def _config_for(inst: Instance, combination):
    _, l1, l2, le, _ = combination
    return TrainConfig(**{**inst.config.as_dict(), "lambda1": l1, "lambda2": l2, "lambda_ent": le})


def term_differences(inst: Instance, step=1e-6):
    """Central differences of every unweighted loss term, per parameter array.

    The objective is linear in the penalty weights, so one sweep serves all
    loss combinations.
    """
    params = inst.params.copy()

    def terms():
        t = objective_terms(params, inst.xs, inst.ys, inst.xt, inst.state, inst.config)
        return np.array([t[k] for k in TERMS])

    out = []
    for P in params.arrays():
        flat = P.reshape(-1)
        D = np.zeros((len(TERMS), flat.size))
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = terms()
            flat[i] = orig - step
            fm = terms()
            flat[i] = orig
            D[:, i] = (fp - fm) / (2.0 * step)
        out.append(D)
    return out


def check_instance(inst: Instance, combination, step=1e-6, inject=0.0, differences=None):
    """Largest norm-wise relative error over all parameter arrays.

    ``inject`` adds a relative perturbation to one analytic entry; it exists
    so callers can confirm that a wrong gradient is caught. ``differences``
    reuses the output of :func:`term_differences`.
    """
    cfg = _config_for(inst, combination)
    use_intra = combination[4]
    obj = dmp_objective(inst.params.copy(), inst.xs, inst.ys, inst.xt, inst.state, cfg, use_intra)
    if obj.skipped_alignment:
        return None
    if differences is None:
        differences = term_differences(inst, step)
    weights = {"L_CE": 1.0, "L_inter": cfg.lambda1, "L_intra": cfg.lambda1 if use_intra else 0.0,
               "L_AL": cfg.lambda2, "L_ent": cfg.lambda_ent}
    coef = np.array([weights[k] for k in TERMS])
    worst = 0.0
    for i, (P, A, D) in enumerate(zip(inst.params.arrays(), obj.grads.arrays(), differences)):
        A = A.copy()
        if inject and i == 0:
            A.flat[0] += inject * max(1.0, abs(A.flat[0]))
        F = (coef @ D).reshape(P.shape)
        worst = max(worst, norm_relative_error(A, F))
    return worst


def run(seeds, tol=1e-4, inject=0.0, step=1e-6):
    """Check every loss combination on every seed; returns a list of GradCheck."""
    results = []
    for seed in seeds:
        attempt = 0
        while True:
            inst = make_instance(seed * 1000 + attempt)
            diffs = term_differences(inst, step)
            errs = [check_instance(inst, combo, step, inject, diffs) for combo in COMBINATIONS]
            if all(e is not None for e in errs):
                break
            attempt += 1    # degenerate batch spectrum: redraw
        for combo, err in zip(COMBINATIONS, errs):
            results.append(GradCheck(seed, combo[0], err, err < tol))
    return results
