"""Training loop: periodic anchor/weight refresh, batch objective, updates.

The objective on a pair of batches is

    L = L_CE + lambda1 * L_DS + lambda2 * L_AL + lambda_ent * L_ent

with ``L_DS`` (inter- plus intra-class loss) and ``L_AL`` (manifold
alignment) summed over the enabled manifold layers. Anchors and class
weights are recomputed from full forward passes every ``t_up`` iterations
and are constants in between.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import discriminant as ds
from . import network as nn
from .data import FeatureBatch, sample_batch
from .errors import ConfigurationError, DegenerateSpectrumError, NumericalDomainError
from .manifold import GRASSMANN, METRIC_KINDS, MetricKind, alignment_loss, alignment_value

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_CE", "L_DS", "L_AL", "L_ent", "total")


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1e1
    lambda2: float = 5e3
    lambda_ent: float = 0.0
    k: int = 1
    batch_size: int = 50
    t_max: int = 1500
    t_up: int | None = None           # None: one pass over the source set
    warmup_intra: int | None = None   # None: 30% of t_max
    metric: str = GRASSMANN
    d_prime: int | None = None        # None: batch_size - 1, capped at layer width - 1
    le_eps: float = 1e-5
    mode: str = ds.VANILLA
    optimizer: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 1.0             # multiplicative, applied every iteration
    hidden: tuple = (256, 128)
    activations: tuple = (nn.LEAKY_RELU, nn.TANH)
    slope: float = 0.2
    ds_layers: tuple | None = None    # manifold layers carrying L_DS; None: all
    al_layers: tuple | None = None    # manifold layers carrying L_AL; None: all
    eval_every: int | None = None     # None: every t_up iterations
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activations", tuple(self.activations))
        for name in ("ds_layers", "al_layers"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(int(v) for v in value))
        self.validate()

    def validate(self, n_classes=None):
        if min(self.lambda1, self.lambda2, self.lambda_ent) < 0:
            raise ConfigurationError("penalty weights must be non-negative")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.k < 1 or (n_classes is not None and self.k > n_classes):
            raise ConfigurationError(f"k must be in [1, c], got {self.k}")
        if self.t_max < 0:
            raise ConfigurationError("t_max must be >= 0")
        if self.t_up is not None and self.t_up < 1:
            raise ConfigurationError("t_up must be >= 1")
        if self.warmup_intra is not None and self.warmup_intra < 0:
            raise ConfigurationError("warmup_intra must be >= 0")
        if self.metric not in METRIC_KINDS:
            raise ConfigurationError(f"metric must be one of {METRIC_KINDS}")
        if self.mode not in (ds.VANILLA, ds.PARTIAL):
            raise ConfigurationError("mode must be 'vanilla' or 'partial'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr must be > 0 and lr_decay in (0, 1]")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("need at least one manifold layer of width >= 1")
        if self.d_prime is not None and self.d_prime < 1:
            raise ConfigurationError("d_prime must be >= 1")
        for layers in (self.ds_layers, self.al_layers):
            if layers is not None and any(not 0 <= l < len(self.hidden) for l in layers):
                raise ConfigurationError("layer index out of range")

    @classmethod
    def partial_defaults(cls, **overrides):
        """Defaults for the partial setting: (lambda1, lambda2) = (1e1, 1e0)."""
        base = dict(lambda1=1e1, lambda2=1e0, mode=ds.PARTIAL)
        base.update(overrides)
        return cls(**base)

    def as_dict(self):
        return asdict(self)

    def resolved_t_up(self, n_source):
        return self.t_up if self.t_up is not None else max(1, math.ceil(n_source / self.batch_size))

    def resolved_warmup(self):
        return self.warmup_intra if self.warmup_intra is not None else int(0.3 * self.t_max)

    def layer_d_prime(self, width):
        d_prime = self.d_prime if self.d_prime is not None else self.batch_size - 1
        return max(1, min(d_prime, width - 1))


@dataclass
class TrainReport:
    history: list = field(default_factory=list)      # one dict per iteration, keys LOG_COLUMNS
    accuracy: list = field(default_factory=list)     # (iteration, target accuracy)
    confusion: np.ndarray | None = None
    weights: np.ndarray | None = None
    skipped_alignment: list = field(default_factory=list)

    def log_lines(self):
        lines = [",".join(LOG_COLUMNS)]
        for row in self.history:
            lines.append(",".join([str(row["iter"])] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]]))
        return lines

    @property
    def final_accuracy(self):
        return self.accuracy[-1][1] if self.accuracy else None


@dataclass(frozen=True)
class RefreshState:
    """Anchors (one per manifold layer) and class weights between refreshes."""

    anchors: tuple
    weights: np.ndarray
    iteration: int


class Objective(NamedTuple):
    total: float
    components: dict
    grads: nn.NetworkParams
    skipped_alignment: bool


def combine(components, config: TrainConfig):
    return (components["L_CE"] + config.lambda1 * components["L_DS"]
            + config.lambda2 * components["L_AL"] + config.lambda_ent * components["L_ent"])


def _metric_for(config, width):
    return MetricKind(config.metric, config.layer_d_prime(width), config.le_eps)


def dmp_objective(params, xs, ys, xt, state: RefreshState, config: TrainConfig,
                  use_intra=True) -> Objective:
    """Batch objective value, its components and all parameter gradients."""
    trace_s = nn.forward(params, xs)
    trace_t = nn.forward(params, xt)
    n_layers = params.n_manifold
    ds_layers = range(n_layers) if config.ds_layers is None else config.ds_layers
    al_layers = range(n_layers) if config.al_layers is None else config.al_layers
    w = state.weights
    c = params.n_classes
    scale_s = c * w[ys]

    ce = nn.cross_entropy(trace_s.P, ys)
    ent = nn.target_entropy(trace_t.P)
    grad_s = [None] * n_layers
    grad_t = [None] * n_layers
    grad_Pt = np.zeros_like(trace_t.P)

    def add(slot, l, g):
        slot[l] = g if slot[l] is None else slot[l] + g

    l_ds = 0.0
    for l in ds_layers:
        anchors = state.anchors[l]
        inter = ds.inter_class_loss(trace_s.features[l], ys, anchors)
        l_ds += inter.loss
        if config.lambda1:
            add(grad_s, l, config.lambda1 * inter.grad)
        if use_intra:
            intra = ds.intra_class_loss(trace_t.features[l], trace_t.P, anchors, w, config.k)
            l_ds += intra.loss
            if config.lambda1:
                add(grad_t, l, config.lambda1 * intra.grad_H)
                grad_Pt += config.lambda1 * intra.grad_P

    l_al = 0.0
    skipped = False
    for l in al_layers:
        Hs = trace_s.features[l] * scale_s[None, :]
        Ht = trace_t.features[l]
        metric = _metric_for(config, Hs.shape[0])
        if not config.lambda2:
            l_al += alignment_value(Hs, Ht, metric)
            continue
        try:
            loss, dHs, dHt = alignment_loss(Hs, Ht, metric)
        except DegenerateSpectrumError as exc:
            logger.info("layer %d: alignment gradient skipped (%s)", l, exc)
            skipped = True
            l_al += alignment_value(Hs, Ht, metric)
            continue
        l_al += loss
        add(grad_s, l, config.lambda2 * dHs * scale_s[None, :])
        add(grad_t, l, config.lambda2 * dHt)

    components = {"L_CE": ce.loss, "L_DS": l_ds, "L_AL": l_al, "L_ent": ent.loss}
    total = combine(components, config)

    grads = nn.backward(params, trace_s, grad_s, ce.grad_logits)
    logit_t = None
    if config.lambda1 and use_intra:
        logit_t = nn.softmax_backward(trace_t.P, grad_Pt)
    if config.lambda_ent:
        g = config.lambda_ent * ent.grad_logits
        logit_t = g if logit_t is None else logit_t + g
    if logit_t is not None or any(g is not None for g in grad_t):
        grads_t = nn.backward(params, trace_t, grad_t, logit_t)
        for a, b in zip(grads.arrays(), grads_t.arrays()):
            a += b
    return Objective(total, components, grads, skipped)


def objective_terms(params, xs, ys, xt, state: RefreshState, config: TrainConfig) -> dict:
    """Unweighted loss terms of one batch pair, without any gradient work.

    The intra-class term is always evaluated; keys are ``L_CE``,
    ``L_inter``, ``L_intra``, ``L_AL`` and ``L_ent``.
    """
    trace_s = nn.forward(params, xs)
    trace_t = nn.forward(params, xt)
    n_layers = params.n_manifold
    ds_layers = range(n_layers) if config.ds_layers is None else config.ds_layers
    al_layers = range(n_layers) if config.al_layers is None else config.al_layers
    scale_s = params.n_classes * state.weights[ys]
    inter = intra = 0.0
    for l in ds_layers:
        inter += ds.inter_class_loss(trace_s.features[l], ys, state.anchors[l]).loss
        intra += ds.intra_class_loss(trace_t.features[l], trace_t.P, state.anchors[l],
                                     state.weights, config.k).loss
    l_al = 0.0
    for l in al_layers:
        Hs = trace_s.features[l] * scale_s[None, :]
        l_al += alignment_value(Hs, trace_t.features[l], _metric_for(config, Hs.shape[0]))
    return {"L_CE": nn.cross_entropy(trace_s.P, ys).loss, "L_inter": inter, "L_intra": intra,
            "L_AL": l_al, "L_ent": nn.target_entropy(trace_t.P).loss}


def total_from_terms(terms, config: TrainConfig, use_intra=True):
    l_ds = terms["L_inter"] + (terms["L_intra"] if use_intra else 0.0)
    return combine({**terms, "L_DS": l_ds}, config)


def refresh(params, source: FeatureBatch, target: FeatureBatch, config: TrainConfig, iteration):
    """Anchors from a full source pass and class weights from a full target pass."""
    c = params.n_classes
    trace_s = nn.forward(params, source.features)
    anchors = tuple(ds.compute_anchors(H, source.labels, c) for H in trace_s.features)
    trace_t = nn.forward(params, target.features)
    weights = ds.class_weights(trace_t.P, config.mode)
    weights = np.array(weights)
    weights.setflags(write=False)
    return RefreshState(anchors, weights, iteration)


def predict(params, X):
    """Arg-max class of every column of ``X``; ties go to the lowest index."""
    return np.argmax(nn.forward(params, X).P, axis=0)


class Evaluation(NamedTuple):
    accuracy: float
    per_class: np.ndarray   # NaN for classes without samples
    confusion: np.ndarray   # row: true class, column: predicted class


def confusion_matrix(labels, predictions, c):
    M = np.zeros((c, c), dtype=np.int64)
    np.add.at(M, (np.asarray(labels), np.asarray(predictions)), 1)
    return M


def evaluate(params, X, labels) -> Evaluation:
    labels = np.asarray(labels)
    c = params.n_classes
    M = confusion_matrix(labels, predict(params, X), c)
    totals = M.sum(axis=1)
    per_class = np.divide(np.diag(M), totals, out=np.full(c, np.nan), where=totals > 0)
    accuracy = float(np.trace(M) / max(M.sum(), 1))
    return Evaluation(accuracy, per_class, M)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return nn.Adam(config.lr, config.beta1, config.beta2)
    return nn.SGD(config.lr, config.momentum, config.weight_decay)


def rng_streams(seed):
    """Independent generators for initialisation, source and target sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def init_params(config: TrainConfig, in_dim, n_classes, rng):
    return nn.build_network(in_dim, config.hidden, n_classes, config.activations, config.slope, rng)


def train(config: TrainConfig, source: FeatureBatch, target: FeatureBatch,
          target_labels=None, callback=None):
    """Run the full training loop; returns ``(params, report)``.

    ``target_labels`` are only used to report accuracy. ``callback(t, state)``
    is invoked after every iteration with the current :class:`RefreshState`.
    """
    if source.labels is None:
        raise ConfigurationError("source data must be labelled")
    if source.dim != target.dim:
        raise ConfigurationError(f"feature dims differ: source {source.dim}, target {target.dim}")
    c = source.n_classes
    if len(np.unique(source.labels)) < 2:
        raise ConfigurationError("source labels must cover at least two classes")
    config.validate(c)
    init_rng, src_rng, tgt_rng = rng_streams(config.seed)
    params = init_params(config, source.dim, c, init_rng)
    optimizer = make_optimizer(config)
    t_up = config.resolved_t_up(source.n)
    warmup = config.resolved_warmup()
    eval_every = config.eval_every or t_up
    report = TrainReport()
    state = None
    for t in range(1, config.t_max + 1):
        if (t - 1) % t_up == 0:
            state = refresh(params, source, target, config, t)
        # distinct samples per batch: duplicates would collapse the subspace rank
        sb = sample_batch(source, config.batch_size, src_rng, replace=False)
        tb = sample_batch(target, config.batch_size, tgt_rng, replace=False)
        obj = dmp_objective(params, sb.features, sb.labels, tb.features, state, config,
                            use_intra=t > warmup)
        if not math.isfinite(obj.total):
            raise NumericalDomainError(f"non-finite objective at iteration {t}: {obj.components}")
        row = {"iter": t, **obj.components, "total": obj.total}
        report.history.append(row)
        if obj.skipped_alignment:
            report.skipped_alignment.append(t)
        optimizer.step(params, obj.grads)
        optimizer.lr *= config.lr_decay
        if target_labels is not None and (t % eval_every == 0 or t == config.t_max):
            report.accuracy.append((t, evaluate(params, target.features, target_labels).accuracy))
        if callback is not None:
            callback(t, state)
    final_state = refresh(params, source, target, config, config.t_max + 1)
    report.weights = np.array(final_state.weights)
    if target_labels is not None:
        report.confusion = evaluate(params, target.features, target_labels).confusion
    return params, report


def with_overrides(config: TrainConfig, **kw):
    return replace(config, **kw)
