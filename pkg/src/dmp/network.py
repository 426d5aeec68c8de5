"""Fully connected manifold layers with a softmax classifier, written out by hand.

Features are stored column-wise (``d x n``). A network is a chain of dense
layers ``H_l = act_l(W_l H_{l-1} + b_l)``; every layer but the last is a
*manifold layer* whose output can receive extra loss gradients, and the last
layer produces the logits fed to the softmax.

Checkpoint layout (little-endian)::

    b"DMP1"                       magic, format version 1
    uint32  L                     number of layers (classifier included)
    L x { uint32 in_dim, uint32 out_dim, uint32 activation, float64 slope }
    L x { float64[out_dim * in_dim] W (row-major), float64[out_dim] b }

Activation codes: 0 = none, 1 = LeakyReLU, 2 = Tanh.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._io import atomic_write_bytes
from .errors import InvalidInputError, ParseError

NONE = "none"
LEAKY_RELU = "leaky_relu"
TANH = "tanh"
_ACT_CODES = {NONE: 0, LEAKY_RELU: 1, TANH: 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

CHECKPOINT_MAGIC = b"DMP1"
PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = NONE
    slope: float = 0.2

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidInputError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in _ACT_CODES:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.activation == LEAKY_RELU and not 0 < self.slope < 1:
            raise InvalidInputError(f"LeakyReLU slope must be in (0, 1), got {self.slope}")


@dataclass
class NetworkParams:
    """Weights and biases of every layer; the last layer is the classifier."""

    specs: tuple
    W: list = field(default_factory=list)
    b: list = field(default_factory=list)

    def __post_init__(self):
        self.specs = tuple(self.specs)
        if not self.W:
            self.W = [np.zeros((s.out_dim, s.in_dim)) for s in self.specs]
            self.b = [np.zeros(s.out_dim) for s in self.specs]
        for prev, nxt in zip(self.specs, self.specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InvalidInputError("layer dimensions do not chain")
        for s, W, b in zip(self.specs, self.W, self.b):
            if W.shape != (s.out_dim, s.in_dim) or b.shape != (s.out_dim,):
                raise InvalidInputError("parameter shapes disagree with layer specs")

    @property
    def n_manifold(self):
        return len(self.specs) - 1

    @property
    def n_classes(self):
        return self.specs[-1].out_dim

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    def arrays(self):
        """Parameter arrays in a fixed order: W_0, b_0, W_1, b_1, ..."""
        out = []
        for W, b in zip(self.W, self.b):
            out.extend((W, b))
        return out

    def copy(self):
        return NetworkParams(self.specs, [W.copy() for W in self.W], [b.copy() for b in self.b])

    def zeros_like(self):
        return NetworkParams(self.specs)


class ForwardTrace(NamedTuple):
    X: np.ndarray
    pre: list        # pre-activation of every layer
    features: list   # post-activation output of every manifold layer
    logits: np.ndarray
    P: np.ndarray


class CrossEntropy(NamedTuple):
    loss: float
    grad_logits: np.ndarray
    clamped: bool


class Entropy(NamedTuple):
    loss: float
    grad_logits: np.ndarray


def build_network(in_dim, hidden, n_classes, activations=(LEAKY_RELU, TANH), slope=0.2, rng=None):
    """Manifold layers of the given widths plus a linear classifier.

    Weights are drawn uniformly from ``+-sqrt(6 / (fan_in + fan_out))``;
    biases start at zero.
    """
    rng = np.random.default_rng(rng)
    hidden = list(hidden)
    acts = list(activations)
    if len(acts) < len(hidden):
        acts += [acts[-1] if acts else NONE] * (len(hidden) - len(acts))
    dims = [in_dim] + hidden + [n_classes]
    specs = [LayerSpec(dims[i], dims[i + 1], acts[i], slope) for i in range(len(hidden))]
    specs.append(LayerSpec(dims[-2], dims[-1], NONE, slope))
    params = NetworkParams(specs)
    for i, s in enumerate(specs):
        limit = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        params.W[i] = rng.uniform(-limit, limit, size=(s.out_dim, s.in_dim))
    return params


def _activate(spec, Z):
    if spec.activation == LEAKY_RELU:
        return np.where(Z > 0, Z, spec.slope * Z)
    if spec.activation == TANH:
        return np.tanh(Z)
    return Z


def _activation_grad(spec, Z, H, dH):
    if spec.activation == LEAKY_RELU:
        return np.where(Z > 0, dH, spec.slope * dH)
    if spec.activation == TANH:
        return dH * (1.0 - H * H)
    return dH


def softmax(Z):
    Z = Z - Z.max(axis=0, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=0, keepdims=True)


def softmax_backward(P, dP):
    """Logit gradient given the gradient with respect to softmax outputs."""
    return P * (dP - np.sum(P * dP, axis=0, keepdims=True))


def forward(params: NetworkParams, X) -> ForwardTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != params.in_dim:
        raise InvalidInputError(f"expected input with {params.in_dim} rows, got shape {X.shape}")
    pre, feats = [], []
    H = X
    for i, spec in enumerate(params.specs):
        Z = params.W[i] @ H + params.b[i][:, None]
        pre.append(Z)
        if i < params.n_manifold:
            H = _activate(spec, Z)
            feats.append(H)
    logits = pre[-1]
    return ForwardTrace(X, pre, feats, logits, softmax(logits))


def backward(params: NetworkParams, trace: ForwardTrace, feature_grads=None, logit_grad=None):
    """Parameter gradients from a logit gradient plus per-layer feature gradients.

    ``feature_grads[l]`` (or ``None``) is added to the gradient flowing into
    the output of manifold layer ``l``; it only reaches layers ``<= l``.
    """
    L = len(params.specs)
    n = trace.X.shape[1]
    feature_grads = list(feature_grads or [])
    feature_grads += [None] * (params.n_manifold - len(feature_grads))
    if len(feature_grads) != params.n_manifold:
        raise InvalidInputError("too many feature gradients for this network")
    grads = params.zeros_like()
    delta = np.zeros((params.n_classes, n)) if logit_grad is None else np.asarray(logit_grad, dtype=np.float64)
    if delta.shape != trace.logits.shape:
        raise InvalidInputError("logit gradient has the wrong shape")
    for i in range(L - 1, -1, -1):
        H_in = trace.features[i - 1] if i > 0 else trace.X
        grads.W[i] = delta @ H_in.T
        grads.b[i] = delta.sum(axis=1)
        if i == 0:
            break
        dH = params.W[i].T @ delta
        extra = feature_grads[i - 1]
        if extra is not None:
            extra = np.asarray(extra, dtype=np.float64)
            if extra.shape != dH.shape:
                raise InvalidInputError(f"feature gradient for layer {i - 1} has shape {extra.shape}, expected {dH.shape}")
            dH = dH + extra
        delta = _activation_grad(params.specs[i - 1], trace.pre[i - 1], H_in, dH)
    return grads


def cross_entropy(P, labels) -> CrossEntropy:
    """Mean negative log-likelihood of ``labels`` and its gradient in logit space."""
    P = np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels)
    c, n = P.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise InvalidInputError("labels must be n integers in [0, c)")
    p_true = P[labels, np.arange(n)]
    clamped = bool(np.any(p_true < PROB_FLOOR))
    loss = float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))
    grad = P.copy()
    grad[labels, np.arange(n)] -= 1.0
    return CrossEntropy(loss, grad / n, clamped)


def target_entropy(P) -> Entropy:
    """Mean column entropy of ``P`` (``0 log 0 = 0``) and its logit gradient."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[1]
    logP = np.log(np.where(P > 0, P, 1.0))
    h = -np.sum(P * logP, axis=0)
    grad = -P * (logP + h[None, :]) / n
    return Entropy(float(h.mean()), grad)


class SGD:
    def __init__(self, lr=0.003, momentum=0.0, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = None

    def step(self, params: NetworkParams, grads: NetworkParams):
        arrays, garrays = params.arrays(), grads.arrays()
        if self._velocity is None:
            self._velocity = [np.zeros_like(a) for a in arrays]
        for a, g, v in zip(arrays, garrays, self._velocity):
            g = g + self.weight_decay * a if self.weight_decay else g
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            a -= self.lr * g


class Adam:
    def __init__(self, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params: NetworkParams, grads: NetworkParams):
        arrays, garrays = params.arrays(), grads.arrays()
        if self._m is None:
            self._m = [np.zeros_like(a) for a in arrays]
            self._v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, garrays, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def checkpoint_bytes(params: NetworkParams) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.specs))]
    for s in params.specs:
        parts.append(struct.pack("<IIId", s.in_dim, s.out_dim, _ACT_CODES[s.activation], s.slope))
    for W, b in zip(params.W, params.b):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: NetworkParams, path):
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path) -> NetworkParams:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint: {exc.strerror}", path=path) from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a DMP1 checkpoint", path=path, offset=0)
    pos = 4
    if len(data) < pos + 4:
        raise ParseError("truncated header", path=path, offset=pos)
    (count,) = struct.unpack_from("<I", data, pos)
    if count < 2:
        raise ParseError(f"need at least one manifold layer and a classifier, got {count} layers",
                         path=path, offset=pos)
    pos += 4
    specs = []
    for _ in range(count):
        if len(data) < pos + 20:
            raise ParseError("truncated layer table", path=path, offset=pos)
        in_dim, out_dim, code, slope = struct.unpack_from("<IIId", data, pos)
        if code not in _ACT_NAMES:
            raise ParseError(f"unknown activation code {code}", path=path, offset=pos)
        try:
            specs.append(LayerSpec(in_dim, out_dim, _ACT_NAMES[code], slope))
        except InvalidInputError as exc:
            raise ParseError(str(exc), path=path, offset=pos) from exc
        pos += 20
    Ws, bs = [], []
    for s in specs:
        for shape in ((s.out_dim, s.in_dim), (s.out_dim,)):
            size = int(np.prod(shape)) * 8
            if len(data) < pos + size:
                raise ParseError("truncated parameter block", path=path, offset=pos)
            arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise ParseError("non-finite parameter", path=path, offset=pos)
            (Ws if len(shape) == 2 else bs).append(arr)
            pos += size
    if pos != len(data):
        raise ParseError("trailing bytes after parameters", path=path, offset=pos)
    try:
        return NetworkParams(specs, Ws, bs)
    except InvalidInputError as exc:
        raise ParseError(str(exc), path=path) from exc
