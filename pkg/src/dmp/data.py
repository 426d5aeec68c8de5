"""Feature datasets: synthetic domain-shift generation, file formats, sampling.

In memory, features are ``d x n`` (one column per sample) and labels are
0-based class indices. On disk labels are 1-based.

Text format (UTF-8, LF)::

    d,n,c,has_labels
    x_1,...,x_d[,label]        # n lines, one per sample

Binary format (little-endian)::

    b"DMPF", uint64 d, uint64 n, uint64 c, uint64 has_labels,
    float64[n * d] features (sample-major), int64[n] labels if has_labels

Held-out label files are text: a header ``n,c`` followed by one label per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import ConfigurationError, InvalidInputError, ParseError

SOURCE = "source"
TARGET = "target"
BINARY_MAGIC = b"DMPF"


@dataclass(frozen=True)
class FeatureBatch:
    features: np.ndarray
    domain: str = SOURCE
    labels: np.ndarray | None = None
    n_classes: int = 0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("features contain non-finite values")
        object.__setattr__(self, "features", X)
        if self.domain not in (SOURCE, TARGET):
            raise InvalidInputError(f"unknown domain {self.domain!r}")
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (X.shape[1],) or not np.issubdtype(y.dtype, np.integer):
                raise InvalidInputError("labels must be one integer per sample")
            y = y.astype(np.int64)
            c = self.n_classes or (int(y.max()) + 1 if y.size else 0)
            if y.size and (y.min() < 0 or y.max() >= c):
                raise InvalidInputError(f"labels must lie in [0, {c})")
            object.__setattr__(self, "labels", y)
            object.__setattr__(self, "n_classes", c)

    @property
    def dim(self):
        return self.features.shape[0]

    @property
    def n(self):
        return self.features.shape[1]

    def subset(self, index):
        labels = None if self.labels is None else self.labels[index]
        return FeatureBatch(self.features[:, index], self.domain, labels, self.n_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class blobs with a rotation + translation shift on the target.

    ``rotation`` (radians) acts in a random 2-plane; ``translation`` is the
    length of a random offset; ``noise`` is the within-class standard
    deviation; ``separation`` the pairwise distance between class means.
    Only the first ``partial_keep`` classes appear in the target.
    """

    n_classes: int = 5
    dim: int = 16
    n_per_class: int = 200
    target_per_class: int | None = None
    rotation: float = 1.2
    translation: float = 4.0
    noise: float = 1.0
    separation: float = 6.0
    partial_keep: int | None = None
    seed: int = 0
    counts: tuple | None = field(default=None)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.dim < 2:
            raise ConfigurationError("need at least two feature dimensions")
        keep = self.n_classes if self.partial_keep is None else self.partial_keep
        if not 1 <= keep <= self.n_classes:
            raise ConfigurationError(f"partial_keep must be in [1, {self.n_classes}], got {keep}")
        for n in self.class_counts() + self.target_counts():
            if n < 2:
                raise ConfigurationError("every class needs at least 2 samples")
        if self.noise < 0 or self.separation <= 0:
            raise ConfigurationError("noise must be >= 0 and separation > 0")

    @property
    def keep(self):
        return self.n_classes if self.partial_keep is None else self.partial_keep

    def class_counts(self):
        if self.counts is not None:
            if len(self.counts) != self.n_classes:
                raise ConfigurationError("counts must list one value per class")
            return [int(n) for n in self.counts]
        return [self.n_per_class] * self.n_classes

    def target_counts(self):
        if self.target_per_class is None:
            return self.class_counts()[: self.keep]
        return [self.target_per_class] * self.keep


def random_orthogonal(dim, rng):
    Q, R = np.linalg.qr(rng.normal(size=(dim, dim)))
    return Q * np.sign(np.diag(R))


def plane_rotation(dim, angle, rng):
    """Rotation by ``angle`` within a random 2-plane of R^dim."""
    basis = random_orthogonal(dim, rng)[:, :2]
    a, b = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (np.eye(dim) + (c - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + s * (np.outer(b, a) - np.outer(a, b)))


def class_centers(spec: SyntheticSpec, rng):
    """Class means with every pair exactly ``separation`` apart when c <= d,
    otherwise random means resampled until the pairwise margin holds."""
    c, d = spec.n_classes, spec.dim
    if c <= d:
        Q = random_orthogonal(d, rng)[:, :c]
        return Q * (spec.separation / np.sqrt(2.0))
    for _ in range(1000):
        M = rng.normal(size=(d, c)) * spec.separation
        if min_pairwise_distance(M) >= spec.separation:
            return M
    raise ConfigurationError("could not place class means with the requested separation")


def min_pairwise_distance(M):
    diff = M[:, :, None] - M[:, None, :]
    D = np.sqrt(np.sum(diff * diff, axis=0))
    return float(np.min(D[np.triu_indices(M.shape[1], 1)]))


def generate(spec: SyntheticSpec):
    """Return ``(source, target, target_labels)``.

    The target batch carries no labels; its labels come back separately and
    are meant for evaluation only.
    """
    rng = np.random.default_rng(spec.seed)
    means = class_centers(spec, rng)
    if min_pairwise_distance(means) < spec.separation * (1 - 1e-9):
        raise AssertionError("class means violate the configured separation")
    rotation = plane_rotation(spec.dim, spec.rotation, rng)
    offset = rng.normal(size=spec.dim)
    offset *= spec.translation / np.linalg.norm(offset)

    def draw(counts):
        labels = np.repeat(np.arange(len(counts)), counts)
        X = means[:, labels] + spec.noise * rng.normal(size=(spec.dim, labels.size))
        return X, labels

    Xs, ys = draw(spec.class_counts())
    Xt, yt = draw(spec.target_counts())
    Xt = rotation @ Xt + offset[:, None]
    perm = rng.permutation(yt.size)
    Xt, yt = Xt[:, perm], yt[perm]
    c = spec.n_classes
    source = FeatureBatch(Xs, SOURCE, ys, c)
    target = FeatureBatch(Xt, TARGET, None, c)
    return source, target, yt


def sample_batch(batch: FeatureBatch, b_s, rng, replace=True) -> FeatureBatch:
    """``b_s`` uniform draws, with replacement unless ``replace=False``.

    Without replacement the draw is a uniform random subset (falling back to
    with-replacement when ``b_s`` exceeds the dataset size).
    """
    if b_s < 1:
        raise InvalidInputError(f"batch size must be >= 1, got {b_s}")
    if batch.n == 0:
        raise InvalidInputError("cannot sample from an empty dataset")
    if replace or b_s > batch.n:
        return batch.subset(rng.integers(0, batch.n, size=b_s))
    return batch.subset(rng.choice(batch.n, size=b_s, replace=False))


def _fmt(x):
    return repr(float(x))


def features_text(batch: FeatureBatch) -> str:
    has = batch.labels is not None
    lines = [f"{batch.dim},{batch.n},{batch.n_classes},{int(has)}"]
    X = batch.features
    for j in range(batch.n):
        row = ",".join(_fmt(v) for v in X[:, j])
        if has:
            row += f",{int(batch.labels[j]) + 1}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def features_binary(batch: FeatureBatch) -> bytes:
    has = batch.labels is not None
    parts = [BINARY_MAGIC, struct.pack("<4Q", batch.dim, batch.n, batch.n_classes, int(has)),
             np.ascontiguousarray(batch.features.T, dtype="<f8").tobytes()]
    if has:
        parts.append((batch.labels + 1).astype("<i8").tobytes())
    return b"".join(parts)


def save_features(batch: FeatureBatch, path, binary=None):
    """Write ``batch``; binary when asked or when the suffix is ``.bin``."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        atomic_write_bytes(path, features_binary(batch))
    else:
        atomic_write_text(path, features_text(batch))


def _parse_int(token, path, line, what):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"{what} is not an integer: {token!r}", path=path, line=line) from None


def _parse_header(text, path, names):
    fields = text.strip().split(",")
    if len(fields) != len(names):
        raise ParseError(f"header must be {','.join(names)}", path=path, line=1)
    values = [_parse_int(f, path, 1, name) for f, name in zip(fields, names)]
    if any(v < 0 for v in values):
        raise ParseError("header values must be non-negative", path=path, line=1)
    return values


def _load_binary(data, path, domain):
    if len(data) < 36:
        raise ParseError("truncated binary header", path=path, offset=len(data))
    d, n, c, has = struct.unpack_from("<4Q", data, 4)
    need = 36 + 8 * n * d + (8 * n if has else 0)
    if len(data) != need:
        raise ParseError(f"payload is {len(data)} bytes, header implies {need}", path=path, offset=len(data))
    X = np.frombuffer(data, dtype="<f8", count=n * d, offset=36).reshape(n, d).T.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ParseError("non-finite feature value", path=path, offset=36)
    labels = None
    if has:
        raw = np.frombuffer(data, dtype="<i8", count=n, offset=36 + 8 * n * d).astype(np.int64)
        if n and (raw.min() < 1 or raw.max() > c):
            raise ParseError(f"labels must lie in 1..{c}", path=path, offset=36 + 8 * n * d)
        labels = raw - 1
    return FeatureBatch(X, domain, labels, int(c))


def load_features(path, domain=SOURCE) -> FeatureBatch:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=path) from exc
    if data[:4] == BINARY_MAGIC:
        return _load_binary(data, path, domain)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("not UTF-8 text", path=path, offset=exc.start) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", path=path, line=1)
    d, n, c, has = _parse_header(lines[0], path, ("d", "n", "c", "has_labels"))
    if has not in (0, 1):
        raise ParseError("has_labels must be 0 or 1", path=path, line=1)
    if len(lines) - 1 != n:
        raise ParseError(f"header declares {n} samples, found {len(lines) - 1}", path=path, line=len(lines))
    X = np.empty((d, n))
    labels = np.empty(n, dtype=np.int64) if has else None
    width = d + has
    for j, line in enumerate(lines[1:]):
        lineno = j + 2
        fields = line.split(",")
        if len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", path=path, line=lineno)
        try:
            row = [float(v) for v in fields[:d]]
        except ValueError:
            raise ParseError("malformed number", path=path, line=lineno) from None
        if not all(np.isfinite(row)):
            raise ParseError("non-finite feature value", path=path, line=lineno)
        X[:, j] = row
        if has:
            y = _parse_int(fields[d], path, lineno, "label")
            if not 1 <= y <= c:
                raise ParseError(f"label {y} outside 1..{c}", path=path, line=lineno)
            labels[j] = y - 1
    return FeatureBatch(X, domain, labels, c)


def save_labels(labels, n_classes, path):
    labels = np.asarray(labels, dtype=np.int64)
    lines = [f"{labels.size},{n_classes}"] + [str(int(y) + 1) for y in labels]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_labels(path):
    """Return ``(labels, n_classes)`` from a held-out label file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read: {exc.strerror}", path=path) from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", path=path, line=1)
    n, c = _parse_header(lines[0], path, ("n", "c"))
    if len(lines) - 1 != n:
        raise ParseError(f"header declares {n} labels, found {len(lines) - 1}", path=path, line=len(lines))
    labels = np.empty(n, dtype=np.int64)
    for j, line in enumerate(lines[1:]):
        y = _parse_int(line.strip(), path, j + 2, "label")
        if not 1 <= y <= c:
            raise ParseError(f"label {y} outside 1..{c}", path=path, line=j + 2)
        labels[j] = y - 1
    return labels, c
