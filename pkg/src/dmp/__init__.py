"""Discriminative manifold propagation for unsupervised domain adaptation.

Operates on precomputed feature vectors: a small fully connected network is
trained with cross-entropy on labelled source data, discriminative losses
tied to source class anchors, and a manifold alignment term between source
and target batch statistics.
"""

from .data import FeatureBatch, SyntheticSpec, generate, load_features, save_features
from .errors import (ConfigurationError, DegenerateSpectrumError, DMPError, InsufficientSamplesError,
                     InvalidInputError, NumericalDomainError, ParseError)
from .manifold import MetricKind
from .trainer import TrainConfig, TrainReport, evaluate, train

__all__ = [
    "FeatureBatch", "SyntheticSpec", "generate", "load_features", "save_features",
    "ConfigurationError", "DegenerateSpectrumError", "DMPError", "InsufficientSamplesError",
    "InvalidInputError", "NumericalDomainError", "ParseError",
    "MetricKind", "TrainConfig", "TrainReport", "evaluate", "train",
]

__version__ = "0.1.0"
