"""Exception hierarchy shared by all modules."""


class DMPError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(DMPError, ValueError):
    """Shape mismatch, non-finite entries, or otherwise malformed arguments."""


class NumericalDomainError(DMPError, ArithmeticError):
    """A value falls outside the domain of a numerical routine (e.g. log of a
    non-positive eigenvalue)."""


class InsufficientSamplesError(InvalidInputError):
    """Too few samples to form a statistic."""


class DegenerateSpectrumError(DMPError):
    """Singular values too close together for a stable subspace derivative."""


class ParseError(DMPError, ValueError):
    """Malformed feature, label, or checkpoint file."""

    def __init__(self, message, *, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class ConfigurationError(DMPError, ValueError):
    """Invalid run or experiment configuration."""
