"""Exception hierarchy."""


class LdpReconError(Exception):
    """Base class for all package errors."""


class DomainError(LdpReconError, ValueError):
    """An argument lies outside the domain of a function."""


class InsufficientSamplesError(LdpReconError, ValueError):
    """Too few samples to form an estimate."""


class ShapeError(LdpReconError, ValueError):
    """Array dimensions do not match what an operation requires."""


class MaskingError(LdpReconError):
    """A mask provider failed for one sample of a batch."""

    def __init__(self, index, reason):
        super().__init__(f"mask provider failed for sample {index}: {reason}")
        self.index = index


class ParseError(LdpReconError, ValueError):
    """Malformed or truncated file payload."""


class ConfigError(LdpReconError, ValueError):
    """Invalid or incomplete run configuration."""


class AggregationError(LdpReconError):
    """Server-side aggregation cannot proceed."""


class DivergenceError(LdpReconError, FloatingPointError):
    """Training produced a non-finite loss."""
