"""Exception types shared across the package."""


class LadiffError(Exception):
    """Base class for all package errors."""


class ConfigError(LadiffError, ValueError):
    """Invalid or inconsistent configuration."""


class VocabularyError(LadiffError, KeyError):
    """Text contains a token outside the frozen embedder vocabulary."""


class DomainError(LadiffError, ValueError):
    """Argument outside its mathematical domain (negative count, bad fraction, ...)."""


class LengthError(LadiffError, ValueError):
    """Requested or supplied motion length outside the supported range."""


class ShapeError(LadiffError, ValueError):
    """Tensor/latent shape inconsistent with the operation's contract."""


class InsufficientDataError(LadiffError, ValueError):
    """Too few samples to compute the requested statistic."""


class ExtractorQualityError(LadiffError, RuntimeError):
    """Feature extractors failed the validation margin; evaluation refused."""


class NumericalError(LadiffError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy result."""


class TrainingDivergedError(LadiffError, RuntimeError):
    """Non-finite loss during training; carries the offending batch id."""

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class CheckpointError(LadiffError, ValueError):
    """Malformed checkpoint container."""


class ChecksumError(CheckpointError):
    """Checkpoint trailing checksum does not validate."""


class DigestMismatchError(CheckpointError):
    """Checkpoint was written under a different configuration."""


class PrerequisiteError(LadiffError, FileNotFoundError):
    """A command is missing a required input artifact."""
