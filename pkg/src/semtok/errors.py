"""Exception types shared across the package."""


class SemtokError(Exception):
    """Base class for all package errors."""


class ConfigError(SemtokError, ValueError):
    pass


class ShapeError(SemtokError, ValueError):
    pass


class DomainError(SemtokError, ValueError):
    pass


class EmptyInput(SemtokError, ValueError):
    pass


class DoubleNormalize(SemtokError, ValueError):
    pass


class NormalizedLatentError(SemtokError, ValueError):
    """Raised when a decoder receives latents still in standardized space."""


class DatasetTooSmall(SemtokError, ValueError):
    pass


class EmptyDataset(SemtokError, ValueError):
    pass


class NonFiniteLoss(SemtokError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StageOrderError(SemtokError, RuntimeError):
    pass


class MissingArtifact(SemtokError, FileNotFoundError):
    pass


class HashMismatch(SemtokError):
    """An artifact exists but was produced under a different configuration."""


class RunLocked(SemtokError, RuntimeError):
    pass
