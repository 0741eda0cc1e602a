"""Exception types shared across the package."""


class PiciError(Exception):
    """Base class for every error this package raises deliberately."""


class InvalidImage(PiciError):
    """Image array is malformed (wrong rank, zero area, non-finite pixels)."""


class PatchGridError(PiciError):
    """Image dimensions and patch size do not form a consistent grid."""


class InvalidRatio(PiciError):
    """Masking ratio outside [0, 1)."""


class ConfigError(PiciError):
    """Invalid or inconsistent configuration value."""


class ZeroNormError(PiciError):
    """Cosine similarity requested for a zero-norm vector."""


class InvalidTemperature(PiciError):
    """Contrastive temperature must be strictly positive."""


class InvalidProbability(PiciError):
    """Probability entries must be non-negative."""


class EmptyClusterError(PiciError):
    """A cluster probability column is identically zero, so the cluster has no
    representation to contrast."""


class InputError(PiciError):
    """Operation inputs violate a precondition (shape/length/range)."""


class EmptyDatasetError(PiciError):
    """Dataset root yielded no usable items."""


class DivergenceError(PiciError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, stage: str | None = None,
                 epoch: int | None = None, batch_index: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.batch_index = batch_index
