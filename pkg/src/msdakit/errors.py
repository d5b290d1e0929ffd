"""Exception hierarchy shared by every module.

Errors are grouped into four families so the CLI can map them onto
distinct exit codes: configuration, data, numeric, and I/O.
"""


class MsdaError(Exception):
    """Base class for all package errors."""


class ConfigError(MsdaError):
    """Invalid or unknown configuration key/value."""


class DataError(MsdaError):
    """Problems with datasets, files, shapes, or protocol construction."""


class DimensionError(DataError):
    """Shape or width mismatch between arrays."""


class LabelError(DataError):
    """Class label outside the valid range."""


class FormatError(DataError):
    """Malformed data file (carries file and line context in the message)."""


class DataFileError(DataError):
    """Referenced data file missing or unreadable."""


class ProtocolError(DataError):
    """Evaluation protocol cannot be built from the given datasets."""


class EmptyDomainError(DataError):
    """An operation received an empty sample set."""


class MissingPrototypeError(DataError):
    """A class prototype required by a loss or pseudo-labeler is absent."""


class InfeasibleClusteringError(DataError):
    """More clusters requested than samples available."""


class NumericError(MsdaError):
    """Non-finite values or degenerate numeric conditions."""


class DegenerateBatchError(NumericError):
    """Batch statistics undefined (train-mode normalization on batch of 1)."""


class NonFiniteGradientError(NumericError):
    """Optimizer saw a NaN/Inf gradient; message names the parameter."""


class NonFiniteLossError(NumericError):
    """A loss component went non-finite; message names the component."""

    def __init__(self, component: str, value: float):
        self.component = component
        self.value = value
        super().__init__(f"loss component '{component}' is non-finite ({value!r})")


class CheckpointError(MsdaError):
    """Checkpoint missing, malformed, or incompatible with the data."""
