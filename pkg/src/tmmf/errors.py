"""Exception types shared across the package."""


class TmmfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TmmfError):
    """Tensor or stream shapes are incompatible with the operation."""


class ParameterError(TmmfError):
    """An operation argument is outside its valid range."""


class ContractError(TmmfError):
    """An API was used in a way its contract forbids."""


class DataError(TmmfError):
    """Labels, sequences or paired inputs are malformed."""


class SynchronizationError(DataError):
    """Multi-modal streams disagree on temporal length."""


class FormatError(TmmfError):
    """A binary or text file does not match its declared format."""


class ConfigError(TmmfError):
    """A configuration object fails validation."""


class CheckpointError(TmmfError):
    """A checkpoint cannot be loaded against the requested model."""


class TrainingAbort(TmmfError):
    """Training stopped on a non-finite loss.

    Carries the offending sequence id and the component losses observed at
    the failing step.
    """

    def __init__(self, sequence_id, ce, smooth, mid):
        self.sequence_id = sequence_id
        self.ce = ce
        self.smooth = smooth
        self.mid = mid
        super().__init__(
            f"non-finite loss on sequence {sequence_id!r} "
            f"(ce={ce}, smooth={smooth}, mid={mid})"
        )
