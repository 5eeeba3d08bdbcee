"""Exception taxonomy.

Validation and data problems terminate a CLI run with exit status 1,
numerical failures (non-finite values, failed gradient checks) with
exit status 2.
"""


class PotsegError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(PotsegError):
    """A function or CLI argument is invalid."""


class DimensionError(PotsegError):
    """Array shapes or extents are incompatible."""


class LabelError(PotsegError):
    """A class label is out of range; the message names the offending pixel."""


class DataError(PotsegError):
    """A dataset directory is malformed (missing files, unmatched stems)."""


class FormatError(PotsegError):
    """A file has an unsupported encoding (e.g. a 16-bit PNG)."""


class CheckpointError(PotsegError):
    """A checkpoint file fails framing, CRC, or shape validation."""


class CapacityError(PotsegError):
    """A configured resource cap was exceeded."""


class StateError(PotsegError):
    """An operation was called in an invalid state (e.g. empty accumulator)."""


class NumericalError(PotsegError):
    """A computation produced non-finite values or broke a numeric invariant."""
