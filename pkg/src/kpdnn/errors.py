"""Exception hierarchy shared by every kpdnn module."""


class KpdnnError(Exception):
    """Base class for all errors raised by kpdnn."""


class ShapeError(KpdnnError, ValueError):
    """Array dimensions do not conform."""


class DomainError(KpdnnError, ValueError):
    """An argument lies outside its allowed range."""


class ParseError(KpdnnError, ValueError):
    """A textual spec (data spec, nnet spec, lrate spec, model text) is malformed."""


class ValidationError(KpdnnError, ValueError):
    """Records handed to a writer violate the archive invariants."""


class DataError(KpdnnError, ValueError):
    """Training or extraction data is inconsistent with the model."""


class CorruptArchiveError(KpdnnError):
    """A PFile on disk is truncated or its header disagrees with the payload."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(KpdnnError):
    """A native checkpoint cannot be loaded."""


class UnsupportedExportError(KpdnnError):
    """The network contains components the text exporter cannot represent."""


class ContractError(KpdnnError, RuntimeError):
    """An API was called out of order, e.g. backward on a stale forward cache."""


class TrainingError(KpdnnError, RuntimeError):
    """Training diverged (non-finite loss or parameters)."""
