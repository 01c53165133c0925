"""Exception types shared across the package."""


class NotecoderError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(NotecoderError):
    """Bad input data or configuration; maps to CLI exit code 1."""


class ParseError(ValidationError):
    """Malformed record, code, or vector-file line."""


class DimensionError(NotecoderError):
    """Tensor or matrix shapes do not line up."""


class TrainingDiverged(NotecoderError):
    """Training produced a non-finite loss."""
