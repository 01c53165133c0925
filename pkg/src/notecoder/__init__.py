"""notecoder: multi-label ICD-9 coding of free-text discharge notes.

Library surface: a minimal autodiff tensor engine (`tensor`, `optim`),
the note preprocessing pipeline (`textpipe`), ICD-9 parsing and label
spaces (`icd9`), five classifier architectures (`models`), training and
evaluation (`training`), a synthetic corpus generator (`synthetic`), and
the CLI (`cli`).
"""

__version__ = "0.1.0"

from .errors import (DimensionError, NotecoderError, ParseError,
                     TrainingDiverged, ValidationError)
from .rng import RngState

__all__ = [
    "DimensionError", "NotecoderError", "ParseError", "RngState",
    "TrainingDiverged", "ValidationError", "__version__",
]
