"""Exception types shared across dataset and checkpoint file handling."""


class FormatError(Exception):
    """Base for malformed artifact files."""


class CorruptHeaderError(FormatError):
    """Header sidecar is unreadable, has a bad magic, or lacks fields."""


class VersionMismatchError(FormatError):
    """File declares a format version this build does not understand."""


class TruncatedPayloadError(FormatError):
    """Payload byte count disagrees with what the header promises."""


class TensorShapeError(FormatError):
    """A stored tensor's shape disagrees with the model it is loaded into."""


class GenerationError(Exception):
    """Channel generator parameters violate the angular-delay energy bound."""


class TrainingDivergedError(Exception):
    """Loss became non-finite during training."""
