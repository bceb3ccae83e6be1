"""Exception types shared across the engine."""


class ShapeMismatch(ValueError):
    """Array shapes disagree with what an operation requires."""


class ImageTooLarge(ValueError):
    """Requested raster output exceeds the configured pixel budget."""


class ImageTooSmall(ValueError):
    """Image is smaller than the SSIM window."""


class FeatureDimTooSmall(ValueError):
    """Feature supervision needs at least 4 latent channels."""


class StaleAux(ValueError):
    """Backward pass received aux data from a different forward call."""


class StaleTrace(ValueError):
    """Network backward received a trace from a different forward call."""


class FormatError(ValueError):
    """Checkpoint or PLY payload is malformed."""


class DataError(ValueError):
    """Dataset is unusable for training (e.g. a frame missing a modality)."""


class MissingField(DataError):
    """A required key is absent from a dataset manifest."""


class MissingImage(DataError):
    """A frame references an image that is absent or undeclared."""


class BadMatrix(DataError):
    """A camera transform is not a rigid motion."""


class RangeError(IndexError):
    """An index (e.g. camera index) is out of range."""
