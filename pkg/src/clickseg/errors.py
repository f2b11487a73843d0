"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes disagree; the message names the offending axis."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class EmptyClickSetError(ValueError):
    """An operation that needs at least one click received none."""


class EmptyForegroundError(Exception):
    """A binarized probability map has no foreground pixel, so no zoom
    region can be derived.  Callers fall back to the full-frame path."""


class NoErrorPixelsError(Exception):
    """Prediction equals ground truth; the simulated annotator has nothing
    left to correct and the episode terminates."""


class DuplicateClickError(ValueError):
    """A click landed on a pixel already clicked in this session."""


class OutOfBoundsClickError(ValueError):
    """A click lies outside the image."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite.  Carries a diagnostic dump of the batch."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataGenerationError(RuntimeError):
    """Scene generation could not satisfy its invariants."""
