"""Error types shared across the library.

Each exception carries a stable machine-readable ``code`` so callers (and the
CLI exit-code mapping) can dispatch without string-matching messages.
"""


class MaskfieldError(Exception):
    """Base class; ``code`` identifies the failure category."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class RayMissesBbox(MaskfieldError):
    code = "RAY_MISSES_BBOX"


class BehindCamera(MaskfieldError):
    code = "BEHIND_CAMERA"


class NonPositiveDepth(MaskfieldError):
    code = "NONPOSITIVE_DEPTH"


class NoViewsRetained(MaskfieldError):
    code = "NO_VIEWS_RETAINED"


class Unsupported(MaskfieldError):
    code = "UNSUPPORTED"


class ChannelMismatch(MaskfieldError):
    code = "CHANNEL_MISMATCH"


class BadMagic(MaskfieldError):
    code = "BAD_MAGIC"


class DimMismatch(MaskfieldError):
    code = "DIM_MISMATCH"


class NotNormalized(MaskfieldError):
    code = "NOT_NORMALIZED"


class NanLoss(MaskfieldError):
    code = "NAN_LOSS"


class ValidationError(MaskfieldError):
    """Bad user input (config files, CLI arguments, shape mismatches)."""

    code = "VALIDATION"
