"""Exception types shared across the package.

Everything derives from CropZoomError so callers (notably the CLI) can
separate configuration mistakes from runtime failures.
"""


class CropZoomError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CropZoomError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class RangeError(CropZoomError, ValueError):
    """An interval or dimension argument is empty, inverted, or non-positive."""


class DegenerateFrame(CropZoomError):
    """Camera basis cannot be built (up vector parallel to the view axis)."""


class BehindCamera(CropZoomError):
    """A point or box corner lies behind the image plane."""


class OutsideFrame(CropZoomError):
    """A projected envelope does not intersect the image rectangle."""


class PlacementError(CropZoomError):
    """A foreground object cannot be placed inside the background frame."""


class AssetError(CropZoomError):
    """A foreground asset file is missing or unreadable."""


class MissingGroundTruth(CropZoomError):
    """A ground-truth-driven detector was invoked without ground truth."""


class DetectorUnavailable(CropZoomError):
    """A remote detector endpoint could not be reached or answered with an error."""


class ProtocolError(CropZoomError):
    """A wire message was malformed, truncated, or of an unexpected type."""


class KindError(CropZoomError, TypeError):
    """Mixed box kinds (pixel vs normalized) passed to a binary operation."""


class DegenerateCrop(CropZoomError):
    """Expanding and clamping a context box produced an empty crop."""
