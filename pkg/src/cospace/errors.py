"""Exception types shared across the toolkit."""


class CospaceError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(CospaceError, ValueError):
    """Invalid geometric input (out-of-bounds pixel, degenerate data)."""


class RegistrationFailed(CospaceError):
    """Tag observation absent or invalid; the user should retry."""


class AlignmentError(CospaceError):
    """Registration records cannot be aligned (e.g. different tags)."""


class FramingError(CospaceError):
    """Wire payload violates the framing or record-size contract."""


class CropError(CospaceError):
    """Crop rectangle does not intersect the frame."""


class SchemaError(CospaceError):
    """Structured model output failed validation.

    ``path`` localizes the violation inside the payload.
    """

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{message} (at {path})")
        self.path = path


class PrivacyViolation(CospaceError):
    """Image bytes were about to leave the edge without approved consent."""


class BackendError(CospaceError):
    """Model backend unreachable or persistently failing."""


class BroadcastError(CospaceError):
    """Response cannot be spatially converted for broadcast."""


class NotFound(CospaceError):
    """Referenced object does not exist in the session."""


class ScenarioError(CospaceError):
    """Scenario or config file failed to parse or validate."""
