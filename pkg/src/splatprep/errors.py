"""Exception types shared across the toolkit.

Every error raised on a user-facing path derives from SplatPrepError so the
CLI can catch one base class and report the failing stage.
"""


class SplatPrepError(Exception):
    """Base class for all toolkit errors."""


class PlyParseError(SplatPrepError):
    """Malformed PLY header or body; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PlyTruncationError(SplatPrepError):
    """Vertex data ends before the declared element count is reached."""


class PlyDataError(SplatPrepError):
    """Vertex data parsed but failed validation (non-finite coordinate)."""


class ConfigError(SplatPrepError):
    """Invalid pipeline configuration."""


class DegenerateGeometryError(SplatPrepError):
    """Input geometry does not constrain the requested estimate."""


class HomographyError(SplatPrepError):
    """Homography estimation failed (too few matches or no valid sample)."""


class UndefinedOverlapError(SplatPrepError):
    """Overlap ratio has an empty denominator (no warped content)."""


class NoOverlapError(SplatPrepError):
    """ICP found zero correspondences under the distance cap at start."""
