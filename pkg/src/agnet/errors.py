"""Exception types raised across the package.

Every intentional failure surfaces as an :class:`AgnetError` subclass so the
CLI can distinguish structured errors (exit code 1 with a message) from bugs.
"""


class AgnetError(Exception):
    """Base class for all structured errors."""


class ShapeError(AgnetError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(AgnetError):
    """A numeric invariant was violated (non-finite values, bad dtype)."""


class ImageError(AgnetError):
    """An image is undecodable, malformed, or too small to process."""


class TooFewPointsError(AgnetError):
    """Fewer points than clusters were supplied to a clustering routine."""


class ConfigError(AgnetError):
    """A config file or CLI option could not be parsed or validated."""


class DatasetError(AgnetError):
    """A dataset directory violates the expected layout."""


class CheckpointError(AgnetError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
