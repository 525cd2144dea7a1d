"""Exception hierarchy shared across the package."""


class IRevNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(IRevNetError, ValueError):
    pass


class DTypeError(IRevNetError, TypeError):
    pass


class InsufficientStatisticsError(IRevNetError, ValueError):
    pass


class ReplayError(IRevNetError, ValueError):
    """Train-mode reproduction was requested without captured batch stats."""


class ConfigError(IRevNetError, ValueError):
    pass


class FormatError(IRevNetError, ValueError):
    """A file on disk does not follow its declared binary/text layout."""


class CheckpointError(FormatError):
    pass
