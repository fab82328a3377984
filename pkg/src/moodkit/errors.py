"""Exception hierarchy shared across the package."""


class MoodkitError(Exception):
    """Base class for all package errors."""


class InvalidVolume(MoodkitError, ValueError):
    """Volume is empty, mis-shaped, or outside the expected range."""


class FormatError(MoodkitError):
    """A file could not be decoded."""


class BadMagic(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ConfigMismatch(MoodkitError):
    """Stored configuration disagrees with the one requested at load time."""


class BinningMismatch(ConfigMismatch):
    pass
