"""Exception types shared across the package."""


class VpsError(Exception):
    """Base class for all package errors."""


class FormatError(VpsError):
    """A file on disk does not follow its binary layout."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnknownClassId(FormatError):
    pass


class DimensionOverflow(FormatError):
    pass


class EmptyMask(VpsError, ValueError):
    pass


class DimensionMismatch(VpsError, ValueError):
    pass


class ShapeMismatch(VpsError, ValueError):
    pass


class IdMisalignment(VpsError, ValueError):
    pass


class EmptySupervision(VpsError, ValueError):
    pass


class LengthMismatch(VpsError, ValueError):
    pass


class SpecOutOfBounds(VpsError, ValueError):
    pass
