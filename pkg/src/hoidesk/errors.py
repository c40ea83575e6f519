"""Exception hierarchy shared across the package."""


class HoiError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HoiError, ValueError):
    pass


class ZeroNorm(HoiError, ArithmeticError):
    pass


class NotScalar(HoiError, ValueError):
    pass


class DetachedTensor(HoiError, RuntimeError):
    pass


class FormatError(HoiError, ValueError):
    """Malformed file or record; message names the path and the field."""

    def __init__(self, message, path=None, field=None):
        self.path = path
        self.field = field
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if field is not None:
            parts.append(f"field={field}")
        super().__init__(" | ".join(parts))


class NonFinite(HoiError, ValueError):
    pass


class KOutOfRange(HoiError, ValueError):
    pass


class MissingVerbData(HoiError, ValueError):
    def __init__(self, verbs):
        self.verbs = list(verbs)
        super().__init__(f"no instances available for verbs {self.verbs}")


class UnknownMapping(HoiError, KeyError):
    pass


class UnknownCategory(HoiError, KeyError):
    pass


class InvalidBox(HoiError, ValueError):
    pass


class BadMode(HoiError, ValueError):
    pass


class FileError(HoiError, OSError):
    pass


class Infeasible(HoiError, ValueError):
    pass


class BadConfig(HoiError, ValueError):
    pass


class BadFraction(HoiError, ValueError):
    pass


class ConfigError(HoiError, ValueError):
    """Run configuration rejected; CLI exit code 2."""


class DataError(HoiError, ValueError):
    """Input data rejected; CLI exit code 3."""
