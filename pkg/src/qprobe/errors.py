"""Exception hierarchy shared by every module.

I/O failures surface as the builtin ``OSError`` family; everything raised here
derives from :class:`QProbeError` so callers can catch the toolkit's own
diagnostics in one place.
"""


class QProbeError(Exception):
    pass


class ArgumentError(QProbeError, ValueError):
    """A caller-supplied argument violates an operation's precondition."""


class ShapeError(QProbeError, ValueError):
    pass


class FormatError(QProbeError, ValueError):
    """Unsupported image encoding."""


class ParseError(QProbeError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(QProbeError, ValueError):
    """A value parsed correctly but breaks a domain invariant."""


class ForgeError(QProbeError):
    pass


class RegionError(QProbeError, ValueError):
    pass


class MissingIdError(QProbeError, KeyError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"ids not found: {', '.join(map(str, self.ids))}")

    def __str__(self):
        return self.args[0]


class ScorerError(QProbeError):
    pass


class NetworkError(ScorerError):
    pass


class SchemaError(ScorerError, ValueError):
    pass


class MissingEntryError(ScorerError, KeyError):
    def __str__(self):
        return self.args[0]
