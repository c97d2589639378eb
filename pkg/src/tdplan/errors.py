"""Exception hierarchy shared by every tdplan module."""


class TdplanError(Exception):
    """Base class; the CLI maps these to a structured error and nonzero exit."""


class DimensionError(TdplanError, ValueError):
    pass


class ConfigError(TdplanError, ValueError):
    pass


class UsageError(TdplanError, ValueError):
    pass


class ParseError(TdplanError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NonFiniteError(TdplanError, FloatingPointError):
    pass


class EnvironmentFault(TdplanError, RuntimeError):
    """An environment step raised; carries the episode step for context."""
