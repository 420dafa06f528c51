"""Exception hierarchy shared by all svquant modules.

Every error raised on a user-facing path derives from :class:`SvquantError`
so the CLI can map failures to stable exit codes.
"""


class SvquantError(Exception):
    """Base class for all svquant errors."""


class ValidationError(SvquantError):
    """An input object violates a documented precondition."""


class ConfigError(SvquantError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(SvquantError):
    """Array shapes do not line up for the requested operation."""


class FormatError(SvquantError):
    """A container file is structurally malformed."""


class DataError(SvquantError):
    """A container file parses but carries invalid payload values."""


class IoError(SvquantError):
    """The filesystem refused a read or write."""


class NumericalError(SvquantError):
    """A computation produced non-finite values it cannot recover from."""


class BudgetError(SvquantError):
    """A requested computation exceeds its documented size budget."""
