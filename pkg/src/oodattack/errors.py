"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration/validation problems exit
with 1, runtime/numeric problems with 2.
"""


class OodAttackError(Exception):
    """Base class. ``module`` and ``key`` name where the failure originated."""

    def __init__(self, message, *, module=None, key=None):
        super().__init__(message)
        self.module = module
        self.key = key

    def __str__(self):
        msg = super().__str__()
        where = [p for p in (self.module, self.key) if p]
        return f"[{' / '.join(where)}] {msg}" if where else msg


class ConfigError(OodAttackError, ValueError):
    pass


class ValidationError(OodAttackError, ValueError):
    pass


class DegenerateVectorError(OodAttackError, ValueError):
    """A zero-norm embedding reached a cosine similarity."""


class UnsupportedBundleError(OodAttackError):
    pass


class NumericError(OodAttackError, ArithmeticError):
    def __init__(self, message, *, diagnostics=None, **kw):
        super().__init__(message, **kw)
        self.diagnostics = diagnostics or {}


class BuildError(OodAttackError):
    pass


class NotFoundError(OodAttackError, LookupError):
    pass


class IntegrityError(OodAttackError):
    pass


class NetworkError(OodAttackError, ConnectionError):
    pass


class MigrationError(OodAttackError):
    def __init__(self, message, *, found=None, expected=None, **kw):
        super().__init__(message, **kw)
        self.found = found
        self.expected = expected
