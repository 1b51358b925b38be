"""Exception hierarchy shared by every emaq module."""


class EmaqError(Exception):
    """Base class; the CLI turns any subclass into a JSON error report."""

    kind = "error"

    def to_dict(self):
        return {"kind": self.kind, "message": str(self)}


class StructuralError(EmaqError, ValueError):
    kind = "structural"


class ValidationError(EmaqError, ValueError):
    kind = "validation"


class PreconditionError(EmaqError, ValueError):
    kind = "precondition"


class ConfigurationError(EmaqError, ValueError):
    kind = "configuration"


class DivergenceError(EmaqError, RuntimeError):
    kind = "divergence"


class NonFiniteError(EmaqError, FloatingPointError):
    kind = "non_finite"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def to_dict(self):
        out = super().to_dict()
        out["diagnostics"] = self.diagnostics
        return out


class ParseError(EmaqError, ValueError):
    kind = "parse"

    def __init__(self, message, offset=None, record=None):
        super().__init__(message)
        self.offset = offset
        self.record = record

    def to_dict(self):
        out = super().to_dict()
        out["offset"] = self.offset
        out["record"] = self.record
        return out


class VerificationError(EmaqError, AssertionError):
    """A numerical check ran to completion and did not hold."""

    kind = "verification"

    def __init__(self, message, failed=None):
        super().__init__(message)
        self.failed = failed or {}

    def to_dict(self):
        out = super().to_dict()
        out["failed"] = self.failed
        return out
