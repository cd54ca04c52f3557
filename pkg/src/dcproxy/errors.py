"""Exception hierarchy shared by all modules."""


class DCPError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class ParseError(DCPError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedCostError(DCPError):
    pass


class ValidationError(DCPError):
    pass


class SingularTapError(DCPError):
    pass


class InputError(DCPError):
    """Non-finite or mis-shaped input to a numerical routine."""


class InfeasibleConfigError(DCPError):
    pass


class UndefinedGapError(DCPError):
    pass


class DomainError(DCPError):
    pass


class TapeStateError(DCPError):
    pass


class NonFiniteError(DCPError):
    def __init__(self, node, op):
        self.node = node
        self.op = op
        super().__init__(f"non-finite value produced at node {node} ({op})")


class CertificationError(DCPError):
    pass
