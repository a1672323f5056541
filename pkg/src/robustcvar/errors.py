"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a structural invariant (bad distribution, bad MDP, ...)."""


class DomainError(ValueError):
    """A scalar argument lies outside the domain of the operation."""


class NumericError(ArithmeticError):
    """A numerical routine failed (non-convergence, broken concavity)."""


class ParseError(ValidationError):
    """A file could not be parsed. Carries the line/column when known."""

    def __init__(self, msg, path=None, line=None, col=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if col is not None:
            where.append(f"column {col}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.path = path
        self.line = line
        self.col = col
