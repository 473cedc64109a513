"""Exception hierarchy shared by the compiler and simulator."""

from __future__ import annotations


class NbdsError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(NbdsError, ValueError):
    """Malformed expression text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.message = message
        self.position = position


class ExponentError(ParseError):
    """``^`` applied with something other than a positive integer literal."""


class UnboundSymbol(NbdsError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unbound symbol {self.name!r}"


class DivisionByZero(NbdsError, ZeroDivisionError):
    pass


class SchemaError(NbdsError, ValueError):
    pass


class UnknownSymbol(SchemaError):
    def __init__(self, symbol: str, equation: str):
        super().__init__(f"equation {equation!r} references undeclared symbol {symbol!r}")
        self.symbol = symbol
        self.equation = equation


class NonPositiveTau(SchemaError):
    def __init__(self, state: str, tau: float):
        super().__init__(f"state {state!r} has non-positive or non-finite tau {tau!r}")
        self.state = state
        self.tau = tau


class UnknownModel(NbdsError, LookupError):
    pass


class NonPhysicalBias(NbdsError, ValueError):
    pass


class MissingS(NbdsError, ValueError):
    def __init__(self, dim: int):
        super().__init__(f"no S value for dimension {dim}")
        self.dim = dim


class UnsynthesizableExpression(NbdsError, ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"expression cannot be mapped onto the block vocabulary: {lines}")


class RangeViolation(NbdsError, ValueError):
    """Requested branch currents leave the strong-inversion region."""

    def __init__(self, i_out: float, s: float):
        super().__init__(f"|I_out|={abs(i_out):.6g} A exceeds S^2={s * s:.6g} A")
        self.i_out = i_out
        self.s = s


class NonFiniteState(NbdsError, ArithmeticError):
    """Integration produced a NaN or infinity; ``trace`` holds the samples up to that point."""

    def __init__(self, time: float, trace=None):
        super().__init__(f"non-finite state at t={time!r}")
        self.time = time
        self.trace = trace


class GridMismatch(NbdsError, ValueError):
    pass
