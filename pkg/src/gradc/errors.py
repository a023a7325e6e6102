"""Error taxonomy shared across the compiler and runtime."""

from __future__ import annotations

from dataclasses import dataclass


class GradcError(Exception):
    """Base for every error this package raises on purpose."""


class ParseError(GradcError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        super().__init__(f"line {line}: {msg}" if line else msg)


class TransformError(GradcError):
    """Raised when a program cannot be differentiated as requested."""


class EvalError(GradcError):
    """Runtime fault in interpreted code (dispatch, shape, arity, name)."""


class TapeError(EvalError):
    """Tape discipline violation: label mismatch, pop from empty, leftovers."""


@dataclass(frozen=True)
class Diagnostic:
    """A validation finding. rule is one of R1..R5."""

    severity: str  # "error" | "warning"
    rule: str
    message: str
    line: int = 0
    function: str = ""

    def __str__(self):
        where = f"{self.function}:" if self.function else ""
        at = f" (line {self.line})" if self.line else ""
        return f"{self.severity} {self.rule} {where} {self.message}{at}"
