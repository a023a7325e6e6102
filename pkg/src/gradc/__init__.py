"""gradc: a source-to-source differentiating compiler for a small array language."""

from .errors import Diagnostic, EvalError, GradcError, ParseError, TapeError, TransformError
from .interp import Interp, eval_program
from .parser import parse
from .printer import emit_source

__all__ = [
    "Diagnostic",
    "EvalError",
    "GradcError",
    "Interp",
    "ParseError",
    "TapeError",
    "TransformError",
    "emit_source",
    "eval_program",
    "parse",
]
