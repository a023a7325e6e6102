"""Deterministic source emission.

emit_source(parse(s)) is a fixpoint: parsing what we print yields a
structurally identical Program, and printing that parses back byte-for-byte.
Floats are printed with repr (shortest exact form), indentation is four
spaces, newlines are LF, and parentheses are minimal for the structure.
"""

from __future__ import annotations

from .syntax import (
    Assign,
    BinOp,
    BoolLit,
    Call,
    Comment,
    Expr,
    ExprStmt,
    FloatLit,
    ForRange,
    FunctionDef,
    If,
    Index,
    IndexAssign,
    InsertGradOf,
    IntLit,
    Name,
    NegOp,
    Program,
    Return,
    Stmt,
    StrLit,
    Unsupported,
    While,
)

_PREC_CMP = 1
_PREC_ADD = 2
_PREC_MUL = 3
_PREC_UNARY = 4
_PREC_POSTFIX = 5
_PREC_ATOM = 6

_OP_PREC = {
    "<": _PREC_CMP,
    ">": _PREC_CMP,
    "<=": _PREC_CMP,
    ">=": _PREC_CMP,
    "==": _PREC_CMP,
    "+": _PREC_ADD,
    "-": _PREC_ADD,
    "*": _PREC_MUL,
    "/": _PREC_MUL,
}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _OP_PREC[e.op]
    if isinstance(e, NegOp):
        return _PREC_UNARY
    if isinstance(e, (Call, Index)):
        return _PREC_POSTFIX
    return _PREC_ATOM


def emit_expr(e: Expr) -> str:
    if isinstance(e, FloatLit):
        return repr(e.value)
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, BoolLit):
        return "True" if e.value else "False"
    if isinstance(e, StrLit):
        return f"'{e.value}'"
    if isinstance(e, Name):
        return e.id
    if isinstance(e, BinOp):
        p = _OP_PREC[e.op]
        left = emit_expr(e.left)
        if _prec(e.left) < p:
            left = f"({left})"
        right = emit_expr(e.right)
        # binary operators are left associative: a right child at the same
        # level only exists when the tree really nests rightward
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    if isinstance(e, NegOp):
        inner = emit_expr(e.operand)
        if _prec(e.operand) < _PREC_UNARY:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(emit_expr(a) for a in e.args)})"
    if isinstance(e, Index):
        base = emit_expr(e.base)
        if _prec(e.base) < _PREC_POSTFIX:
            base = f"({base})"
        return f"{base}[{emit_expr(e.index)}]"
    raise TypeError(f"not an expression node: {type(e).__name__}")


def emit_stmt(s: Stmt, out: list[str], depth: int):
    pad = "    " * depth
    if isinstance(s, Comment):
        out.append(f"{pad}# {s.text}" if s.text else f"{pad}#")
    elif isinstance(s, Assign):
        out.append(f"{pad}{s.target} = {emit_expr(s.value)}")
    elif isinstance(s, IndexAssign):
        out.append(f"{pad}{s.target}[{emit_expr(s.index)}] = {emit_expr(s.value)}")
    elif isinstance(s, Return):
        out.append(f"{pad}return {', '.join(emit_expr(v) for v in s.values)}")
    elif isinstance(s, ExprStmt):
        out.append(f"{pad}{emit_expr(s.value)}")
    elif isinstance(s, If):
        out.append(f"{pad}if {emit_expr(s.test)}:")
        for c in s.body:
            emit_stmt(c, out, depth + 1)
        if s.orelse:
            out.append(f"{pad}else:")
            for c in s.orelse:
                emit_stmt(c, out, depth + 1)
    elif isinstance(s, While):
        out.append(f"{pad}while {emit_expr(s.test)}:")
        for c in s.body:
            emit_stmt(c, out, depth + 1)
    elif isinstance(s, ForRange):
        out.append(f"{pad}for {s.var} in range({emit_expr(s.count)}):")
        for c in s.body:
            emit_stmt(c, out, depth + 1)
    elif isinstance(s, InsertGradOf):
        out.append(f"{pad}with insert_grad_of({s.var}) as {s.alias}:")
        for c in s.body:
            emit_stmt(c, out, depth + 1)
    elif isinstance(s, Unsupported):
        out.append(f"{pad}{s.text}")
    else:
        raise TypeError(f"not a statement node: {type(s).__name__}")


def emit_function(fn: FunctionDef) -> str:
    out: list[str] = []
    for text in fn.leading_comments:
        out.append(f"# {text}" if text else "#")
    params = []
    for p in fn.params:
        if p.default is None:
            params.append(p.name)
        else:
            params.append(f"{p.name}={emit_expr(p.default)}")
    out.append(f"def {fn.name}({', '.join(params)}):")
    for s in fn.body:
        emit_stmt(s, out, 1)
    return "\n".join(out) + "\n"


def emit_source(p: Program) -> str:
    """Render a Program as canonical source text."""
    chunks = [emit_function(fn) for fn in p.functions]
    text = "\n".join(chunks)
    for c in p.trailing_comments:
        text += f"# {c}\n" if c else "#\n"
    return text


def stmt_summary(s: Stmt) -> str:
    """One-line rendering of a statement, used for 'Grad of:' comments and
    trace output. Nested blocks render as their head line only."""
    tmp: list[str] = []
    emit_stmt(s, tmp, 0)
    return tmp[0]
