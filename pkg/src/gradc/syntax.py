"""AST node definitions for the gradc source language.

Every node is a plain dataclass. Structural equality ignores source line
numbers, so a parse -> emit -> parse round trip compares equal. Comments are
first-class statements: the differentiation passes attach annotations that
must survive optimization and printing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


def _line_field():
    return field(default=0, compare=False, repr=False)


def _origin_field():
    """Provenance tag on statements ("" for user-written source; the
    differentiation passes tag what they generate). Ignored by equality so
    parse -> emit round trips still compare equal."""
    return field(default="", compare=False, repr=False)


def _block_field():
    """Group id tying generated statements to their annotation comment."""
    return field(default=-1, compare=False, repr=False)


# --------------------------------------------------------------------------
# Expressions


@dataclass(slots=True)
class FloatLit:
    value: float
    line: int = _line_field()


@dataclass(slots=True)
class IntLit:
    value: int
    line: int = _line_field()


@dataclass(slots=True)
class BoolLit:
    value: bool
    line: int = _line_field()


@dataclass(slots=True)
class StrLit:
    """Opaque string atom: tape labels and print arguments only."""

    value: str
    line: int = _line_field()


@dataclass(slots=True)
class Name:
    id: str
    line: int = _line_field()


@dataclass(slots=True)
class BinOp:
    """op is one of + - * / < > <= >= ==."""

    op: str
    left: Expr
    right: Expr
    line: int = _line_field()


@dataclass(slots=True)
class NegOp:
    operand: Expr
    line: int = _line_field()


@dataclass(slots=True)
class Call:
    """Callee is syntactically a name, resolved against user functions then
    builtins; it is not an expression."""

    func: str
    args: list[Expr]
    line: int = _line_field()


@dataclass(slots=True)
class Index:
    base: Expr
    index: Expr
    line: int = _line_field()


Expr = FloatLit | IntLit | BoolLit | StrLit | Name | BinOp | NegOp | Call | Index

COMPARISON_OPS = ("<", ">", "<=", ">=", "==")
ARITH_OPS = ("+", "-", "*", "/")


# --------------------------------------------------------------------------
# Statements


@dataclass(slots=True)
class Assign:
    target: str
    value: Expr
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class IndexAssign:
    """target[index] = value; mutates the array held by target in place."""

    target: str
    index: Expr
    value: Expr
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class Return:
    values: list[Expr]
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class If:
    test: Expr
    body: list[Stmt]
    orelse: list[Stmt]
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class While:
    test: Expr
    body: list[Stmt]
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class ForRange:
    """for var in range(count): the only for-loop form."""

    var: str
    count: Expr
    body: list[Stmt]
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class ExprStmt:
    value: Expr
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class Comment:
    """Full-line comment; text excludes the leading '# '."""

    text: str
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class InsertGradOf:
    """with insert_grad_of(var) as alias: block.

    The block is a no-op in the primal and is spliced verbatim (alias renamed
    to var's gradient) into the adjoint at the reversed position.
    """

    var: str
    alias: str
    body: list[Stmt]
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


@dataclass(slots=True)
class Unsupported:
    """A recognizably foreign construct (break, import, try, ...) kept so the
    validator can reject it with a line number instead of a parse failure."""

    text: str
    line: int = _line_field()
    origin: str = _origin_field()
    block: int = _block_field()


Stmt = (
    Assign
    | IndexAssign
    | Return
    | If
    | While
    | ForRange
    | ExprStmt
    | Comment
    | InsertGradOf
    | Unsupported
)


# --------------------------------------------------------------------------
# Top level


@dataclass(slots=True)
class Param:
    name: str
    default: Expr | None = None
    line: int = _line_field()


@dataclass(slots=True)
class FunctionDef:
    name: str
    params: list[Param]
    body: list[Stmt]
    leading_comments: list[str] = field(default_factory=list)
    line: int = _line_field()


@dataclass(slots=True)
class Program:
    functions: list[FunctionDef]
    trailing_comments: list[str] = field(default_factory=list)

    def function(self, name: str) -> FunctionDef:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(f"no function named {name!r}")

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)


# --------------------------------------------------------------------------
# Traversal helpers


def expr_children(e: Expr) -> list[Expr]:
    if isinstance(e, BinOp):
        return [e.left, e.right]
    if isinstance(e, NegOp):
        return [e.operand]
    if isinstance(e, Call):
        return list(e.args)
    if isinstance(e, Index):
        return [e.base, e.index]
    return []


def expr_names(e: Expr, out: set[str] | None = None) -> set[str]:
    """All variable names read by an expression (callee names excluded)."""
    if out is None:
        out = set()
    if isinstance(e, Name):
        out.add(e.id)
    else:
        for c in expr_children(e):
            expr_names(c, out)
    return out


def stmt_blocks(s: Stmt) -> list[list[Stmt]]:
    if isinstance(s, If):
        return [s.body, s.orelse]
    if isinstance(s, (While, ForRange, InsertGradOf)):
        return [s.body]
    return []


def stmt_exprs(s: Stmt) -> list[Expr]:
    """Expressions evaluated directly by a statement (not nested blocks)."""
    if isinstance(s, Assign):
        return [s.value]
    if isinstance(s, IndexAssign):
        return [Name(s.target), s.index, s.value]
    if isinstance(s, Return):
        return list(s.values)
    if isinstance(s, (If, While)):
        return [s.test]
    if isinstance(s, ForRange):
        return [s.count]
    if isinstance(s, ExprStmt):
        return [s.value]
    return []


def walk_stmts(body: list[Stmt]):
    """Yield every statement in a block, depth first."""
    for s in body:
        yield s
        for block in stmt_blocks(s):
            yield from walk_stmts(block)


def assigned_names(body: list[Stmt], out: set[str] | None = None) -> set[str]:
    """Names bound by Assign or ForRange anywhere in a block (IndexAssign
    mutates but does not bind)."""
    if out is None:
        out = set()
    for s in walk_stmts(body):
        if isinstance(s, Assign):
            out.add(s.target)
        elif isinstance(s, ForRange):
            out.add(s.var)
    return out


def clone(node):
    """Deep copy of any AST node or list of nodes."""
    if isinstance(node, list):
        return [clone(n) for n in node]
    if not hasattr(node, "__dataclass_fields__"):
        return node
    kwargs = {}
    for f in fields(node):
        v = getattr(node, f.name)
        if isinstance(v, list):
            kwargs[f.name] = [clone(x) for x in v]
        elif hasattr(v, "__dataclass_fields__"):
            kwargs[f.name] = clone(v)
        else:
            kwargs[f.name] = v
    return type(node)(**kwargs)
