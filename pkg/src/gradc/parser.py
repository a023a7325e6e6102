"""Lexer and recursive-descent parser for .tg source.

The language is an indented Python subset: def/return/if/else/while/
for-in-range/with-insert_grad_of, assignments (plain and subscript), calls,
binary arithmetic and comparisons, unary minus, full-line comments. Blocks
indent by exactly four spaces. Newlines are LF.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParseError
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
    Param,
    Program,
    Return,
    Stmt,
    StrLit,
    Unsupported,
    While,
)

KEYWORDS = {
    "def",
    "return",
    "if",
    "else",
    "while",
    "for",
    "in",
    "range",
    "with",
    "as",
    "True",
    "False",
}

# Recognized host-language keywords that are deliberately outside the grammar.
# Lines starting with one of these parse into an Unsupported node so the
# validator can reject them with a rule id instead of a hard parse failure.
FOREIGN_KEYWORDS = {
    "break",
    "continue",
    "pass",
    "import",
    "from",
    "class",
    "try",
    "raise",
    "assert",
    "del",
    "global",
    "nonlocal",
    "lambda",
    "yield",
    "elif",
    "not",
    "and",
    "or",
}

_NAME_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_NAME_CONT = _NAME_START | set("0123456789")
_DIGITS = set("0123456789")


@dataclass(slots=True)
class Tok:
    kind: str  # NAME KEYWORD NUMBER STRING OP NEWLINE INDENT DEDENT COMMENT EOF
    text: str
    line: int
    col: int


_TWO_CHAR_OPS = ("<=", ">=", "==")
_ONE_CHAR_OPS = set("+-*/<>()[]=,:")


def tokenize(src: str) -> list[Tok]:
    toks: list[Tok] = []
    indent_stack = [0]
    lines = src.split("\n")
    for lineno, raw in enumerate(lines, start=1):
        if "\t" in raw:
            raise ParseError("tab characters are not allowed", lineno)
        stripped = raw.strip()
        if not stripped:
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent > indent_stack[-1]:
            if indent != indent_stack[-1] + 4:
                raise ParseError(
                    f"indentation must step by exactly 4 spaces (got {indent})", lineno
                )
            indent_stack.append(indent)
            toks.append(Tok("INDENT", "", lineno, indent))
        elif indent < indent_stack[-1]:
            _emit_dedents(toks, indent_stack, indent, lineno)
            if indent != indent_stack[-1]:
                raise ParseError("unindent to a level that was never opened", lineno)
        if stripped.startswith("#"):
            text = stripped[1:]
            if text.startswith(" "):
                text = text[1:]
            toks.append(Tok("COMMENT", text, lineno, indent))
            toks.append(Tok("NEWLINE", "", lineno, len(raw)))
            continue
        _lex_line(raw, lineno, indent, toks)
        toks.append(Tok("NEWLINE", "", lineno, len(raw)))
    while len(indent_stack) > 1:
        indent_stack.pop()
        toks.append(Tok("DEDENT", "", len(lines), 0))
    toks.append(Tok("EOF", "", len(lines) + 1, 0))
    return toks


def _emit_dedents(toks, indent_stack, indent, lineno):
    while indent < indent_stack[-1]:
        indent_stack.pop()
        toks.append(Tok("DEDENT", "", lineno, indent))


def _lex_line(raw: str, lineno: int, start: int, toks: list[Tok]):
    i = start
    n = len(raw)
    while i < n:
        c = raw[i]
        if c == " ":
            i += 1
            continue
        if c == "#":
            raise ParseError("inline comments are not supported", lineno, i)
        if c in _NAME_START:
            j = i + 1
            while j < n and raw[j] in _NAME_CONT:
                j += 1
            word = raw[i:j]
            kind = "KEYWORD" if word in KEYWORDS else "NAME"
            toks.append(Tok(kind, word, lineno, i))
            i = j
            continue
        if c in _DIGITS or (c == "." and i + 1 < n and raw[i + 1] in _DIGITS):
            i = _lex_number(raw, i, lineno, toks)
            continue
        if c == "'":
            j = raw.find("'", i + 1)
            if j < 0:
                raise ParseError("unterminated string literal", lineno, i)
            body = raw[i + 1 : j]
            if "\\" in body:
                raise ParseError("escape sequences are not supported in strings", lineno, i)
            toks.append(Tok("STRING", body, lineno, i))
            i = j + 1
            continue
        two = raw[i : i + 2]
        if two in _TWO_CHAR_OPS:
            toks.append(Tok("OP", two, lineno, i))
            i += 2
            continue
        if c in _ONE_CHAR_OPS:
            toks.append(Tok("OP", c, lineno, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", lineno, i)


def _lex_number(raw: str, i: int, lineno: int, toks: list[Tok]) -> int:
    n = len(raw)
    j = i
    is_float = False
    while j < n and raw[j] in _DIGITS:
        j += 1
    if j < n and raw[j] == ".":
        is_float = True
        j += 1
        while j < n and raw[j] in _DIGITS:
            j += 1
    if j < n and raw[j] in "eE":
        k = j + 1
        if k < n and raw[k] in "+-":
            k += 1
        if k < n and raw[k] in _DIGITS:
            is_float = True
            j = k
            while j < n and raw[j] in _DIGITS:
                j += 1
    text = raw[i:j]
    toks.append(Tok("NUMBER", text, lineno, i))
    if j < n and raw[j] in _NAME_START:
        raise ParseError(f"malformed number {raw[i:j+1]!r}", lineno, i)
    # stash floatness in the token text; parser re-parses
    return j


class _Parser:
    def __init__(self, toks: list[Tok]):
        self.toks = toks
        self.pos = 0

    # -- token plumbing ---------------------------------------------------

    def peek(self) -> Tok:
        return self.toks[self.pos]

    def next(self) -> Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def at(self, kind: str, text: str | None = None) -> bool:
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def expect(self, kind: str, text: str | None = None) -> Tok:
        t = self.peek()
        if not self.at(kind, text):
            want = text or kind
            got = t.text or t.kind
            raise ParseError(f"expected {want!r}, got {got!r}", t.line, t.col)
        return self.next()

    def skip_newlines(self):
        while self.at("NEWLINE"):
            self.next()

    # -- grammar ----------------------------------------------------------

    def program(self) -> Program:
        functions: list[FunctionDef] = []
        pending_comments: list[str] = []
        self.skip_newlines()
        while not self.at("EOF"):
            if self.at("COMMENT"):
                pending_comments.append(self.next().text)
                self.skip_newlines()
                continue
            if self.at("KEYWORD", "def"):
                fn = self.function_def()
                if any(f.name == fn.name for f in functions):
                    raise ParseError(f"duplicate function name {fn.name!r}", fn.line)
                fn.leading_comments = pending_comments
                pending_comments = []
                functions.append(fn)
                self.skip_newlines()
                continue
            t = self.peek()
            raise ParseError(
                f"only function definitions and comments may appear at top level, got {t.text or t.kind!r}",
                t.line,
                t.col,
            )
        return Program(functions, trailing_comments=pending_comments)

    def function_def(self) -> FunctionDef:
        start = self.expect("KEYWORD", "def")
        name = self.expect("NAME").text
        self.expect("OP", "(")
        params: list[Param] = []
        seen_default = False
        while not self.at("OP", ")"):
            ptok = self.expect("NAME")
            default = None
            if self.at("OP", "="):
                self.next()
                default = self.atom_literal()
                seen_default = True
            elif seen_default:
                raise ParseError(
                    "parameter without default after parameter with default",
                    ptok.line,
                    ptok.col,
                )
            params.append(Param(ptok.text, default, line=ptok.line))
            if self.at("OP", ","):
                self.next()
            elif not self.at("OP", ")"):
                t = self.peek()
                raise ParseError("expected ',' or ')' in parameter list", t.line, t.col)
        self.expect("OP", ")")
        self.expect("OP", ":")
        self.expect("NEWLINE")
        body = self.block()
        if not body:
            raise ParseError(f"function {name!r} has an empty body", start.line)
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ParseError(f"duplicate parameter name in {name!r}", start.line)
        return FunctionDef(name, params, body, line=start.line)

    def block(self) -> list[Stmt]:
        self.expect("INDENT")
        stmts: list[Stmt] = []
        self.skip_newlines()
        while not self.at("DEDENT"):
            stmts.append(self.statement())
            self.skip_newlines()
        self.expect("DEDENT")
        return stmts

    def statement(self) -> Stmt:
        t = self.peek()
        if t.kind == "COMMENT":
            self.next()
            self.expect("NEWLINE")
            return Comment(t.text, line=t.line)
        if t.kind == "NAME" and t.text in FOREIGN_KEYWORDS:
            return self.unsupported_line()
        if t.kind == "KEYWORD":
            if t.text == "return":
                return self.return_stmt()
            if t.text == "if":
                return self.if_stmt()
            if t.text == "while":
                return self.while_stmt()
            if t.text == "for":
                return self.for_stmt()
            if t.text == "with":
                return self.with_stmt()
            if t.text == "def":
                raise ParseError("nested function definitions are not supported", t.line, t.col)
            raise ParseError(f"unexpected keyword {t.text!r}", t.line, t.col)
        return self.simple_stmt()

    def unsupported_line(self) -> Unsupported:
        t = self.peek()
        parts: list[str] = []
        while not self.at("NEWLINE"):
            tok = self.next()
            parts.append(tok.text if tok.kind != "STRING" else f"'{tok.text}'")
        self.expect("NEWLINE")
        # consume a block if one follows (e.g. try:)
        if self.at("INDENT"):
            depth = 0
            while True:
                tok = self.next()
                if tok.kind == "INDENT":
                    depth += 1
                elif tok.kind == "DEDENT":
                    depth -= 1
                    if depth == 0:
                        break
                elif tok.kind == "EOF":
                    break
        return Unsupported(" ".join(parts), line=t.line)

    def return_stmt(self) -> Return:
        t = self.expect("KEYWORD", "return")
        values = [self.expression()]
        while self.at("OP", ","):
            self.next()
            values.append(self.expression())
        self.expect("NEWLINE")
        return Return(values, line=t.line)

    def if_stmt(self) -> If:
        t = self.expect("KEYWORD", "if")
        test = self.expression()
        self.expect("OP", ":")
        self.expect("NEWLINE")
        body = self.block()
        orelse: list[Stmt] = []
        self.skip_newlines()
        if self.at("KEYWORD", "else"):
            self.next()
            self.expect("OP", ":")
            self.expect("NEWLINE")
            orelse = self.block()
        return If(test, body, orelse, line=t.line)

    def while_stmt(self) -> While:
        t = self.expect("KEYWORD", "while")
        test = self.expression()
        self.expect("OP", ":")
        self.expect("NEWLINE")
        return While(test, self.block(), line=t.line)

    def for_stmt(self) -> ForRange:
        t = self.expect("KEYWORD", "for")
        var = self.expect("NAME").text
        self.expect("KEYWORD", "in")
        self.expect("KEYWORD", "range")
        self.expect("OP", "(")
        count = self.expression()
        self.expect("OP", ")")
        self.expect("OP", ":")
        self.expect("NEWLINE")
        return ForRange(var, count, self.block(), line=t.line)

    def with_stmt(self) -> InsertGradOf:
        t = self.expect("KEYWORD", "with")
        fn = self.expect("NAME")
        if fn.text != "insert_grad_of":
            raise ParseError(
                f"only 'with insert_grad_of(...) as ...' is supported, got {fn.text!r}",
                fn.line,
                fn.col,
            )
        self.expect("OP", "(")
        var = self.expect("NAME").text
        self.expect("OP", ")")
        self.expect("KEYWORD", "as")
        alias = self.expect("NAME").text
        self.expect("OP", ":")
        self.expect("NEWLINE")
        return InsertGradOf(var, alias, self.block(), line=t.line)

    def simple_stmt(self) -> Stmt:
        t = self.peek()
        expr = self.expression()
        if self.at("OP", "="):
            self.next()
            value = self.expression()
            self.expect("NEWLINE")
            if isinstance(expr, Name):
                return Assign(expr.id, value, line=t.line)
            if isinstance(expr, Index):
                if not isinstance(expr.base, Name):
                    raise ParseError(
                        "subscript assignment target must be a variable", t.line, t.col
                    )
                return IndexAssign(expr.base.id, expr.index, value, line=t.line)
            raise ParseError("cannot assign to this expression", t.line, t.col)
        self.expect("NEWLINE")
        return ExprStmt(expr, line=t.line)

    # -- expressions (precedence: comparison < additive < multiplicative
    #    < unary < postfix) -----------------------------------------------

    def expression(self) -> Expr:
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        while self.at("OP") and self.peek().text in ("<", ">", "<=", ">=", "=="):
            op = self.next()
            right = self.additive()
            left = BinOp(op.text, left, right, line=op.line)
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while self.at("OP") and self.peek().text in ("+", "-"):
            op = self.next()
            right = self.multiplicative()
            left = BinOp(op.text, left, right, line=op.line)
        return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while self.at("OP") and self.peek().text in ("*", "/"):
            op = self.next()
            right = self.unary()
            left = BinOp(op.text, left, right, line=op.line)
        return left

    def unary(self) -> Expr:
        if self.at("OP", "-"):
            t = self.next()
            operand = self.unary()
            # fold a negated numeric literal so printing round-trips exactly
            if isinstance(operand, FloatLit):
                return FloatLit(-operand.value, line=t.line)
            if isinstance(operand, IntLit):
                return IntLit(-operand.value, line=t.line)
            return NegOp(operand, line=t.line)
        return self.postfix()

    def postfix(self) -> Expr:
        expr = self.primary()
        while True:
            if self.at("OP", "["):
                t = self.next()
                idx = self.expression()
                self.expect("OP", "]")
                expr = Index(expr, idx, line=t.line)
            elif self.at("OP", "(") and isinstance(expr, Name):
                t = self.next()
                args: list[Expr] = []
                while not self.at("OP", ")"):
                    args.append(self.expression())
                    if self.at("OP", ","):
                        self.next()
                    elif not self.at("OP", ")"):
                        tk = self.peek()
                        raise ParseError("expected ',' or ')' in call", tk.line, tk.col)
                self.expect("OP", ")")
                expr = Call(expr.id, args, line=t.line)
            else:
                return expr

    def primary(self) -> Expr:
        t = self.peek()
        if t.kind == "NUMBER":
            self.next()
            if "." in t.text or "e" in t.text or "E" in t.text:
                return FloatLit(float(t.text), line=t.line)
            return IntLit(int(t.text), line=t.line)
        if t.kind == "STRING":
            self.next()
            return StrLit(t.text, line=t.line)
        if t.kind == "KEYWORD" and t.text in ("True", "False"):
            self.next()
            return BoolLit(t.text == "True", line=t.line)
        if t.kind == "NAME":
            self.next()
            return Name(t.text, line=t.line)
        if t.kind == "OP" and t.text == "(":
            self.next()
            inner = self.expression()
            self.expect("OP", ")")
            return inner
        raise ParseError(f"expected an expression, got {t.text or t.kind!r}", t.line, t.col)

    def atom_literal(self) -> Expr:
        """Literals only: parameter defaults."""
        t = self.peek()
        neg = False
        if self.at("OP", "-"):
            self.next()
            neg = True
        tok = self.peek()
        if tok.kind == "NUMBER":
            e = self.primary()
            if neg:
                if isinstance(e, FloatLit):
                    e.value = -e.value
                else:
                    e.value = -e.value
            return e
        if tok.kind == "KEYWORD" and tok.text in ("True", "False") and not neg:
            return self.primary()
        raise ParseError("parameter default must be a numeric or boolean literal", t.line, t.col)


def parse(src: str) -> Program:
    """Parse source text into a Program. Raises ParseError with a line number."""
    return _Parser(tokenize(src)).program()
