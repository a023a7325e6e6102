"""Static checks that a program is runnable and differentiable.

The language deliberately excludes anything that would defeat static
dataflow analysis, and the validator is where those exclusions are enforced.
Rules:

  R1 (error)   A function that writes into a parameter with `x[i] = v` must
               also return that parameter, or the caller's copy of the
               derivative state would silently diverge from the value flow.
  R2 (error)   Every variable read must be a parameter or assigned somewhere
               in the same function: there are no closures or globals.
  R3 (error)   Every call target must resolve, at transform time, to a
               function in the program or a builtin, with a usable arity.
  R4 (error)   Syntax outside the supported subset: foreign statements
               (break/try/import/...), early or missing returns, assignment
               to a loop variable, returns or nesting inside
               `with insert_grad_of`, redefining a builtin.
  R5 (warning) A call whose result is discarded is assumed pure: the system
               will neither differentiate through it nor preserve any hidden
               mutation it performs.

`validate(program, entry)` checks the entry function and everything it
reaches through calls, and returns the diagnostics sorted by location.
"""

from __future__ import annotations

from . import syntax as S
from .errors import Diagnostic, TransformError
from .values import BUILTIN_NAMES, BUILTINS

__all__ = ["validate", "validate_entry"]


def validate(program: S.Program, entry: str, wrt: tuple[int, ...] = (0,)) -> list[Diagnostic]:
    if not program.has_function(entry):
        raise TransformError(f"unknown function {entry!r}")
    fn = program.function(entry)
    for i in wrt:
        if not 0 <= i < len(fn.params):
            raise TransformError(
                f"wrt index {i} out of range: {entry}() has {len(fn.params)} parameters"
            )

    diags: list[Diagnostic] = []
    seen: set[str] = set()
    queue = [entry]
    while queue:
        name = queue.pop()
        if name in seen:
            continue
        seen.add(name)
        f = program.function(name)
        _check_function(program, f, diags)
        for s in S.walk_stmts(f.body):
            for e in _stmt_exprs_deep(s):
                if isinstance(e, S.Call) and program.has_function(e.func):
                    if e.func not in seen:
                        queue.append(e.func)
    diags.sort(key=lambda d: (d.function != entry, d.function, d.line, d.rule))
    return diags


def validate_entry(program: S.Program, entry: str, wrt: tuple[int, ...] = (0,)) -> None:
    """Raise TransformError on the first validation error (warnings pass)."""
    diags = validate(program, entry, wrt)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise TransformError(str(errors[0]))


def _stmt_exprs_deep(s: S.Stmt):
    out = []
    stack = list(S.stmt_exprs(s))
    while stack:
        e = stack.pop()
        out.append(e)
        stack.extend(S.expr_children(e))
    return out


def _check_function(program: S.Program, f: S.FunctionDef, out: list[Diagnostic]):
    def err(rule, msg, line):
        out.append(Diagnostic("error", rule, msg, line, f.name))

    def warn(rule, msg, line):
        out.append(Diagnostic("warning", rule, msg, line, f.name))

    if f.name in BUILTIN_NAMES:
        err("R4", f"function {f.name!r} redefines a builtin", f.line)

    params = [p.name for p in f.params]
    bound = set(params)
    for s in S.walk_stmts(f.body):
        if isinstance(s, S.Assign):
            bound.add(s.target)
        elif isinstance(s, S.ForRange):
            bound.add(s.var)
        elif isinstance(s, S.InsertGradOf):
            bound.add(s.alias)

    # A rebound parameter no longer aliases the caller's value, so writing
    # into it is local. Flow-insensitive: any plain assignment anywhere in
    # the function lifts R1 for that parameter.
    rebound = {
        s.target
        for s in S.walk_stmts(f.body)
        if isinstance(s, S.Assign) and s.target in params
    }

    inplace_params: dict[str, int] = {}
    returned: list[str] = []

    for s in S.walk_stmts(f.body):
        if isinstance(s, S.Unsupported):
            err("R4", f"unsupported syntax: {s.text}", s.line)
            continue
        if isinstance(s, S.IndexAssign) and s.target in params and s.target not in rebound:
            inplace_params.setdefault(s.target, s.line)
        if isinstance(s, S.ForRange):
            for inner in S.walk_stmts(s.body):
                if isinstance(inner, S.Assign) and inner.target == s.var:
                    err("R4", f"assignment to loop variable {s.var!r}", inner.line)
                elif isinstance(inner, S.ForRange) and inner.var == s.var:
                    err("R4", f"loop variable {s.var!r} reused by an inner loop", inner.line)
        if isinstance(s, S.InsertGradOf):
            if s.var not in bound:
                err("R2", f"insert_grad_of target {s.var!r} is not a local variable", s.line)
            for inner in S.walk_stmts(s.body):
                if isinstance(inner, S.Return):
                    err("R4", "return inside an insert_grad_of block", inner.line)
                elif isinstance(inner, S.InsertGradOf):
                    err("R4", "insert_grad_of blocks cannot nest", inner.line)

        for e in _stmt_exprs_deep(s):
            if isinstance(e, S.Name) and e.id not in bound:
                err(
                    "R2",
                    f"free variable {e.id!r}: not a parameter or local "
                    "(closures are not supported)",
                    s.line,
                )
            elif isinstance(e, S.Call):
                _check_call(program, e, s.line, err)

        if isinstance(s, S.ExprStmt) and isinstance(s.value, S.Call):
            # push() exists only for its tape effect, so a discarded result is
            # its normal use; warning on it would flag every generated program.
            if s.value.func != "push":
                warn(
                    "R5",
                    f"result of {s.value.func}() is discarded; the call is "
                    "assumed not to mutate its arguments",
                    s.line,
                )

    for s in S.walk_stmts(f.body):
        if isinstance(s, S.Return):
            returned = [e.id for e in s.values if isinstance(e, S.Name)]

    _check_returns(f, err)

    for pname, line in inplace_params.items():
        if pname not in returned:
            err(
                "R1",
                f"{f.name}() writes into parameter {pname!r} in place "
                f"but does not return it",
                line,
            )


def _check_call(program: S.Program, e: S.Call, line: int, err):
    n = len(e.args)
    if program.has_function(e.func):
        fn = program.function(e.func)
        required = sum(1 for p in fn.params if p.default is None)
        total = len(fn.params)
        if not required <= n <= total:
            want = str(required) if required == total else f"{required}..{total}"
            err("R3", f"{e.func}() takes {want} arguments, got {n}", line)
        return
    spec = BUILTINS.get(e.func)
    if spec is None:
        err("R3", f"call to unresolvable function {e.func!r}", line)
        return
    mn, mx, _ = spec
    if n < mn or (mx is not None and n > mx):
        want = str(mn) if mx == mn else (f"{mn}+" if mx is None else f"{mn}..{mx}")
        err("R3", f"{e.func}() takes {want} arguments, got {n}", line)


def _check_returns(f: S.FunctionDef, err):
    """Exactly one return, as the final top-level statement."""
    top = [s for s in f.body if not isinstance(s, S.Comment)]
    tail_return = bool(top) and isinstance(top[-1], S.Return)
    count = sum(1 for s in S.walk_stmts(f.body) if isinstance(s, S.Return))
    if not tail_return:
        line = top[-1].line if top else f.line
        err("R4", f"{f.name}() must end with a return statement", line)
        if count:
            first = next(s for s in S.walk_stmts(f.body) if isinstance(s, S.Return))
            err("R4", "early returns are not supported", first.line)
    elif count > 1:
        first = next(s for s in S.walk_stmts(f.body) if isinstance(s, S.Return))
        err("R4", "early returns are not supported", first.line)
