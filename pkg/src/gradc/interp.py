"""Evaluator for the array language.

Each function compiles once into a tree of Python closures (one per statement
and expression), so repeated calls — the common case when a generated
derivative runs inside a training or benchmark loop — pay no per-iteration
dispatch on the syntax tree. Values are plain Python/NumPy objects; all
arithmetic and kernel behavior lives in `values`.

Semantics pinned here:
  - conditions must be Bool, loop counts must be Int (no truthiness),
  - `x[i] = v` mutates a dense array in place but rebinds a persistent-array
    variable to the new version,
  - `stack()` constructs a fresh tape (generated functions share one by
    passing it around); every tape built during a run is kept on
    `interp.tapes` so tests can assert they end up empty,
  - `with insert_grad_of(...)` blocks are skipped when run directly: they
    only contribute statements to generated derivative code,
  - functions that fall off the end return 0.0.

Set GRADC_TRACE=1 to print every executed statement with its result.
"""

from __future__ import annotations

import os
import sys

import numpy as np

from . import syntax as S
from .errors import EvalError
from .parray import PArray, pa_setitem
from .printer import stmt_summary
from .values import (
    BINOPS,
    BUILTINS,
    ZERO_TOLERANT,
    ZeroGrad,
    Tape,
    format_value,
    op_index,
    op_neg,
)

_RET = "return"


def _literal_value(e):
    if isinstance(e, S.FloatLit):
        return e.value
    if isinstance(e, S.IntLit):
        return e.value
    if isinstance(e, S.BoolLit):
        return e.value
    if isinstance(e, S.StrLit):
        return e.value
    raise EvalError("parameter defaults must be literals")


def _located(e: EvalError, where: str) -> EvalError:
    if not getattr(e, "located", False):
        e.located = True
        e.args = (f"{where}: {e}",)
    return e


class Interp:
    """Compiles and runs the functions of one Program."""

    def __init__(self, program: S.Program, trace: bool | None = None):
        self.program = program
        self._fns = {f.name: f for f in program.functions}
        self._compiled: dict[str, object] = {}
        self.tapes: list[Tape] = []
        if trace is None:
            trace = os.environ.get("GRADC_TRACE") == "1"
        self.trace = trace

    # -- public API --------------------------------------------------------

    def call(self, name: str, args: list):
        """Invoke a program function with already-evaluated argument values."""
        fn = self._get(name)
        with np.errstate(all="ignore"):
            return fn(list(args))

    # -- function compilation ----------------------------------------------

    def _get(self, name: str):
        c = self._compiled.get(name)
        if c is None:
            f = self._fns.get(name)
            if f is None:
                raise EvalError(f"unknown function '{name}'")
            c = self._compile_function(f)
            self._compiled[name] = c
        return c

    def _compile_function(self, f: S.FunctionDef):
        body = self._compile_block(f.body, f)
        names = [p.name for p in f.params]
        defaults = [None if p.default is None else _literal_value(p.default) for p in f.params]
        required = sum(1 for p in f.params if p.default is None)
        total = len(names)
        fname = f.name

        def run(args):
            if not required <= len(args) <= total:
                want = str(required) if required == total else f"{required}..{total}"
                raise EvalError(f"{fname}() takes {want} arguments, got {len(args)}")
            env = dict(zip(names, args))
            for k in range(len(args), total):
                env[names[k]] = defaults[k]
            sig = body(env)
            if sig is not None:
                return sig[1]
            return 0.0

        return run

    def _compile_block(self, stmts: list, f: S.FunctionDef):
        steps = []
        for s in stmts:
            if isinstance(s, (S.Comment, S.InsertGradOf)):
                continue
            steps.append(self._compile_stmt(s, f))
        if len(steps) == 1:
            return steps[0]

        def run(env, _steps=steps):
            for st in _steps:
                sig = st(env)
                if sig is not None:
                    return sig
            return None

        return run

    # -- statements ----------------------------------------------------------

    def _compile_stmt(self, s: S.Stmt, f: S.FunctionDef):
        where = f"line {s.line} in {f.name}"

        if isinstance(s, S.Assign):
            val = self._compile_expr(s.value, f)
            tgt = s.target

            def step(env):
                try:
                    env[tgt] = val(env)
                except EvalError as e:
                    raise _located(e, where)
                return None

        elif isinstance(s, S.IndexAssign):
            tgt = s.target
            idx = self._compile_expr(s.index, f)
            val = self._compile_expr(s.value, f)

            def step(env):
                try:
                    arr = env.get(tgt)
                    if arr is None:
                        raise EvalError(f"undefined variable '{tgt}'")
                    i = idx(env)
                    v = val(env)
                    if isinstance(arr, np.ndarray):
                        _store_row(arr, i, v)
                    elif isinstance(arr, PArray):
                        env[tgt] = pa_setitem(arr, i, v)
                    elif isinstance(arr, ZeroGrad) and _is_exact_zero(v):
                        # row-kill on a gradient that never materialized
                        pass
                    else:
                        raise EvalError(
                            f"cannot index-assign into {type(arr).__name__}"
                        )
                except EvalError as e:
                    raise _located(e, where)
                return None

        elif isinstance(s, S.Return):
            vals = [self._compile_expr(v, f) for v in s.values]
            if len(vals) == 1:
                v0 = vals[0]

                def step(env):
                    try:
                        return (_RET, v0(env))
                    except EvalError as e:
                        raise _located(e, where)

            else:

                def step(env):
                    try:
                        return (_RET, tuple(v(env) for v in vals))
                    except EvalError as e:
                        raise _located(e, where)

        elif isinstance(s, S.If):
            test = self._compile_expr(s.test, f)
            then = self._compile_block(s.body, f) if s.body else _noop
            other = self._compile_block(s.orelse, f) if s.orelse else _noop

            def step(env):
                try:
                    c = test(env)
                    if not isinstance(c, bool):
                        raise EvalError(
                            f"if condition must be a boolean, got {_tyname(c)}"
                        )
                except EvalError as e:
                    raise _located(e, where)
                return then(env) if c else other(env)

        elif isinstance(s, S.While):
            test = self._compile_expr(s.test, f)
            body = self._compile_block(s.body, f)

            def step(env):
                while True:
                    try:
                        c = test(env)
                        if not isinstance(c, bool):
                            raise EvalError(
                                f"while condition must be a boolean, got {_tyname(c)}"
                            )
                    except EvalError as e:
                        raise _located(e, where)
                    if not c:
                        return None
                    sig = body(env)
                    if sig is not None:
                        return sig

        elif isinstance(s, S.ForRange):
            count = self._compile_expr(s.count, f)
            body = self._compile_block(s.body, f)
            var = s.var

            def step(env):
                try:
                    n = count(env)
                    if not isinstance(n, int) or isinstance(n, bool):
                        raise EvalError(f"range() needs an integer, got {_tyname(n)}")
                except EvalError as e:
                    raise _located(e, where)
                for i in range(n):
                    env[var] = i
                    sig = body(env)
                    if sig is not None:
                        return sig
                return None

        elif isinstance(s, S.ExprStmt):
            val = self._compile_expr(s.value, f)

            def step(env):
                try:
                    val(env)
                except EvalError as e:
                    raise _located(e, where)
                return None

        elif isinstance(s, S.Unsupported):
            text = s.text

            def step(env):
                raise EvalError(f"{where}: unsupported statement: {text}")

        else:  # pragma: no cover - parser produces no other statement kinds
            raise EvalError(f"{where}: cannot execute {type(s).__name__}")

        if self.trace:
            return self._traced(step, s, f)
        return step

    def _traced(self, step, s: S.Stmt, f: S.FunctionDef):
        head = stmt_summary(s)
        tgt = s.target if isinstance(s, (S.Assign, S.IndexAssign)) else None

        def traced(env):
            sig = step(env)
            note = ""
            if sig is not None:
                note = f"  -> returns {format_value(sig[1])}"
            elif tgt is not None and tgt in env:
                note = f"  -> {tgt} = {format_value(env[tgt])}"
            print(f"[trace] {f.name}:{s.line}: {head}{note}", file=sys.stderr)
            return sig

        return traced

    # -- expressions ---------------------------------------------------------

    def _compile_expr(self, e: S.Expr, f: S.FunctionDef):
        if isinstance(e, (S.FloatLit, S.IntLit, S.BoolLit, S.StrLit)):
            v = e.value
            return lambda env: v

        if isinstance(e, S.Name):
            name = e.id

            def fetch(env):
                try:
                    return env[name]
                except KeyError:
                    raise EvalError(f"undefined variable '{name}'") from None

            return fetch

        if isinstance(e, S.BinOp):
            fn = BINOPS[e.op]
            lhs = self._compile_expr(e.left, f)
            rhs = self._compile_expr(e.right, f)
            return lambda env: fn(lhs(env), rhs(env))

        if isinstance(e, S.NegOp):
            operand = self._compile_expr(e.operand, f)
            return lambda env: op_neg(operand(env))

        if isinstance(e, S.Index):
            base = self._compile_expr(e.base, f)
            idx = self._compile_expr(e.index, f)
            return lambda env: op_index(base(env), idx(env))

        if isinstance(e, S.Call):
            return self._compile_call(e, f)

        raise EvalError(f"cannot evaluate {type(e).__name__}")  # pragma: no cover

    def _compile_call(self, e: S.Call, f: S.FunctionDef):
        name = e.func
        argfns = [self._compile_expr(a, f) for a in e.args]
        n = len(argfns)

        if name == "stack":
            if n:
                raise EvalError("stack() takes no arguments")

            def make_tape(env):
                t = Tape()
                self.tapes.append(t)
                return t

            return make_tape

        if name in self._fns:
            cell = []

            def call_user(env):
                if not cell:
                    cell.append(self._get(name))
                return cell[0]([a(env) for a in argfns])

            return call_user

        spec = BUILTINS.get(name)
        if spec is None:
            raise EvalError(f"unknown function '{name}'")
        mn, mx, fn = spec
        if n < mn or (mx is not None and n > mx):
            want = str(mn) if mx == mn else (f"{mn}+" if mx is None else f"{mn}..{mx}")
            raise EvalError(f"{name}() takes {want} arguments, got {n}")
        guard = name not in ZERO_TOLERANT

        if n == 1:
            a0 = argfns[0]

            def call1(env):
                x = a0(env)
                if guard and isinstance(x, ZeroGrad):
                    raise EvalError(f"{name}() received an uninstantiated zero gradient")
                return fn(x)

            return call1

        if n == 2:
            a0, a1 = argfns

            def call2(env):
                x = a0(env)
                y = a1(env)
                if guard and (isinstance(x, ZeroGrad) or isinstance(y, ZeroGrad)):
                    raise EvalError(f"{name}() received an uninstantiated zero gradient")
                return fn(x, y)

            return call2

        def call_n(env):
            args = [a(env) for a in argfns]
            if guard:
                for x in args:
                    if isinstance(x, ZeroGrad):
                        raise EvalError(
                            f"{name}() received an uninstantiated zero gradient"
                        )
            return fn(*args)

        return call_n


def _noop(env):
    return None


def _tyname(v) -> str:
    if isinstance(v, bool):
        return "a boolean"
    if isinstance(v, int):
        return "an integer"
    if isinstance(v, float):
        return "a float"
    if isinstance(v, np.ndarray):
        return "an array"
    if isinstance(v, ZeroGrad):
        return "a zero gradient"
    return type(v).__name__


def _is_exact_zero(v) -> bool:
    if isinstance(v, ZeroGrad):
        return True
    return isinstance(v, (float, int)) and not isinstance(v, bool) and float(v) == 0.0


def _store_row(arr: np.ndarray, i, v):
    if not isinstance(i, int) or isinstance(i, bool):
        raise EvalError("array index must be an integer")
    if isinstance(v, PArray):
        v = v.checkout()
    if isinstance(v, ZeroGrad):
        raise EvalError("cannot store an uninstantiated zero gradient into an array")
    if isinstance(v, bool) or not isinstance(v, (int, float, np.ndarray)):
        raise EvalError(f"cannot store {_tyname(v)} into an array")
    try:
        arr[i] = v
    except IndexError:
        raise EvalError(f"index {i} out of range for shape {arr.shape}") from None
    except ValueError as ex:
        raise EvalError(str(ex)) from None


def eval_program(program: S.Program, entry: str, args: list, trace: bool | None = None):
    """One-shot convenience: compile `program` and call `entry` on `args`."""
    return Interp(program, trace=trace).call(entry, args)
