"""Reverse-mode differentiation by source-to-source transformation.

Given a program, an entry function, and a tuple of parameter positions,
`transform_reverse` builds a new function that first evaluates the original
computation (the primal), saving every value it is about to destroy on a
tape, and then runs the computation backwards (the adjoint), accumulating
gradients statement by statement. The generated derivative is ordinary
source in the same language: it can be printed, parsed back, optimized,
executed, and differentiated again for higher-order derivatives.

Shape of a generated derivative for `def f(x): y = x * x; return y`:

    def dfdx(x, by=1.0):
        # Initialize the tape
        _stack = stack()
        y = 0.0
        # Beginning of forward pass
        push(_stack, y, '_00000001')
        y = x * x
        # Beginning of backward pass
        # Grad of: y = x * x
        y = pop(_stack, '_00000001')
        _bx = unbroadcast(by * x, x)
        _bx2 = unbroadcast(by * x, x)
        by = init_grad(y)
        bx = _bx
        bx = add_grad(bx, _bx2)
        return bx

Every adjoint block follows one statement order: output-value saves (when
the rule reads the output, e.g. tanh), the "# Grad of:" comment, tape pops
restoring the pre-statement state, per-use partial temporaries, the reset of
the output's gradient, and accumulations (the first write assigns directly,
later ones go through add_grad).

Control flow is reversed structurally: conditionals push the evaluated
condition and branch on the popped value backwards; loops count iterations,
push the count once after the loop, and replay the body's adjoint that many
times (for counted loops the loop variable is recomputed in reverse).

Calls to user functions on an active path are split: the callee is
transformed like any function, then divided into a primal half (runs the
forward pass, saves what its adjoint will need on the caller's tape) and an
adjoint half (takes the output gradient, returns gradients of the active
arguments). Both halves receive the tape as their first argument so the
caller and callee share one stack.

Tape discipline: `stack()` constructs a fresh tape per derivative call, each
push carries a deterministic per-function label, and each pop checks it, so
a transform bug that misaligns saves and restores fails loudly instead of
silently producing wrong numbers.
"""

from __future__ import annotations

from . import syntax as S
from .errors import TransformError
from .printer import stmt_summary
from .templates import (
    NONDIFF_BUILTINS,
    Template,
    TemplateSet,
    default_templates,
    subst_expr,
)
from .validate import validate_entry
from .values import BUILTIN_NAMES

__all__ = [
    "analyze_activity",
    "transform_reverse",
    "grad",
    "expand_template",
    "register_adjoint",
]

_ATOMS = (S.Name, S.FloatLit, S.IntLit, S.StrLit, S.BoolLit)

# Assignments of the form x = f(x, ...) for these builtins are undone by the
# inverse operation instead of saving the whole old array: setitem saves one
# row, append saves nothing (drop_last undoes it), drop_last saves the row it
# removed. This keeps tape memory proportional to what actually changed.
_SELF_INVERSE = ("setitem", "append", "drop_last")


# --------------------------------------------------------------------------
# Name management
# --------------------------------------------------------------------------


class _Names:
    """Deterministic fresh-name allocation for one generated function."""

    def __init__(self, taken):
        self.taken = set(taken)
        self._next = {}

    def take(self, name: str):
        self.taken.add(name)

    def fresh(self, base: str) -> str:
        if base not in self.taken:
            self.taken.add(base)
            return base
        n = self._next.get(base, 2)
        while f"{base}{n}" in self.taken:
            n += 1
        self._next[base] = n + 1
        name = f"{base}{n}"
        self.taken.add(name)
        return name


class _Labels:
    """Per-function tape label counter, rendered as 8 hex digits."""

    def __init__(self):
        self.n = 0

    def fresh(self) -> str:
        self.n += 1
        return "_%08x" % self.n


def _function_names(fn: S.FunctionDef) -> set[str]:
    names = {p.name for p in fn.params}
    for s in S.walk_stmts(fn.body):
        if isinstance(s, (S.Assign, S.IndexAssign)):
            names.add(s.target)
        elif isinstance(s, S.ForRange):
            names.add(s.var)
        elif isinstance(s, S.InsertGradOf):
            names.add(s.var)
            names.add(s.alias)
        for e in S.stmt_exprs(s):
            names |= S.expr_names(e)
    return names


# --------------------------------------------------------------------------
# Activity analysis
# --------------------------------------------------------------------------


def _diff_reads(e: S.Expr) -> set[str]:
    """Names read in value-carrying positions of `e` (comparisons and
    shape/tape queries carry no derivative; an index read carries only the
    base's)."""
    if isinstance(e, S.Name):
        return {e.id}
    if isinstance(e, S.BinOp):
        if e.op in S.COMPARISON_OPS:
            return set()
        return _diff_reads(e.left) | _diff_reads(e.right)
    if isinstance(e, S.NegOp):
        return _diff_reads(e.operand)
    if isinstance(e, S.Index):
        return _diff_reads(e.base)
    if isinstance(e, S.Call):
        if e.func in NONDIFF_BUILTINS:
            return set()
        out = set()
        for a in e.args:
            out |= _diff_reads(a)
        return out
    return set()


def _tape_pairs(stmts) -> dict[tuple[str, str], tuple[set[str], set[str]]]:
    """(tape name, label) -> (names pushed under it, pop targets). Used to
    thread dataflow through the tape when differentiating generated code.
    Keyed by tape as well as label: per-function label counters mean the
    same label string can legitimately appear on two different tapes."""
    pairs: dict[tuple[str, str], tuple[set[str], set[str]]] = {}
    for s in stmts:
        if isinstance(s, S.ExprStmt):
            tc = _tape_call(s.value)
            if tc and tc[0] == "push" and tc[2] is not None:
                ent = pairs.setdefault((tc[1], tc[2]), (set(), set()))
                ent[0].update(_diff_reads(s.value.args[1]))
        if isinstance(s, S.Assign):
            tc = _tape_call(s.value)
            if tc and tc[0] == "pop" and tc[2] is not None:
                ent = pairs.setdefault((tc[1], tc[2]), (set(), set()))
                ent[1].add(s.target)
    return pairs


def _tape_call(e: S.Expr):
    """(kind, tape_name, label) for push/pop calls with literal labels."""
    if not isinstance(e, S.Call) or e.func not in ("push", "pop"):
        return None
    if not e.args or not isinstance(e.args[0], S.Name):
        return None
    lbl = e.args[-1]
    return (e.func, e.args[0].id, lbl.value if isinstance(lbl, S.StrLit) else None)


def _activity(fn: S.FunctionDef, wrt_names: set[str]) -> set[str]:
    stmts = [s for s in S.walk_stmts(fn.body) if not isinstance(s, S.InsertGradOf)]
    pairs = _tape_pairs(stmts)

    # Tapes are data channels, not values: when differentiating generated
    # code, pushes and pops in sibling functions exchange data through a
    # shared tape argument. Track tape names and thread flow through them.
    tapes: set[str] = set()
    pushed_pairs: set[tuple[str, str]] = set()
    popped_pairs: set[tuple[str, str]] = set()
    for s in stmts:
        if isinstance(s, S.Assign) and isinstance(s.value, S.Call):
            if s.value.func == "stack":
                tapes.add(s.target)
        for e in (
            [s.value]
            if isinstance(s, (S.Assign, S.ExprStmt))
            else []
        ):
            tc = _tape_call(e)
            if tc:
                tapes.add(tc[1])
                if tc[2] is not None:
                    (pushed_pairs if tc[0] == "push" else popped_pairs).add(
                        (tc[1], tc[2])
                    )
    param_names = {p.name for p in fn.params}

    def is_user_call(e) -> bool:
        return isinstance(e, S.Call) and e.func not in BUILTIN_NAMES

    def unmatched_pop(e) -> bool:
        tc = _tape_call(e)
        return bool(tc) and tc[0] == "pop" and (tc[1], tc[2]) not in pushed_pairs

    # Forward: names reachable from the wrt parameters. A tape parameter may
    # already hold caller data derived from them, so it starts tainted.
    fwd = set(wrt_names) | (tapes & param_names)
    changed = True
    while changed:
        changed = False

        def add(names):
            nonlocal changed
            new = set(names) - fwd
            if new:
                fwd.update(new)
                changed = True

        for s in stmts:
            if isinstance(s, (S.Assign, S.IndexAssign)):
                rhs = s.value
                if isinstance(rhs, S.Call) and rhs.func == "pop":
                    if unmatched_pop(rhs) and _diff_reads(rhs) & fwd:
                        add({s.target})  # matched pops flow via label pairs
                elif _diff_reads(rhs) & fwd:
                    add({s.target})
                    if is_user_call(rhs):
                        add({a.id for a in rhs.args if isinstance(a, S.Name) and a.id in tapes})
            elif isinstance(s, S.ExprStmt):
                tc = _tape_call(s.value)
                if tc and tc[0] == "push" and _diff_reads(s.value.args[1]) & fwd:
                    add({tc[1]})
                elif is_user_call(s.value) and _diff_reads(s.value) & fwd:
                    add({a.id for a in s.value.args if isinstance(a, S.Name) and a.id in tapes})
        for vals, tgts in pairs.values():
            if vals & fwd and not tgts <= fwd:
                add(tgts)

    # Backward: names the outputs depend on. Pushes whose label never pops
    # here escape to the caller, so their payloads count as outputs.
    bwd = set()
    for s in stmts:
        if isinstance(s, S.Return):
            for e in s.values:
                bwd |= _diff_reads(e)
        elif isinstance(s, S.ExprStmt):
            tc = _tape_call(s.value)
            if tc and tc[0] == "push" and (tc[1], tc[2]) not in popped_pairs:
                bwd |= _diff_reads(s.value.args[1])
    changed = True
    while changed:
        changed = False

        def addb(names):
            nonlocal changed
            new = set(names) - bwd
            if new:
                bwd.update(new)
                changed = True

        for s in stmts:
            if isinstance(s, (S.Assign, S.IndexAssign)):
                rhs = s.value
                needed = s.target in bwd
                if is_user_call(rhs):
                    if needed or any(
                        isinstance(a, S.Name) and a.id in tapes and a.id in bwd
                        for a in rhs.args
                    ):
                        addb(_diff_reads(rhs))
                elif isinstance(rhs, S.Call) and rhs.func == "pop":
                    if needed and unmatched_pop(rhs):
                        addb(_diff_reads(rhs))  # the tape itself becomes needed
                elif needed:
                    addb(_diff_reads(rhs))
            elif isinstance(s, S.ExprStmt):
                tc = _tape_call(s.value)
                if tc and tc[0] == "push" and tc[1] in bwd:
                    addb(_diff_reads(s.value.args[1]))
                elif is_user_call(s.value) and any(
                    isinstance(a, S.Name) and a.id in tapes and a.id in bwd
                    for a in s.value.args
                ):
                    addb(_diff_reads(s.value))
        for vals, tgts in pairs.values():
            if tgts & bwd and not vals <= bwd:
                addb(vals)

    active = (fwd & bwd) - tapes
    for s in stmts:
        if isinstance(s, S.ForRange):
            active.discard(s.var)
    return active


def analyze_activity(program: S.Program, entry: str, wrt=(0,)) -> set[str]:
    """Set of active variable names in `entry`: those on some def-use chain
    from a wrt parameter to the returned value. A sound over-approximation;
    integer loop counters and tape handles are always excluded."""
    fn = program.function(entry)
    wrt_names = {fn.params[i].name for i in wrt}
    return _activity(fn, wrt_names)


# --------------------------------------------------------------------------
# Normalization: one operation per statement, atomic operands
# --------------------------------------------------------------------------


class _Anf:
    def __init__(self, names: _Names):
        self.names = names

    def block(self, stmts) -> list[S.Stmt]:
        out: list[S.Stmt] = []
        for s in stmts:
            self.stmt(s, out)
        return out

    def atom(self, e: S.Expr, out) -> S.Expr:
        if isinstance(e, _ATOMS):
            return e
        rhs = self.simple(e, out)
        t = self.names.fresh("_t")
        out.append(S.Assign(t, rhs, line=getattr(e, "line", 0), origin="anf"))
        return S.Name(t)

    def simple(self, e: S.Expr, out) -> S.Expr:
        if isinstance(e, _ATOMS):
            return e
        if isinstance(e, S.BinOp):
            return S.BinOp(e.op, self.atom(e.left, out), self.atom(e.right, out), line=e.line)
        if isinstance(e, S.NegOp):
            return S.NegOp(self.atom(e.operand, out), line=e.line)
        if isinstance(e, S.Index):
            return S.Index(self.atom(e.base, out), self.atom(e.index, out), line=e.line)
        if isinstance(e, S.Call):
            return S.Call(e.func, [self.atom(a, out) for a in e.args], line=e.line)
        raise TransformError(f"cannot differentiate through {type(e).__name__}")

    def stmt(self, s: S.Stmt, out):
        if isinstance(s, S.Assign):
            rhs = self.simple(S.clone(s.value), out)
            out.append(S.Assign(s.target, rhs, line=s.line, origin=s.origin))
        elif isinstance(s, S.IndexAssign):
            idx = self.atom(S.clone(s.index), out)
            val = self.atom(S.clone(s.value), out)
            out.append(S.IndexAssign(s.target, idx, val, line=s.line, origin=s.origin))
        elif isinstance(s, S.Return):
            vals = []
            for v in s.values:
                v = S.clone(v)
                if isinstance(v, S.Name):
                    vals.append(v)
                else:
                    # Bind anonymous return values to a variable so the seed
                    # gradient has something to attach to.
                    rhs = v if isinstance(v, _ATOMS) else self.simple(v, out)
                    t = self.names.fresh("_return")
                    out.append(S.Assign(t, rhs, line=s.line, origin="anf"))
                    vals.append(S.Name(t))
            out.append(S.Return(vals, line=s.line))
        elif isinstance(s, S.If):
            # Conditions stay verbatim: comparisons carry no derivative, so
            # nothing inside a test ever needs an adjoint.
            out.append(S.If(S.clone(s.test), self.block(s.body), self.block(s.orelse), line=s.line))
        elif isinstance(s, S.While):
            out.append(S.While(S.clone(s.test), self.block(s.body), line=s.line))
        elif isinstance(s, S.ForRange):
            out.append(S.ForRange(s.var, S.clone(s.count), self.block(s.body), line=s.line))
        elif isinstance(s, (S.ExprStmt, S.Comment, S.InsertGradOf)):
            out.append(S.clone(s))
        else:
            raise TransformError(f"unsupported statement {type(s).__name__}")


# --------------------------------------------------------------------------
# Small tree utilities
# --------------------------------------------------------------------------


def _rename_in_expr(e: S.Expr, mapping: dict[str, str]):
    if isinstance(e, S.Name):
        if e.id in mapping:
            e.id = mapping[e.id]
    elif isinstance(e, S.BinOp):
        _rename_in_expr(e.left, mapping)
        _rename_in_expr(e.right, mapping)
    elif isinstance(e, S.NegOp):
        _rename_in_expr(e.operand, mapping)
    elif isinstance(e, S.Index):
        _rename_in_expr(e.base, mapping)
        _rename_in_expr(e.index, mapping)
    elif isinstance(e, S.Call):
        for a in e.args:
            _rename_in_expr(a, mapping)


def _rename_in_stmt(s: S.Stmt, mapping: dict[str, str]):
    if isinstance(s, S.Assign):
        if s.target in mapping:
            s.target = mapping[s.target]
        _rename_in_expr(s.value, mapping)
    elif isinstance(s, S.IndexAssign):
        if s.target in mapping:
            s.target = mapping[s.target]
        _rename_in_expr(s.index, mapping)
        _rename_in_expr(s.value, mapping)
    elif isinstance(s, S.Return):
        for v in s.values:
            _rename_in_expr(v, mapping)
    elif isinstance(s, S.If):
        _rename_in_expr(s.test, mapping)
        for st in s.body:
            _rename_in_stmt(st, mapping)
        for st in s.orelse:
            _rename_in_stmt(st, mapping)
    elif isinstance(s, S.While):
        _rename_in_expr(s.test, mapping)
        for st in s.body:
            _rename_in_stmt(st, mapping)
    elif isinstance(s, S.ForRange):
        if s.var in mapping:
            s.var = mapping[s.var]
        _rename_in_expr(s.count, mapping)
        for st in s.body:
            _rename_in_stmt(st, mapping)
    elif isinstance(s, S.ExprStmt):
        _rename_in_expr(s.value, mapping)


def _tag(s: S.Stmt, origin: str, block: int):
    s.origin = origin
    s.block = block
    for blkstmts in S.stmt_blocks(s):
        for st in blkstmts:
            _tag(st, origin, block)


def _mark(stmts, origin: str, block: int):
    for s in stmts:
        if not s.origin:
            s.origin = origin
        if s.block < 0:
            s.block = block
    return stmts


def _assigns_name(stmts, name: str) -> bool:
    for s in stmts:
        for st in S.walk_stmts([s] if not isinstance(s, list) else s):
            if isinstance(st, (S.Assign, S.IndexAssign)) and st.target == name:
                return True
    return False


def _free_reads(stmts, defined: set[str]) -> set[str]:
    """Names read before any definite (top-level, in-order) assignment.
    Nested blocks are scanned with a copy of the defined set: their
    assignments are not guaranteed to run, so they never define."""
    free: set[str] = set()

    def walk(body, defined):
        for s in body:
            if isinstance(s, S.Assign):
                free.update(S.expr_names(s.value) - defined)
                defined.add(s.target)
            elif isinstance(s, S.IndexAssign):
                free.update(({s.target} | S.expr_names(s.index) | S.expr_names(s.value)) - defined)
            elif isinstance(s, S.Return):
                for v in s.values:
                    free.update(S.expr_names(v) - defined)
            elif isinstance(s, S.If):
                free.update(S.expr_names(s.test) - defined)
                walk(s.body, set(defined))
                walk(s.orelse, set(defined))
            elif isinstance(s, S.While):
                free.update(S.expr_names(s.test) - defined)
                walk(s.body, set(defined))
            elif isinstance(s, S.ForRange):
                free.update(S.expr_names(s.count) - defined)
                walk(s.body, set(defined) | {s.var})
            elif isinstance(s, S.ExprStmt):
                free.update(S.expr_names(s.value) - defined)

    walk(stmts, set(defined))
    return free


def _calls_in_expr(e: S.Expr, out: set[str]):
    if isinstance(e, S.Call):
        out.add(e.func)
    for c in S.expr_children(e):
        _calls_in_expr(c, out)


def _called_functions(fn: S.FunctionDef) -> set[str]:
    out: set[str] = set()
    for s in S.walk_stmts(fn.body):
        for e in S.stmt_exprs(s):
            _calls_in_expr(e, out)
    return out


# --------------------------------------------------------------------------
# Per-function transformation
# --------------------------------------------------------------------------


class _FuncTransform:
    """Transforms one function: a primal walk that emits forward statements
    and tape saves, then an adjoint walk over the same statements in reverse
    emitting gradient blocks. The results are assembled either into a single
    derivative function (entry point) or into a primal/adjoint pair (call
    splicing)."""

    def __init__(self, rt: "_Reverse", fn: S.FunctionDef, wrt: list[int]):
        self.rt = rt
        self.templates = rt.templates
        self.src_name = fn.name
        src = S.clone(fn)
        self.params = src.params

        # An empty wrt is legal for internal splices only: the adjoint then
        # returns gradient solely through the tape.
        if len(wrt) > len(self.params) or len(set(wrt)) != len(wrt):
            raise TransformError(
                f"invalid wrt parameter positions {tuple(wrt)} for {fn.name!r}"
            )
        for i in wrt:
            if not (0 <= i < len(self.params)):
                raise TransformError(
                    f"wrt position {i} out of range for {fn.name!r} "
                    f"({len(self.params)} parameters)"
                )
        self.wrt_names = [self.params[i].name for i in wrt]

        self.names = _Names(_function_names(src) | set(BUILTIN_NAMES))
        self.labels = _Labels()
        self.stackname = self.names.fresh("_stack")

        body = _Anf(self.names).block(src.body)
        if not body or not isinstance(body[-1], S.Return):
            raise TransformError(
                f"{fn.name!r} must end with a return statement to be differentiated"
            )
        ret = body.pop()
        if len(ret.values) != 1:
            raise TransformError(
                f"{fn.name!r} returns {len(ret.values)} values; reverse mode "
                "differentiates functions returning exactly one"
            )
        self.body = body
        self.retname = ret.values[0].id

        probe = S.FunctionDef(src.name, self.params, self.body + [ret])
        self.active = _activity(probe, set(self.wrt_names))

        # Activity of input tape pairs (present when differentiating
        # generated code): both ends of a label agree on whether the pushed
        # value carries derivative. Labels whose partner lives in another
        # function get no entry here and default to active, so both sides
        # emit their reversal half and the tape stays balanced.
        all_stmts = list(S.walk_stmts(self.body))
        pushed_here: set[tuple[str, str]] = set()
        popped_here: set[tuple[str, str]] = set()
        for st in all_stmts:
            for e in [st.value] if isinstance(st, (S.Assign, S.ExprStmt)) else []:
                tc = _tape_call(e)
                if tc and tc[2] is not None:
                    (pushed_here if tc[0] == "push" else popped_here).add(
                        (tc[1], tc[2])
                    )
        self.pair_active = {
            key: bool((vals | tgts) & self.active)
            for key, (vals, tgts) in _tape_pairs(all_stmts).items()
            if key in pushed_here and key in popped_here
        }

        # Tape handles in the input function (used to recognize calls whose
        # derivative flows through a shared tape rather than any argument).
        self.fn_tapes: set[str] = set()
        for st in S.walk_stmts(self.body):
            if isinstance(st, S.Assign) and isinstance(st.value, S.Call):
                if st.value.func == "stack":
                    self.fn_tapes.add(st.target)
                tc = _tape_call(st.value)
                if tc:
                    self.fn_tapes.add(tc[1])
            elif isinstance(st, S.ExprStmt):
                tc = _tape_call(st.value)
                if tc:
                    self.fn_tapes.add(tc[1])

        self.grads: dict[str, str] = {}
        self.placeholder: list[str] = []
        self.needs_init: list[str] = []
        self.ew: set[str] = set()
        self.guar: set[str] = set()
        self.stmt_labels: dict[int, dict] = {}
        self.blocks = 0
        self.seed_killed = False

        self.grad(self.retname)  # reserve the seed name first

    # -- gradient name bookkeeping ------------------------------------

    def grad(self, v: str) -> str:
        g = self.grads.get(v)
        if g is None:
            g = "b" + v
            while g in self.names.taken:
                g += "_"
            self.names.take(g)
            self.grads[v] = g
        return g

    def read_grad(self, v: str) -> str:
        """Gradient name of v, guaranteed readable: if no write is certain
        to have happened yet, a zero initialization is added to the start of
        the backward section."""
        g = self.grad(v)
        if v not in self.guar:
            if v not in self.needs_init:
                self.needs_init.append(v)
            self.guar.add(v)
        return g

    def next_block(self) -> int:
        self.blocks += 1
        return self.blocks

    # -- small emitters -------------------------------------------------

    def push_stmt(self, value: S.Expr, label: str) -> S.Stmt:
        return S.ExprStmt(
            S.Call("push", [S.Name(self.stackname), value, S.StrLit(label)]),
            origin="aux",
        )

    def pop_expr(self, label: str) -> S.Expr:
        return S.Call("pop", [S.Name(self.stackname), S.StrLit(label)])

    def _placeholder(self, v: str):
        if v not in self.placeholder:
            self.placeholder.append(v)

    def _filler(self) -> S.Stmt:
        # Keeps a generated branch non-empty (the language has no `pass`).
        return S.Assign(self.names.fresh("_nop"), S.FloatLit(0.0), origin="aux")

    def _self_inverse_mode(self, s: S.Assign) -> str | None:
        rhs = s.value
        if (
            isinstance(rhs, S.Call)
            and rhs.func in _SELF_INVERSE
            and rhs.args
            and isinstance(rhs.args[0], S.Name)
            and rhs.args[0].id == s.target
        ):
            return rhs.func
        return None

    def _call_splice(self, s: S.Stmt, call: S.Call):
        J = [
            k
            for k, a in enumerate(call.args)
            if isinstance(a, S.Name) and a.id in self.active
        ]
        if not J and not any(
            isinstance(a, S.Name) and a.id in self.fn_tapes for a in call.args
        ):
            return None
        lbls = self.stmt_labels.setdefault(id(s), {})
        if "splice" not in lbls:
            lbls["splice"] = self.rt.get_splice(call.func, J)
        return lbls["splice"]

    def _splice_info(self, s: S.Assign):
        """(pri_name, adj_name, J, extra_labels) when s is an active call to
        a user function, else None. J may be empty: a call reading a shared
        tape can produce an active result from tape contents alone, and its
        adjoint then exists purely to route gradient back through the tape."""
        rhs = s.value
        if not isinstance(rhs, S.Call) or not self.rt.program.has_function(rhs.func):
            return None
        if s.target not in self.active:
            return None
        return self._call_splice(s, rhs)

    def _expr_splice_info(self, s: S.ExprStmt):
        """Splice info for a call in statement position. The result is
        discarded, so the only way such a call can matter backward is by
        moving values through a shared tape; calls without a tape argument
        stay verbatim."""
        v = s.value
        if not isinstance(v, S.Call) or not self.rt.program.has_function(v.func):
            return None
        if not any(isinstance(a, S.Name) and a.id in self.fn_tapes for a in v.args):
            return None
        return self._call_splice(s, v)

    # -- primal walk ------------------------------------------------------

    def primal_block(self, stmts, defined: set[str]):
        out: list[S.Stmt] = []
        for s in stmts:
            defined = self.primal_stmt(s, out, defined)
        return out, defined

    def primal_stmt(self, s: S.Stmt, out, defined: set[str]) -> set[str]:
        if isinstance(s, S.Comment):
            out.append(S.clone(s))
            return defined
        if isinstance(s, S.InsertGradOf):
            return defined  # contributes only to the backward pass

        if isinstance(s, S.Assign):
            lbls = self.stmt_labels.setdefault(id(s), {})
            mode = self._self_inverse_mode(s)
            if mode == "setitem":
                lbl = self.labels.fresh()
                lbls["target"] = lbl
                out.append(
                    self.push_stmt(
                        S.Index(S.Name(s.target), S.clone(s.value.args[1])), lbl
                    )
                )
            elif mode == "drop_last":
                lbl = self.labels.fresh()
                lbls["target"] = lbl
                out.append(self.push_stmt(S.Index(S.Name(s.target), S.IntLit(-1)), lbl))
            elif mode == "append":
                pass  # dropping the appended row restores the old array
            else:
                lbl = self.labels.fresh()
                lbls["target"] = lbl
                if s.target not in defined:
                    self._placeholder(s.target)
                    defined = defined | {s.target}
                out.append(self.push_stmt(S.Name(s.target), lbl))
            sp = self._splice_info(s)
            if sp is not None:
                pri_name = sp[0]
                args = [S.Name(self.stackname)] + [S.clone(a) for a in s.value.args]
                out.append(
                    S.Assign(s.target, S.Call(pri_name, args), line=s.line, origin=s.origin)
                )
            else:
                out.append(S.clone(s))
            return defined | {s.target}

        if isinstance(s, S.IndexAssign):
            lbl = self.labels.fresh()
            self.stmt_labels.setdefault(id(s), {})["row"] = lbl
            out.append(self.push_stmt(S.Index(S.Name(s.target), S.clone(s.index)), lbl))
            out.append(S.clone(s))
            return defined | {s.target}

        if isinstance(s, S.If):
            c = self.names.fresh("_c")
            out.append(S.Assign(c, S.clone(s.test), line=s.line, origin="aux"))
            defined = defined | {c}
            body, d1 = self.primal_block(s.body, set(defined))
            orelse, d2 = self.primal_block(s.orelse, set(defined))
            if not body:
                body = [self._filler()]
            out.append(S.If(S.Name(c), body, orelse, line=s.line, origin="aux"))
            lbl = self.labels.fresh()
            self.stmt_labels.setdefault(id(s), {})["cond"] = lbl
            out.append(self.push_stmt(S.Name(c), lbl))
            return d1 & d2

        if isinstance(s, S.While):
            cnt = self.names.fresh("_cnt")
            out.append(S.Assign(cnt, S.IntLit(0), line=s.line, origin="aux"))
            body, _ = self.primal_block(s.body, set(defined))
            body.append(S.Assign(cnt, S.BinOp("+", S.Name(cnt), S.IntLit(1)), origin="aux"))
            out.append(S.While(S.clone(s.test), body, line=s.line, origin="aux"))
            lbl = self.labels.fresh()
            self.stmt_labels.setdefault(id(s), {})["count"] = lbl
            out.append(self.push_stmt(S.Name(cnt), lbl))
            return defined | {cnt}

        if isinstance(s, S.ForRange):
            lbls = self.stmt_labels.setdefault(id(s), {})
            vlbl = self.labels.fresh()
            lbls["var"] = vlbl
            if s.var not in defined:
                self._placeholder(s.var)
                defined = defined | {s.var}
            out.append(self.push_stmt(S.Name(s.var), vlbl))
            # The count is captured in a fresh variable: the range is
            # evaluated once, even if the body overwrites its inputs.
            cnt = self.names.fresh("_cnt")
            out.append(S.Assign(cnt, S.clone(s.count), line=s.line, origin="aux"))
            body, _ = self.primal_block(s.body, set(defined) | {s.var})
            if not body:
                body = [self._filler()]
            out.append(S.ForRange(s.var, S.Name(cnt), body, line=s.line, origin="aux"))
            clbl = self.labels.fresh()
            lbls["count"] = clbl
            out.append(self.push_stmt(S.Name(cnt), clbl))
            return defined | {cnt}

        if isinstance(s, S.ExprStmt):
            sp = self._expr_splice_info(s)
            if sp is not None:
                args = [S.Name(self.stackname)] + [S.clone(a) for a in s.value.args]
                out.append(
                    S.ExprStmt(S.Call(sp[0], args), line=s.line, origin=s.origin)
                )
            else:
                out.append(S.clone(s))
            return defined

        if isinstance(s, S.Return):
            raise TransformError(
                f"unexpected return inside {self.src_name!r} (only a single "
                "final return is supported)"
            )
        raise TransformError(f"unsupported statement {type(s).__name__}")

    # -- adjoint walk ------------------------------------------------------

    def adjoint_block(self, stmts, nested: bool):
        out: list[S.Stmt] = []
        for s in reversed(stmts):
            self.adjoint_stmt(s, out, nested)
        return out

    def _accumulate(self, v: str, value: S.Expr, parts, nested: bool, blk: int):
        """Fold a partial into v's gradient: first certain write assigns
        directly, anything later (or conditional) goes through add_grad."""
        g = self.grad(v)
        if not nested and v not in self.ew:
            parts.append(S.Assign(g, value, origin="grad", block=blk))
        else:
            self.read_grad(v)
            parts.append(
                S.Assign(g, S.Call("add_grad", [S.Name(g), value]), origin="grad", block=blk)
            )
        self.ew.add(v)
        if not nested:
            self.guar.add(v)

    def _reset(self, v: str, parts, blk: int):
        g = self.grad(v)
        parts.append(
            S.Assign(g, S.Call("init_grad", [S.Name(v)]), origin="grad", block=blk)
        )
        self.ew.discard(v)
        self.guar.add(v)
        if v == self.retname:
            pass  # the seed itself may be reset and later re-accumulated

    def adjoint_stmt(self, s: S.Stmt, out, nested: bool):
        if isinstance(s, S.Comment):
            return
        if isinstance(s, S.InsertGradOf):
            self.lower_insert_grad_of(s, out)
            return
        if isinstance(s, S.Assign):
            self._adjoint_assign(s, out, nested)
            return
        if isinstance(s, S.IndexAssign):
            self._adjoint_index_assign(s, out, nested)
            return
        if isinstance(s, S.If):
            lbl = self.stmt_labels[id(s)]["cond"]
            c = self.names.fresh("_c")
            out.append(S.Assign(c, self.pop_expr(lbl), origin="aux"))
            g0 = set(self.guar)
            body = self.adjoint_block(s.body, True)
            self.guar = set(g0)
            orelse = self.adjoint_block(s.orelse, True)
            self.guar = g0
            if body or orelse:
                if not body:
                    body = [self._filler()]
                out.append(S.If(S.Name(c), body, orelse, origin="aux"))
            return
        if isinstance(s, S.While):
            lbl = self.stmt_labels[id(s)]["count"]
            cnt = self.names.fresh("_cnt")
            out.append(S.Assign(cnt, self.pop_expr(lbl), origin="aux"))
            g0 = set(self.guar)
            body = self.adjoint_block(s.body, True)
            self.guar = g0
            if body:
                j = self.names.fresh("_j")
                out.append(S.ForRange(j, S.Name(cnt), body, origin="aux"))
            return
        if isinstance(s, S.ForRange):
            lbls = self.stmt_labels[id(s)]
            cnt = self.names.fresh("_cnt")
            out.append(S.Assign(cnt, self.pop_expr(lbls["count"]), origin="aux"))
            g0 = set(self.guar)
            body = self.adjoint_block(s.body, True)
            self.guar = g0
            if body:
                j = self.names.fresh("_j")
                recompute = S.Assign(
                    s.var,
                    S.BinOp("-", S.BinOp("-", S.Name(cnt), S.IntLit(1)), S.Name(j)),
                    origin="aux",
                )
                out.append(S.ForRange(j, S.Name(cnt), [recompute] + body, origin="aux"))
            out.append(S.Assign(s.var, self.pop_expr(lbls["var"]), origin="aux"))
            return
        if isinstance(s, S.ExprStmt):
            self._adjoint_expr_stmt(s, out, nested)
            return
        if isinstance(s, S.Return):
            raise TransformError(
                f"unexpected return inside {self.src_name!r} (only a single "
                "final return is supported)"
            )
        raise TransformError(f"unsupported statement {type(s).__name__}")

    # -- insert_grad_of ---------------------------------------------------

    def lower_insert_grad_of(self, s: S.InsertGradOf, out):
        if s.var not in self.active:
            raise TransformError(
                f"insert_grad_of({s.var!r}) in {self.src_name!r}: {s.var!r} has "
                "no gradient here (it is not on a path from the differentiated "
                "parameters to the return value)"
            )
        bname = self.read_grad(s.var)
        blk = self.next_block()
        out.append(S.Comment("Inserted code", origin="insert", block=blk))
        wrote = False
        for st in s.body:
            st2 = S.clone(st)
            _rename_in_stmt(st2, {s.alias: bname})
            _tag(st2, "insert", blk)
            out.append(st2)
            if _assigns_name([st2], bname):
                wrote = True
        if wrote:
            self.ew.add(s.var)

    # -- expression statements (prints, inactive calls, tape plumbing) ---

    def _adjoint_expr_stmt(self, s: S.ExprStmt, out, nested: bool):
        v = s.value
        if isinstance(v, S.Call) and v.func == "pop":
            raise TransformError(
                "a pop(...) whose result is discarded cannot be differentiated "
                "(its value is needed to balance the tape)"
            )
        if not (
            isinstance(v, S.Call)
            and v.func == "push"
            and len(v.args) == 3
            and isinstance(v.args[2], S.StrLit)
        ):
            sp = self._expr_splice_info(s)
            if sp is not None:
                # A discarded call spliced for its tape effects. Its result
                # never fed anything, so the adjoint seed is an exact zero;
                # real gradient arrives through the tape's reversal entries.
                _pri_name, adj_name, J, extra = sp
                blk = self.next_block()
                parts: list[S.Stmt] = [
                    S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk)
                ]
                seed = S.Call("init_grad", [S.FloatLit(0.0)])
                argnames = [v.args[k].id for k in J]
                temps = [self.names.fresh("_b" + an) for an in argnames]
                call = S.Call(adj_name, [S.Name(self.stackname), seed])
                if temps:
                    parts.append(S.Assign(temps[0], call, origin="grad", block=blk))
                else:
                    parts.append(S.ExprStmt(call, origin="grad", block=blk))
                for tmp, lbl in zip(reversed(temps[1:]), reversed(extra)):
                    parts.append(
                        S.Assign(tmp, self.pop_expr(lbl), origin="grad", block=blk)
                    )
                for an, tmp in zip(argnames, temps):
                    self._accumulate(an, S.Name(tmp), parts, nested, blk)
                out.extend(parts)
            return  # prints and tape-free discarded calls contribute nothing
        # Reversing a push from differentiated generated code: the matching
        # pop's adjoint pushed the gradient of the popped value under the
        # reversal label; collect it here and route it to the pushed value.
        # Reversal entries ride the tape the input statement itself uses
        # (balanced and empty again by this point), never the transform's
        # own save stack, whose LIFO order they would break.
        base = v.args[2].value
        tape = v.args[0].id if isinstance(v.args[0], S.Name) else None
        if not self.pair_active.get((tape, base), True):
            return
        if isinstance(v.args[1], S.Name) and v.args[1].id in self.fn_tapes:
            # A saved tape handle carries no gradient of its own (its
            # contents are reversed entry by entry); the pop site skips the
            # reversal entry for it too.
            return
        val = v.args[1]
        blk = self.next_block()
        parts = [S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk)]
        rpop = S.Call("pop", [S.clone(v.args[0]), S.StrLit(base + "__r")])
        if isinstance(val, S.Name) and val.id in self.active:
            tmp = self.names.fresh("_b" + val.id)
            parts.append(S.Assign(tmp, rpop, origin="grad", block=blk))
            self._accumulate(val.id, S.Name(tmp), parts, nested, blk)
        elif (
            isinstance(val, S.Index)
            and isinstance(val.base, S.Name)
            and val.base.id in self.active
        ):
            x = val.base.id
            tmp = self.names.fresh("_brow")
            parts.append(S.Assign(tmp, rpop, origin="grad", block=blk))
            if nested or x in self.ew:
                dx: S.Expr = S.Name(self.read_grad(x))
            else:
                dx = S.Call("init_grad", [S.Name(x)])
            g = self.grad(x)
            parts.append(
                S.Assign(
                    g,
                    S.Call("scatter_add", [dx, S.clone(val.index), S.Name(tmp), S.Name(x)]),
                    origin="grad",
                    block=blk,
                )
            )
            self.ew.add(x)
            if not nested:
                self.guar.add(x)
        else:
            # The reversal entry must still come off the tape even when the
            # gradient has nowhere to go.
            tmp = self.names.fresh("_unused")
            parts.append(S.Assign(tmp, rpop, origin="grad", block=blk))
        out.extend(parts)

    # -- x[i] = v ----------------------------------------------------------

    def _adjoint_index_assign(self, s: S.IndexAssign, out, nested: bool):
        lbl = self.stmt_labels[id(s)]["row"]
        restore = S.IndexAssign(s.target, S.clone(s.index), self.pop_expr(lbl))
        if s.target not in self.active:
            restore.origin = "aux"
            out.append(restore)
            return
        blk = self.next_block()
        restore.origin = "grad"
        restore.block = blk
        parts = [
            S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk),
            restore,
        ]
        bx = self.read_grad(s.target)
        if self.grads.get(self.retname) == bx:
            self.seed_killed = True
        acc = None
        if isinstance(s.value, S.Name) and s.value.id in self.active:
            tmp = self.names.fresh("_b" + s.value.id)
            parts.append(
                S.Assign(
                    tmp,
                    S.Call(
                        "unbroadcast",
                        [S.Index(S.Name(bx), S.clone(s.index)), S.clone(s.value)],
                    ),
                    origin="grad",
                    block=blk,
                )
            )
            acc = (s.value.id, tmp)
        # The overwritten row's gradient belongs to the overwriting value;
        # zero it so earlier writers of this row do not also receive it.
        parts.append(
            S.IndexAssign(bx, S.clone(s.index), S.FloatLit(0.0), origin="grad", block=blk)
        )
        if acc is not None:
            self._accumulate(acc[0], S.Name(acc[1]), parts, nested, blk)
        out.extend(parts)

    # -- assignments --------------------------------------------------------

    def _rhs_template_key(self, rhs: S.Expr):
        """(template name, operand exprs) for a differentiable right-hand
        side, else None."""
        if isinstance(rhs, S.Name):
            return ("id", [rhs])
        if isinstance(rhs, S.BinOp):
            if rhs.op in S.COMPARISON_OPS:
                return None
            return (rhs.op, [rhs.left, rhs.right])
        if isinstance(rhs, S.NegOp):
            return ("neg", [rhs.operand])
        if isinstance(rhs, S.Index):
            return ("[]", [rhs.base, rhs.index])
        if isinstance(rhs, S.Call):
            if rhs.func in NONDIFF_BUILTINS or rhs.func == "pop":
                return None
            if self.rt.program.has_function(rhs.func):
                return None  # user calls are spliced, not template-expanded
            return (rhs.func, list(rhs.args))
        return None  # literals

    def _adjoint_assign(self, s: S.Assign, out, nested: bool):
        t = s.target
        rhs = s.value
        lbls = self.stmt_labels.get(id(s), {})
        t_active = t in self.active
        mode = self._self_inverse_mode(s)

        # Restore of the overwritten target (pre-statement state).
        if mode == "setitem":
            restore = S.Assign(
                t,
                S.Call(
                    "setitem",
                    [S.Name(t), S.clone(rhs.args[1]), self.pop_expr(lbls["target"])],
                ),
            )
        elif mode == "append":
            restore = S.Assign(t, S.Call("drop_last", [S.Name(t)]))
        elif mode == "drop_last":
            restore = S.Assign(
                t, S.Call("append", [S.Name(t), self.pop_expr(lbls["target"])])
            )
        else:
            restore = S.Assign(t, self.pop_expr(lbls["target"]))

        # Differentiating generated code: y = pop(stack, L) hands back the
        # value pushed under L; its gradient is routed to the push site by
        # pushing it under the reversal label L + "__r".
        if (
            isinstance(rhs, S.Call)
            and rhs.func == "pop"
            and len(rhs.args) == 2
            and isinstance(rhs.args[1], S.StrLit)
        ):
            base = rhs.args[1].value
            if t in self.fn_tapes:
                # Restoring a saved tape handle: no reversal entry (matches
                # the skip at the push site).
                restore.origin = "aux"
                out.append(restore)
                return
            tape = rhs.args[0].id if isinstance(rhs.args[0], S.Name) else None
            if self.pair_active.get((tape, base), True):
                blk = self.next_block()
                if t_active:
                    payload: S.Expr = S.Name(self.read_grad(t))
                else:
                    payload = S.Call("init_grad", [S.Name(t)])
                parts = [
                    S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk),
                    S.ExprStmt(
                        S.Call(
                            "push",
                            [S.clone(rhs.args[0]), payload, S.StrLit(base + "__r")],
                        ),
                        origin="grad",
                        block=blk,
                    ),
                    restore,
                ]
                if t_active:
                    self._reset(t, parts, blk)
                _mark(parts, "grad", blk)
                out.extend(parts)
            else:
                restore.origin = "aux"
                out.append(restore)
            return

        # Spliced call to a user function. The callee's adjoint half returns
        # the first argument gradient and leaves any others on the tape (a
        # single-value convention keeps generated code free of tuples, so it
        # can itself be transformed again).
        sp = lbls.get("splice")
        if sp is not None:
            pri_name, adj_name, J, extra = sp
            blk = self.next_block()
            parts = [S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk)]
            bt = self.read_grad(t)
            argnames = [rhs.args[k].id for k in J]
            temps = [self.names.fresh("_b" + an) for an in argnames]
            call = S.Call(adj_name, [S.Name(self.stackname), S.Name(bt)])
            if temps:
                parts.append(S.Assign(temps[0], call, origin="grad", block=blk))
            else:
                parts.append(S.ExprStmt(call, origin="grad", block=blk))
            for tmp, lbl in zip(reversed(temps[1:]), reversed(extra)):
                parts.append(S.Assign(tmp, self.pop_expr(lbl), origin="grad", block=blk))
            # The callee's adjoint consumes everything its primal pushed, so
            # the saved old value of t surfaces only now.
            restore.origin = "grad"
            restore.block = blk
            parts.append(restore)
            self._reset(t, parts, blk)
            for an, tmp in zip(argnames, temps):
                self._accumulate(an, S.Name(tmp), parts, nested, blk)
            out.extend(parts)
            return

        key = self._rhs_template_key(rhs) if t_active else None
        if key is not None:
            name, operands = key
            template = self.templates.require("adjoint", name, len(operands))
        else:
            template = None
            operands = []

        if not t_active:
            restore.origin = "aux"
            out.append(restore)
            return

        blk = self.next_block()
        pre: list[S.Stmt] = []
        parts: list[S.Stmt] = []

        # Bindings of template placeholders to this statement's operands.
        values: dict[str, S.Expr] = {}
        fused_selfread = False
        if template is not None:
            for p, a in zip(template.inputs, operands):
                values[p] = a
            fused_names = {
                values[p].id
                for p in template.fused
                if isinstance(values.get(p), S.Name)
            }
            fused_selfread = t in fused_names
            if template.uses_output:
                sv = self.names.fresh("_" + t)
                pre.append(S.Assign(sv, S.Name(t), origin="grad", block=blk))
                values[template.output] = S.Name(sv)
            else:
                values[template.output] = S.Name(t)
            if fused_selfread:
                gsv = self.names.fresh("_b" + t)
                pre.append(S.Assign(gsv, S.Name(self.read_grad(t)), origin="grad", block=blk))
        else:
            fused_names = set()

        out.extend(pre)
        parts.append(S.Comment("Grad of: " + stmt_summary(s), origin="grad", block=blk))
        restore.origin = "grad"
        restore.block = blk
        parts.append(restore)

        accum: list[tuple[str, str]] = []
        fused_self_entries = []
        if template is not None:
            bt = self.read_grad(t)

            def dgrad_of(pname: str, post_reset: bool) -> S.Expr:
                # d[output]: the incoming gradient (saved copy if the block
                # rebinds it before use). d[fused input]: for the rebinding
                # input itself a fresh zero (its old gradient was saved and
                # belongs to the output); otherwise the current gradient —
                # which inside a loop or branch must be the variable, since
                # the emitted statement runs repeatedly.
                if pname == template.output:
                    if fused_selfread and post_reset:
                        return S.Name(gsv)
                    return S.Name(bt)
                x = values[pname].id
                if x == t and post_reset:
                    return S.Call("init_grad", [S.Name(x)])
                if nested or x in self.ew:
                    return S.Name(self.read_grad(x))
                return S.Call("init_grad", [S.Name(x)])

            for entry in template.body:
                if entry[0] == "stmt":
                    # Auxiliary temporary local to the template: freshen its
                    # name and make later rules see the fresh one.
                    st = entry[1]
                    grads = {template.output: dgrad_of(template.output, False)}
                    rhs2 = subst_expr(st.value, values, grads)
                    tmp = self.names.fresh(st.target)
                    values[st.target] = S.Name(tmp)
                    parts.append(S.Assign(tmp, rhs2, origin="grad", block=blk))
                    continue
                _kind, pname, rule_rhs = entry
                a = values.get(pname)
                if not (isinstance(a, S.Name) and a.id in self.active):
                    continue  # literal or inactive operand: no gradient flows
                x = a.id
                if pname in template.fused:
                    if x == t:
                        fused_self_entries.append((pname, rule_rhs))
                        continue
                    grads = {
                        q: dgrad_of(q, False)
                        for q in [template.output] + list(template.fused)
                        if q == template.output or isinstance(values.get(q), S.Name)
                    }
                    rhs2 = subst_expr(rule_rhs, values, grads)
                    g = self.grad(x)
                    parts.append(S.Assign(g, rhs2, origin="grad", block=blk))
                    self.ew.add(x)
                    if not nested:
                        self.guar.add(x)
                else:
                    grads = {template.output: dgrad_of(template.output, False)}
                    rhs2 = subst_expr(rule_rhs, values, grads)
                    tmp = self.names.fresh("_b" + x)
                    parts.append(S.Assign(tmp, rhs2, origin="grad", block=blk))
                    accum.append((x, tmp))

        if not fused_selfread:
            self._reset(t, parts, blk)
        for pname, rule_rhs in fused_self_entries:
            grads = {
                q: dgrad_of(q, True)
                for q in [template.output] + list(template.fused)
                if q == template.output or isinstance(values.get(q), S.Name)
            }
            rhs2 = subst_expr(rule_rhs, values, grads)
            g = self.grad(t)
            parts.append(S.Assign(g, rhs2, origin="grad", block=blk))
            self.ew.add(t)
            if not nested:
                self.guar.add(t)
        for x, tmp in accum:
            self._accumulate(x, S.Name(tmp), parts, nested, blk)

        out.extend(parts)

    # -- assembly -----------------------------------------------------------

    def run(self):
        defined = {p.name for p in self.params} | {self.stackname}
        primal, defined_final = self.primal_block(self.body, defined)
        self.guar = {self.retname}
        self.ew = {self.retname}
        adjoint = self.adjoint_block(self.body, nested=False)
        for p in self.wrt_names:
            self.read_grad(p)  # a never-written gradient is returned as zero
        for v in self.needs_init:
            if v not in defined_final and v not in self.placeholder:
                self._placeholder(v)
        return primal, adjoint, defined_final

    def _needs_init_stmts(self):
        return [
            S.Assign(self.grad(v), S.Call("init_grad", [S.Name(v)]), origin="aux")
            for v in self.needs_init
        ]

    def _seed_guard(self):
        """When the adjoint zeroes rows of the seed gradient in place, work
        on a private copy so the caller's seed array survives the call."""
        if not self.seed_killed:
            return []
        seed = self.grad(self.retname)
        return [S.Assign(seed, S.Call("copy", [S.Name(seed)]), origin="aux")]

    def build_entry(self) -> S.FunctionDef:
        primal, adjoint, _ = self.run()
        seed = self.grad(self.retname)
        name = self.rt.fresh_fn_name("d" + self.src_name + "d" + "_".join(self.wrt_names))
        params = [S.Param(p.name, S.clone(p.default) if p.default else None) for p in self.params]
        params.append(S.Param(seed, S.FloatLit(1.0)))
        body: list[S.Stmt] = [S.Comment("Initialize the tape", origin="marker")]
        body.append(S.Assign(self.stackname, S.Call("stack", []), origin="aux"))
        for v in self.placeholder:
            body.append(S.Assign(v, S.FloatLit(0.0), origin="aux"))
        body.append(S.Comment("Beginning of forward pass", origin="marker"))
        body.extend(primal)
        body.append(S.Comment("Beginning of backward pass", origin="marker"))
        body.extend(self._seed_guard())
        body.extend(self._needs_init_stmts())
        body.extend(adjoint)
        body.append(S.Return([S.Name(self.grad(p)) for p in self.wrt_names]))
        return S.FunctionDef(
            name, params, body, leading_comments=["Generated gradient function"]
        )

    def build_split(self) -> tuple[S.FunctionDef, S.FunctionDef, list[str]]:
        """Primal/adjoint pair for call splicing. The primal runs forward and
        additionally saves the final values its adjoint reads; the adjoint
        takes only the tape and the output gradient. It returns the first
        argument gradient and pushes the remaining ones onto the tape (under
        the returned labels) so every generated function stays single-valued
        and can be differentiated again."""
        primal, adjoint, defined_final = self.run()
        seed = self.grad(self.retname)
        suffix = "_".join([self.src_name] + self.wrt_names)
        pri_name = self.rt.fresh_fn_name("_pri_" + suffix)
        adj_name = self.rt.fresh_fn_name("_adj_" + suffix)

        adj_tail = self._seed_guard() + self._needs_init_stmts() + adjoint
        extra_labels: list[str] = []
        for p in self.wrt_names[1:]:
            lbl = self.labels.fresh()
            extra_labels.append(lbl)
            adj_tail.append(self.push_stmt(S.Name(self.grad(p)), lbl))
        if self.wrt_names:
            adj_tail.append(S.Return([S.Name(self.grad(self.wrt_names[0]))]))
        else:
            # Tape-only adjoint: every contribution left via push statements.
            adj_tail.append(S.Return([S.FloatLit(0.0)]))
        free = _free_reads(adj_tail, {self.stackname, seed})
        saves = sorted(free)
        save_labels = {v: self.labels.fresh() for v in saves}
        for v in saves:
            if v not in defined_final:
                self._placeholder(v)

        pri_body: list[S.Stmt] = []
        for v in self.placeholder:
            pri_body.append(S.Assign(v, S.FloatLit(0.0), origin="aux"))
        pri_body.extend(primal)
        for v in saves:
            pri_body.append(self.push_stmt(S.Name(v), save_labels[v]))
        pri_body.append(S.Return([S.Name(self.retname)]))
        pri = S.FunctionDef(
            pri_name,
            [S.Param(self.stackname)] + [S.Param(p.name, S.clone(p.default) if p.default else None) for p in self.params],
            pri_body,
            leading_comments=[f"Forward pass of {self.src_name}, saving onto the caller's tape"],
        )

        adj_body: list[S.Stmt] = []
        for v in reversed(saves):
            adj_body.append(S.Assign(v, self.pop_expr(save_labels[v]), origin="aux"))
        adj_body.extend(adj_tail)
        adj = S.FunctionDef(
            adj_name,
            [S.Param(self.stackname), S.Param(seed)],
            adj_body,
            leading_comments=[f"Backward pass of {self.src_name}"],
        )
        return pri, adj, extra_labels


# --------------------------------------------------------------------------
# Program-level transformation
# --------------------------------------------------------------------------


class _Reverse:
    def __init__(self, program: S.Program, templates: TemplateSet):
        self.program = program
        self.templates = templates
        self.new_fns: list[S.FunctionDef] = []
        self.cache: dict[tuple, tuple] = {}
        self.in_progress: set[str] = set()
        self.fn_names = {f.name for f in program.functions}

    def fresh_fn_name(self, base: str) -> str:
        name, k = base, 2
        while name in self.fn_names:
            name = f"{base}{k}"
            k += 1
        self.fn_names.add(name)
        return name

    def get_splice(self, fname: str, J: list[int]):
        key = (fname, tuple(J))
        if key in self.cache:
            return self.cache[key]
        if fname in self.in_progress:
            raise TransformError(
                f"cannot differentiate through recursive call chain involving {fname!r}"
            )
        self.in_progress.add(fname)
        try:
            callee = self.program.function(fname)
            ft = _FuncTransform(self, callee, list(J))
            pri, adj, extra = ft.build_split()
        finally:
            self.in_progress.discard(fname)
        self.new_fns.append(pri)
        self.new_fns.append(adj)
        info = (pri.name, adj.name, tuple(J), tuple(extra))
        self.cache[key] = info
        return info

    def collect_verbatim(self, fns: list[S.FunctionDef]):
        """Copy over any original functions still called (inactive calls,
        calls inside conditions, prints), transitively."""
        have = {f.name for f in fns}
        changed = True
        while changed:
            changed = False
            called: set[str] = set()
            for f in fns:
                called |= _called_functions(f)
            for name in sorted(called):
                if name in have or name in BUILTIN_NAMES:
                    continue
                if not self.program.has_function(name):
                    raise TransformError(f"call to unknown function {name!r}")
                fns.append(S.clone(self.program.function(name)))
                have.add(name)
                changed = True


def transform_reverse(
    program: S.Program,
    entry: str,
    wrt=(0,),
    templates: TemplateSet | None = None,
) -> S.Program:
    """Build the reverse-mode derivative of `entry` with respect to the
    parameter positions in `wrt`. Returns a new program whose first function
    is the derivative; it may be followed by primal/adjoint halves of spliced
    callees and verbatim copies of functions still called directly."""
    if not wrt:
        raise TransformError("wrt must name at least one parameter position")
    validate_entry(program, entry, wrt)
    ts = templates if templates is not None else default_templates()
    rt = _Reverse(program, ts)
    ft = _FuncTransform(rt, program.function(entry), list(wrt))
    dfn = ft.build_entry()
    fns = [dfn] + rt.new_fns
    rt.collect_verbatim(fns)
    return S.Program(fns)


def grad(
    program: S.Program,
    entry: str,
    wrt=(0,),
    order: int = 1,
    templates: TemplateSet | None = None,
    optimize: bool = True,
) -> S.Program:
    """Derivative pipeline: transform, then clean the generated code up.
    Higher orders re-apply the transformation to the previous derivative
    (generated code is valid source, so the transform closes over its own
    output). The wrt positions stay valid across orders because the seed
    parameter is always appended last."""
    if order < 1:
        raise TransformError("derivative order must be at least 1")
    p = program
    e = entry
    for _ in range(order):
        p = transform_reverse(p, e, wrt, templates)
        e = p.functions[0].name
        if optimize:
            from .optimize import optimize_program

            p = optimize_program(p)
    return p


# --------------------------------------------------------------------------
# Public template helpers
# --------------------------------------------------------------------------


def register_adjoint(templates: TemplateSet, template: Template, override: bool = False):
    """Register a custom adjoint rule (same registry `load_templates` fills)."""
    if template.kind != "adjoint":
        raise TransformError(
            f"register_adjoint needs an adjoint template, got kind {template.kind!r}"
        )
    templates.register(template, override=override)


def expand_template(
    template: Template,
    bindings: dict[str, str],
    gradnames: dict[str, str] | None = None,
) -> list[S.Stmt]:
    """Expand one adjoint template against a placeholder→variable binding,
    standalone (no surrounding tape machinery): per-use partial temporaries,
    direct assignment on a gradient's first write, add_grad after. The
    gradient name of variable v defaults to "b" + v."""
    gradnames = dict(gradnames or {})

    def gname(v: str) -> str:
        return gradnames.get(v, "b" + v)

    values: dict[str, S.Expr] = {p: S.Name(v) for p, v in bindings.items()}
    missing = ({template.output} | set(template.inputs)) - set(values)
    if missing:
        raise TransformError(
            f"unbound template placeholders: {', '.join(sorted(missing))}"
        )
    grads: dict[str, S.Expr] = {p: S.Name(gname(v)) for p, v in bindings.items()}

    uses = {}
    for entry in template.body:
        if entry[0] == "grad":
            v = bindings[entry[1]]
            uses[v] = uses.get(v, 0) + 1

    out: list[S.Stmt] = []
    counters: dict[str, int] = {}
    pending: list[tuple[str, str]] = []
    written: set[str] = set()
    for entry in template.body:
        if entry[0] == "stmt":
            st = entry[1]
            values[st.target] = S.Name(st.target)
            out.append(S.Assign(st.target, subst_expr(st.value, values, grads)))
            continue
        _kind, pname, rhs = entry
        v = bindings[pname]
        rhs2 = subst_expr(rhs, values, grads)
        if pname in template.fused or uses[v] == 1:
            out.append(S.Assign(gname(v), rhs2))
            written.add(v)
            continue
        n = counters.get(v, 0) + 1
        counters[v] = n
        tmp = "_" + gname(v) + ("" if n == 1 else str(n))
        out.append(S.Assign(tmp, rhs2))
        pending.append((v, tmp))
    for v, tmp in pending:
        if v not in written:
            out.append(S.Assign(gname(v), S.Name(tmp)))
            written.add(v)
        else:
            out.append(
                S.Assign(gname(v), S.Call("add_grad", [S.Name(gname(v)), S.Name(tmp)]))
            )
    return out
