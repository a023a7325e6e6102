"""Derivative templates: per-primitive rewrite rules in the source language.

A template is written as a function in the array language itself, preceded by
an `@adjoint(name)` or `@forward(name)` annotation line. The first parameter
names the primitive's output, the rest name its operands, and `d[p]` refers
to the derivative of placeholder `p` (the incoming gradient of the output in
adjoint templates, tangents in forward templates):

    @adjoint(*)
    def mult(z, x, y):
        d[x] = unbroadcast(d[z] * y, x)
        d[y] = unbroadcast(d[z] * x, y)

Expansion is purely syntactic: the transformer binds placeholders to the
variables of one primal statement and substitutes. Three registry-visible
properties drive code generation:

  - `uses_output`: the template reads the output's value (e.g. tanh), so the
    generator must save it before the tape pop restores the older value;
  - fused inputs: an adjoint rule whose right-hand side reads `d[p]` of the
    same input it assigns (the indexing rule) accumulates in place, bypassing
    the usual partial-temporary + add_grad protocol;
  - arity keys: the same primitive may have different rules per argument
    count (sum with and without an axis).

Operator primitives are registered under their symbol ('+', '*', ...);
indexing under '[]'; plain variable copies under 'id'; unary minus under
'neg'. `load_templates` reads user template files, so any default can be
overridden (straight-through estimators, clipped derivatives, and so on).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import syntax as S
from .errors import TransformError
from .parser import parse

__all__ = [
    "Template",
    "TemplateSet",
    "default_templates",
    "load_templates",
    "subst_expr",
    "OPERATOR_KEYS",
    "NONDIFF_BUILTINS",
]

# Builtins whose result carries no derivative: structural/shape queries,
# allocation of constants, tape plumbing, and gradient initialization
# (derivative exactly zero). Activity analysis treats their outputs as
# inactive, so no template is ever looked up for them.
NONDIFF_BUILTINS = frozenset(
    {"zeros", "shape_of", "size_of", "init_grad", "stack", "print", "push"}
)

OPERATOR_KEYS = {"+": "+", "-": "-", "*": "*", "/": "/"}


@dataclass(slots=True)
class Template:
    kind: str  # "adjoint" | "forward"
    name: str  # primitive name, operator symbol, '[]', 'id', or 'neg'
    output: str
    inputs: list[str]
    # body entries: ("grad", placeholder, rhs Expr) | ("stmt", Stmt)
    body: list[tuple]
    uses_output: bool = False
    fused: frozenset[str] = field(default_factory=frozenset)

    @property
    def arity(self) -> int:
        return len(self.inputs)


class TemplateSet:
    """Registry of templates keyed by (kind, primitive name, arity)."""

    def __init__(self):
        self._by_key: dict[tuple[str, str, int], Template] = {}

    def register(self, t: Template, override: bool = False):
        key = (t.kind, t.name, t.arity)
        if key in self._by_key and not override:
            raise TransformError(
                f"{t.kind} template for {t.name!r}/{t.arity} is already "
                "registered (pass override=True to replace it)"
            )
        self._by_key[key] = t

    def lookup(self, kind: str, name: str, arity: int) -> Template | None:
        return self._by_key.get((kind, name, arity))

    def require(self, kind: str, name: str, arity: int) -> Template:
        t = self.lookup(kind, name, arity)
        if t is None:
            raise TransformError(
                f"no {kind} template registered for primitive "
                f"{name!r} with {arity} arguments"
            )
        return t

    def copy(self) -> "TemplateSet":
        new = TemplateSet()
        new._by_key = dict(self._by_key)
        return new


# --------------------------------------------------------------------------
# Loading templates from annotated source text
# --------------------------------------------------------------------------


def load_templates(text: str, into: TemplateSet | None = None, override: bool = False) -> TemplateSet:
    """Parse `@adjoint(name)` / `@forward(name)` annotated functions."""
    ts = into if into is not None else TemplateSet()
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        if not line.startswith("@"):
            raise TransformError(
                f"template line {i + 1}: expected an @adjoint/@forward annotation, got {line!r}"
            )
        kind, name = _parse_annotation(line, i + 1)
        j = i + 1
        while j < len(lines) and not lines[j].strip().startswith("@"):
            j += 1
        chunk = "\n".join(lines[i + 1 : j])
        program = parse(chunk)
        if len(program.functions) != 1:
            raise TransformError(
                f"template line {i + 1}: annotation must be followed by exactly one function"
            )
        ts.register(_build_template(kind, name, program.functions[0]), override=override)
        i = j
    return ts


def _parse_annotation(line: str, lineno: int) -> tuple[str, str]:
    for kind in ("adjoint", "forward"):
        prefix = f"@{kind}("
        if line.startswith(prefix) and line.endswith(")"):
            name = line[len(prefix) : -1].strip()
            if not name:
                raise TransformError(f"template line {lineno}: empty primitive name")
            return kind, name
    raise TransformError(
        f"template line {lineno}: annotations are @adjoint(name) or @forward(name), got {line!r}"
    )


def _build_template(kind: str, name: str, fn: S.FunctionDef) -> Template:
    params = [p.name for p in fn.params]
    if not params:
        raise TransformError(f"template {fn.name!r} needs at least an output placeholder")
    if "d" in params:
        raise TransformError(f"template {fn.name!r}: placeholder name 'd' is reserved")
    output, inputs = params[0], params[1:]
    known = set(params)

    body: list[tuple] = []
    fused: set[str] = set()
    uses_output = False
    for s in fn.body:
        if isinstance(s, S.Comment):
            continue
        if isinstance(s, S.IndexAssign) and s.target == "d":
            if not isinstance(s.index, S.Name) or s.index.id not in known:
                raise TransformError(
                    f"template {fn.name!r}: d[...] must name a placeholder"
                )
            p = s.index.id
            if kind == "adjoint" and p == output:
                raise TransformError(
                    f"template {fn.name!r}: adjoint rules assign d[...] of inputs, "
                    "not of the output"
                )
            if kind == "forward" and p != output:
                raise TransformError(
                    f"template {fn.name!r}: forward rules assign d[{output}] only"
                )
            _check_placeholders(s.value, known, fn.name)
            if _reads_grad_of(s.value, p):
                fused.add(p)
            body.append(("grad", p, s.value))
        else:
            if not isinstance(s, S.Assign):
                raise TransformError(
                    f"template {fn.name!r}: body may only contain assignments"
                )
            for e in S.stmt_exprs(s):
                _check_placeholders(e, known, fn.name)
            body.append(("stmt", s))
        for e in S.stmt_exprs(s):
            if _reads_value_of(e, output):
                uses_output = True
    if not body:
        raise TransformError(f"template {fn.name!r} has no statements")
    return Template(kind, name, output, inputs, body, uses_output, frozenset(fused))


def _is_grad_ref(e: S.Expr) -> bool:
    return (
        isinstance(e, S.Index)
        and isinstance(e.base, S.Name)
        and e.base.id == "d"
        and isinstance(e.index, S.Name)
    )


def _walk_exprs(e: S.Expr):
    yield e
    if _is_grad_ref(e):
        return  # do not descend into the d[...] marker itself
    for c in S.expr_children(e):
        yield from _walk_exprs(c)


def _reads_grad_of(e: S.Expr, p: str) -> bool:
    return any(_is_grad_ref(x) and x.index.id == p for x in _walk_exprs(e))


def _reads_value_of(e: S.Expr, p: str) -> bool:
    return any(isinstance(x, S.Name) and x.id == p for x in _walk_exprs(e))


def _check_placeholders(e: S.Expr, known: set[str], tname: str):
    for x in _walk_exprs(e):
        if _is_grad_ref(x):
            if x.index.id not in known:
                raise TransformError(
                    f"template {tname!r}: d[{x.index.id}] is not a placeholder"
                )
        elif isinstance(x, S.Name) and x.id not in known and x.id != "d":
            raise TransformError(
                f"template {tname!r}: {x.id!r} is not a placeholder"
            )


# --------------------------------------------------------------------------
# Substitution
# --------------------------------------------------------------------------


def subst_expr(e: S.Expr, values: dict[str, S.Expr], grads: dict[str, S.Expr]) -> S.Expr:
    """Replace placeholder reads and d[...] markers; returns a fresh tree."""
    if _is_grad_ref(e):
        p = e.index.id
        if p not in grads:
            raise TransformError(f"unbound gradient placeholder d[{p}]")
        return S.clone(grads[p])
    if isinstance(e, S.Name):
        if e.id in values:
            return S.clone(values[e.id])
        return S.Name(e.id, line=e.line)
    if isinstance(e, S.BinOp):
        return S.BinOp(
            e.op,
            subst_expr(e.left, values, grads),
            subst_expr(e.right, values, grads),
            line=e.line,
        )
    if isinstance(e, S.NegOp):
        return S.NegOp(subst_expr(e.operand, values, grads), line=e.line)
    if isinstance(e, S.Call):
        return S.Call(e.func, [subst_expr(a, values, grads) for a in e.args], line=e.line)
    if isinstance(e, S.Index):
        return S.Index(
            subst_expr(e.base, values, grads),
            subst_expr(e.index, values, grads),
            line=e.line,
        )
    return S.clone(e)


# --------------------------------------------------------------------------
# Default template set
# --------------------------------------------------------------------------

# The gradient rules for everything the runtime exposes. These cover the
# builtin kernels, the arithmetic operators, indexing, and the gradient
# support primitives themselves (so generated derivative code can be
# differentiated again for higher-order derivatives).
_DEFAULT_TEXT = """
@adjoint(id)
def adjoint_identity(z, x):
    d[x] = copy(d[z])

@adjoint(+)
def adjoint_plus(z, x, y):
    d[x] = unbroadcast(d[z], x)
    d[y] = unbroadcast(d[z], y)

@adjoint(-)
def adjoint_minus(z, x, y):
    d[x] = unbroadcast(d[z], x)
    d[y] = unbroadcast(-d[z], y)

@adjoint(*)
def adjoint_times(z, x, y):
    d[x] = unbroadcast(d[z] * y, x)
    d[y] = unbroadcast(d[z] * x, y)

@adjoint(/)
def adjoint_divide(z, x, y):
    d[x] = unbroadcast(d[z] / y, x)
    d[y] = unbroadcast(-(d[z] * z) / y, y)

@adjoint(neg)
def adjoint_negate(z, x):
    d[x] = -d[z]

@adjoint([])
def adjoint_index(z, x, i):
    d[x] = scatter_add(d[x], i, d[z], x)

@adjoint(add)
def adjoint_add(z, x, y):
    d[x] = unbroadcast(d[z], x)
    d[y] = unbroadcast(d[z], y)

@adjoint(multiply)
def adjoint_multiply(z, x, y):
    d[x] = unbroadcast(d[z] * y, x)
    d[y] = unbroadcast(d[z] * x, y)

@adjoint(dot)
def adjoint_dot(z, x, y):
    d[x] = grad_dot_lhs(d[z], x, y)
    d[y] = grad_dot_rhs(d[z], x, y)

@adjoint(tanh)
def adjoint_tanh(z, x):
    d[x] = d[z] * (1.0 - z * z)

@adjoint(exp)
def adjoint_exp(z, x):
    d[x] = d[z] * z

@adjoint(log)
def adjoint_log(z, x):
    d[x] = d[z] / x

@adjoint(sum)
def adjoint_sum(z, x):
    d[x] = unreduce(d[z], x)

@adjoint(sum)
def adjoint_sum_axis(z, x, axis):
    d[x] = unreduce(d[z], x, axis)

@adjoint(mean)
def adjoint_mean(z, x):
    d[x] = unreduce(d[z] / size_of(x), x)

@adjoint(mean)
def adjoint_mean_axis(z, x, axis):
    d[x] = unreduce(d[z] / size_of(x, axis), x, axis)

@adjoint(setitem)
def adjoint_setitem(z, x, i, v):
    d[x] = setitem(d[z], i, init_grad(v))
    d[v] = unbroadcast(d[z][i], v)

@adjoint(append)
def adjoint_append(z, x, r):
    d[x] = drop_last(d[z])
    d[r] = unbroadcast(d[z][-1], r)

@adjoint(drop_last)
def adjoint_drop_last(z, x):
    d[x] = append(d[z], init_grad(z))

@adjoint(copy)
def adjoint_copy(z, x):
    d[x] = copy(d[z])

@adjoint(parray)
def adjoint_parray(z, x):
    d[x] = copy(d[z])

@adjoint(add_grad)
def adjoint_add_grad(z, x, y):
    d[x] = copy(d[z])
    d[y] = copy(d[z])

@adjoint(unbroadcast)
def adjoint_unbroadcast(z, g, like):
    d[g] = unreduce(d[z], g)

@adjoint(unreduce)
def adjoint_unreduce(z, g, like):
    d[g] = unbroadcast(d[z], g)

@adjoint(unreduce)
def adjoint_unreduce_axis(z, g, like, axis):
    d[g] = sum(d[z], axis)

@adjoint(scatter_add)
def adjoint_scatter_add(z, g, i, v, like):
    d[g] = copy(d[z])
    d[v] = unbroadcast(d[z][i], v)

@forward(id)
def forward_identity(z, x):
    d[z] = copy(d[x])

@forward(+)
def forward_plus(z, x, y):
    d[z] = unreduce(d[x] + d[y], z)

@forward(-)
def forward_minus(z, x, y):
    d[z] = unreduce(d[x] - d[y], z)

@forward(*)
def forward_times(z, x, y):
    d[z] = unreduce(d[x] * y + x * d[y], z)

@forward(/)
def forward_divide(z, x, y):
    d[z] = unreduce(d[x] / y - z * d[y] / y, z)

@forward(neg)
def forward_negate(z, x):
    d[z] = -d[x]

@forward([])
def forward_index(z, x, i):
    d[z] = d[x][i]

@forward(add)
def forward_add(z, x, y):
    d[z] = unreduce(d[x] + d[y], z)

@forward(multiply)
def forward_multiply(z, x, y):
    d[z] = unreduce(d[x] * y + x * d[y], z)

@forward(dot)
def forward_dot(z, x, y):
    d[z] = dot(d[x], y) + dot(x, d[y])

@forward(tanh)
def forward_tanh(z, x):
    d[z] = d[x] * (1.0 - z * z)

@forward(exp)
def forward_exp(z, x):
    d[z] = d[x] * z

@forward(log)
def forward_log(z, x):
    d[z] = d[x] / x

@forward(sum)
def forward_sum(z, x):
    d[z] = sum(d[x])

@forward(sum)
def forward_sum_axis(z, x, axis):
    d[z] = sum(d[x], axis)

@forward(mean)
def forward_mean(z, x):
    d[z] = mean(d[x])

@forward(mean)
def forward_mean_axis(z, x, axis):
    d[z] = mean(d[x], axis)

@forward(setitem)
def forward_setitem(z, x, i, v):
    d[z] = setitem(d[x] + x * 0.0, i, d[v] + v * 0.0)

@forward(append)
def forward_append(z, x, r):
    d[z] = append(d[x] + x * 0.0, d[r] + r * 0.0)

@forward(drop_last)
def forward_drop_last(z, x):
    d[z] = drop_last(d[x])

@forward(copy)
def forward_copy(z, x):
    d[z] = copy(d[x])

@forward(parray)
def forward_parray(z, x):
    d[z] = parray(d[x])

@forward(add_grad)
def forward_add_grad(z, x, y):
    d[z] = add_grad(d[x], d[y])

@forward(unbroadcast)
def forward_unbroadcast(z, g, like):
    d[z] = unbroadcast(d[g], like)

@forward(unreduce)
def forward_unreduce(z, g, like):
    d[z] = unreduce(d[g], like)

@forward(unreduce)
def forward_unreduce_axis(z, g, like, axis):
    d[z] = unreduce(d[g], like, axis)

@forward(scatter_add)
def forward_scatter_add(z, g, i, v, like):
    d[z] = scatter_add(d[g], i, d[v], like)

@forward(grad_dot_lhs)
def forward_grad_dot_lhs(z, g, a, b):
    d[z] = grad_dot_lhs(d[g], a, b) + grad_dot_lhs(g, a, d[b])

@forward(grad_dot_rhs)
def forward_grad_dot_rhs(z, g, a, b):
    d[z] = grad_dot_rhs(d[g], a, b) + grad_dot_rhs(g, d[a], b)
"""

_DEFAULTS: TemplateSet | None = None


def default_templates() -> TemplateSet:
    """A fresh copy of the built-in template set (safe to extend)."""
    global _DEFAULTS
    if _DEFAULTS is None:
        _DEFAULTS = load_templates(_DEFAULT_TEXT)
    return _DEFAULTS.copy()
