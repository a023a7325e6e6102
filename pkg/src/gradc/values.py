"""Runtime values, kernels, and the tape.

Values are raw Python/numpy objects: float, int, bool, numpy.ndarray
(float64), ZeroGrad (lazy zero gradient), PArray (persistent array handle),
Tape, str (labels / print payload), tuple (multi-value returns). Dispatch is
isinstance-based.

ZeroGrad is an exact zero of a known shape that is never materialized. It
flows through the arithmetic operators (identity for +/-, absorbing for */÷,
compares as 0.0) and through the gradient-support kernels, but a ZeroGrad
reaching a compute kernel such as tanh raises: generated code never produces
that, so it flags a transformer bug rather than silently densifying.
"""

from __future__ import annotations

import numpy as np

from .errors import EvalError, TapeError
from .parray import PArray, pa_append, pa_drop_last, pa_new, pa_row, pa_setitem


class ZeroGrad:
    """Lazy zero gradient carrying only a shape; see module docstring."""

    __slots__ = ("shape",)

    def __init__(self, shape=()):
        self.shape = tuple(shape)

    def __repr__(self):
        return "ZeroGrad" if self.shape == () else f"ZeroGrad{self.shape}"


ZERO = ZeroGrad()


def _zshape(v):
    """Shape of a numeric operand for lazy-zero propagation."""
    if isinstance(v, ZeroGrad):
        return v.shape
    if isinstance(v, np.ndarray):
        return v.shape
    if isinstance(v, PArray):
        return v.shape
    if isinstance(v, (float, int)) and not isinstance(v, bool):
        return ()
    raise EvalError(f"unsupported operand next to a zero gradient: {type(v).__name__}")


def _zbroadcast(a, b):
    try:
        return np.broadcast_shapes(_zshape(a), _zshape(b))
    except ValueError as e:
        raise EvalError(f"shape mismatch against a zero gradient: {e}") from None


class AllocCounters:
    """Cumulative dense-allocation instrumentation for memory assertions."""

    __slots__ = ("dense_elements", "zero_arrays")

    def __init__(self):
        self.reset()

    def reset(self):
        self.dense_elements = 0
        self.zero_arrays = 0


COUNTERS = AllocCounters()


def _fresh(arr: np.ndarray) -> np.ndarray:
    COUNTERS.dense_elements += arr.size
    return arr


def _fresh_zeros(shape) -> np.ndarray:
    COUNTERS.zero_arrays += 1
    return _fresh(np.zeros(shape))


def as_dense(x) -> np.ndarray:
    """Coerce input data (lists, scalars, arrays) to a float64 array value."""
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# Tape


class Tape:
    """Label-checked LIFO stack of intermediate values.

    Pushing a dense array stores a snapshot (deep copy) so later in-place
    mutation cannot corrupt the restore chain; persistent-array handles are
    immutable versions and are stored as-is in O(1).
    """

    __slots__ = ("_items",)

    def __init__(self):
        self._items: list[tuple[str, object]] = []

    def push(self, value, label: str):
        if isinstance(value, np.ndarray):
            value = _fresh(value.copy())
        self._items.append((label, value))

    def pop(self, label: str):
        if not self._items:
            raise TapeError(f"pop from an empty tape (expected label {label!r})")
        top, value = self._items.pop()
        if top != label:
            raise TapeError(f"tape label mismatch: top is {top!r}, pop asked for {label!r}")
        return value

    def __len__(self):
        return len(self._items)


# --------------------------------------------------------------------------
# Operator dispatch (+ - * / comparisons, unary minus, indexing)


def _reject_operand(op, v):
    raise EvalError(f"unsupported operand for {op!r}: {type(v).__name__}")


def _is_num(v):
    return isinstance(v, (float, int, np.ndarray)) and not isinstance(v, bool)


def _coerce_pair(op, a, b):
    if isinstance(a, PArray):
        a = a.checkout()
    if isinstance(b, PArray):
        b = b.checkout()
    if not _is_num(a):
        _reject_operand(op, a)
    if not _is_num(b):
        _reject_operand(op, b)
    return a, b


def _result(op, a, b, r):
    if isinstance(r, np.ndarray):
        return _fresh(r)
    return r


def op_add(a, b):
    if isinstance(a, ZeroGrad) and isinstance(b, ZeroGrad):
        return ZeroGrad(_zbroadcast(a, b))
    if isinstance(a, ZeroGrad):
        return b
    if isinstance(b, ZeroGrad):
        return a
    a, b = _coerce_pair("+", a, b)
    try:
        return _result("+", a, b, a + b)
    except ValueError as e:
        raise EvalError(f"shape mismatch in '+': {e}") from None


def op_sub(a, b):
    if isinstance(a, ZeroGrad) and isinstance(b, ZeroGrad):
        return ZeroGrad(_zbroadcast(a, b))
    if isinstance(b, ZeroGrad):
        return a
    if isinstance(a, ZeroGrad):
        return op_neg(b)
    a, b = _coerce_pair("-", a, b)
    try:
        return _result("-", a, b, a - b)
    except ValueError as e:
        raise EvalError(f"shape mismatch in '-': {e}") from None


def op_mul(a, b):
    if isinstance(a, ZeroGrad) or isinstance(b, ZeroGrad):
        return ZeroGrad(_zbroadcast(a, b))
    a, b = _coerce_pair("*", a, b)
    try:
        return _result("*", a, b, a * b)
    except ValueError as e:
        raise EvalError(f"shape mismatch in '*': {e}") from None


def op_div(a, b):
    if isinstance(b, ZeroGrad):
        raise EvalError("division by a zero gradient")
    if isinstance(a, ZeroGrad):
        return ZeroGrad(_zbroadcast(a, b))
    a, b = _coerce_pair("/", a, b)
    try:
        r = a / b
    except ZeroDivisionError:
        r = float(np.float64(a) / np.float64(b))
    return _result("/", a, b, r)


def op_neg(a):
    if isinstance(a, ZeroGrad):
        return a
    if isinstance(a, PArray):
        a = a.checkout()
    if not _is_num(a):
        _reject_operand("-", a)
    r = -a
    return _fresh(r) if isinstance(r, np.ndarray) else r


def _cmp(op, pyop, a, b):
    if isinstance(a, ZeroGrad):
        a = 0.0
    if isinstance(b, ZeroGrad):
        b = 0.0
    for v in (a, b):
        if isinstance(v, np.ndarray) or isinstance(v, PArray):
            raise EvalError(f"comparison {op!r} is not defined on arrays")
        if not isinstance(v, (float, int)) or isinstance(v, bool):
            _reject_operand(op, v)
    return bool(pyop(a, b))


def op_lt(a, b):
    return _cmp("<", lambda x, y: x < y, a, b)


def op_gt(a, b):
    return _cmp(">", lambda x, y: x > y, a, b)


def op_le(a, b):
    return _cmp("<=", lambda x, y: x <= y, a, b)


def op_ge(a, b):
    return _cmp(">=", lambda x, y: x >= y, a, b)


def op_eq(a, b):
    return _cmp("==", lambda x, y: x == y, a, b)


BINOPS = {
    "+": op_add,
    "-": op_sub,
    "*": op_mul,
    "/": op_div,
    "<": op_lt,
    ">": op_gt,
    "<=": op_le,
    ">=": op_ge,
    "==": op_eq,
}


def op_index(base, idx):
    """x[i]: row/element read. Array reads copy (no view semantics)."""
    if isinstance(base, ZeroGrad):
        return ZeroGrad(base.shape[1:])
    if isinstance(base, tuple):
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise EvalError("tuple index must be an int")
        try:
            return base[idx]
        except IndexError:
            raise EvalError(f"tuple index {idx} out of range") from None
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise EvalError(f"array index must be an int, got {type(idx).__name__}")
    if isinstance(base, PArray):
        return pa_row(base, idx)
    if isinstance(base, np.ndarray):
        try:
            r = base[idx]
        except IndexError:
            raise EvalError(f"index {idx} out of range for shape {base.shape}") from None
        if isinstance(r, np.ndarray):
            return _fresh(r.copy())
        return float(r)
    raise EvalError(f"cannot index into {type(base).__name__}")


# --------------------------------------------------------------------------
# Gradient support


def init_grad(x):
    """The zero gradient for any value: lazy, carrying only the shape."""
    return ZeroGrad(_shape_of_like(x))


def add_grad(a, b):
    """Gradient accumulation: ZeroGrad is the identity; dense shapes must
    agree (scalars broadcast); persistent handles materialize if both sides
    are real."""
    if isinstance(a, ZeroGrad):
        return ZeroGrad(_zbroadcast(a, b)) if isinstance(b, ZeroGrad) else b
    if isinstance(b, ZeroGrad):
        return a
    if isinstance(a, PArray) and isinstance(b, PArray):
        return parray_kernel(_fresh(a.checkout() + b.checkout()))
    if isinstance(a, PArray):
        a = a.checkout()
    if isinstance(b, PArray):
        b = b.checkout()
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
        if a.shape != b.shape:
            raise EvalError(f"add_grad shape mismatch: {a.shape} vs {b.shape}")
        return _fresh(a + b)
    if not _is_num(a) or not _is_num(b):
        raise EvalError(
            f"add_grad needs numeric gradients, got {type(a).__name__}, {type(b).__name__}"
        )
    r = a + b
    return _fresh(r) if isinstance(r, np.ndarray) else r


def _shape_of_like(like):
    if isinstance(like, np.ndarray):
        return like.shape
    if isinstance(like, PArray):
        return like.shape
    if isinstance(like, ZeroGrad):
        return like.shape
    if isinstance(like, (float, int)) and not isinstance(like, bool):
        return ()
    raise EvalError(f"cannot take the shape of {type(like).__name__}")


def unbroadcast(g, like):
    """Reduce a gradient back to the shape of the operand it belongs to by
    summing over broadcast axes.

    Dense results are always fresh arrays, never views or aliases of the
    input: accumulation updates dense receivers in place, so two gradient
    bindings must never share storage. Persistent handles are immutable
    versions and may be returned as-is.
    """
    if isinstance(g, ZeroGrad):
        return ZeroGrad(_shape_of_like(like))
    if isinstance(g, PArray):
        if isinstance(like, PArray) and g.shape == like.shape:
            return g
        g = g.checkout()
    lshape = _shape_of_like(like)
    if lshape == ():
        if isinstance(g, np.ndarray):
            return float(g.sum())
        return float(g)
    if not isinstance(g, np.ndarray):
        # scalar seed against an array operand: isotropic gradient
        return _fresh(np.full(lshape, float(g)))
    if g.shape == lshape:
        return _fresh(g.copy())
    while g.ndim > len(lshape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, ld) in enumerate(zip(g.shape, lshape)) if ld == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != lshape:
        raise EvalError(f"unbroadcast cannot reconcile {g.shape} with {lshape}")
    return _fresh(g)


def unreduce(g, like, axis=None):
    """Expand a reduced gradient back up to the shape of the reduction input
    (the adjoint of sum/mean). With axis, reinsert that axis first. Dense
    results are always fresh arrays (see unbroadcast)."""
    if isinstance(g, ZeroGrad):
        return ZeroGrad(_shape_of_like(like))
    if isinstance(g, PArray):
        g = g.checkout()
    lshape = _shape_of_like(like)
    if axis is not None:
        if not isinstance(axis, int) or isinstance(axis, bool):
            raise EvalError("unreduce axis must be an int")
        nd = len(lshape)
        if not -nd <= axis < nd:
            raise EvalError(f"unreduce axis {axis} out of range for shape {lshape}")
        g = np.expand_dims(np.asarray(g, dtype=np.float64), axis)
    if lshape == ():
        if isinstance(g, np.ndarray):
            if g.size != 1:
                raise EvalError("unreduce to a scalar needs a size-1 gradient")
            return float(g.reshape(()))
        return float(g)
    if not isinstance(g, np.ndarray):
        expanded = np.full(lshape, float(g))
    else:
        try:
            expanded = np.broadcast_to(g, lshape).copy()
        except ValueError:
            raise EvalError(f"unreduce cannot expand {g.shape} to {lshape}") from None
    expanded = _fresh(expanded)
    if isinstance(like, PArray):
        return parray_kernel(expanded)
    return expanded


def scatter_add(g, i, v, like):
    """Accumulate a row gradient at index i. A ZeroGrad densifies to zeros
    shaped like `like` on first scatter; dense receivers are updated in
    place; persistent receivers get a new version."""
    if not isinstance(i, int) or isinstance(i, bool):
        raise EvalError("scatter_add index must be an int")
    if isinstance(v, ZeroGrad):
        return g
    if isinstance(g, ZeroGrad):
        if isinstance(like, PArray):
            g = parray_kernel(_fresh_zeros(like.shape))
        else:
            g = _fresh_zeros(_shape_of_like(like))
    if isinstance(g, PArray):
        row = pa_row(g, i)
        return pa_setitem(g, i, row + v)
    if isinstance(g, np.ndarray):
        try:
            g[i] = g[i] + v
        except IndexError:
            raise EvalError(f"scatter index {i} out of range for shape {g.shape}") from None
        except ValueError as e:
            raise EvalError(f"scatter shape mismatch: {e}") from None
        return g
    raise EvalError(f"cannot scatter into {type(g).__name__}")


def grad_dot_lhs(g, a, b):
    """d/da of dot(a, b) given the output gradient g."""
    if isinstance(g, ZeroGrad) or isinstance(b, ZeroGrad):
        return ZeroGrad(_shape_of_like(a))
    if isinstance(a, PArray):
        a = a.checkout()
    if isinstance(b, PArray):
        b = b.checkout()
    an, bn = _dot_dims(a, b)
    if an == 2 and bn == 2:
        return _fresh(np.dot(g, b.T))
    if an == 1 and bn == 2:
        return _fresh(np.dot(b, g))
    if an == 2 and bn == 1:
        return _fresh(np.outer(g, b))
    return _result("grad_dot_lhs", g, b, g * b)


def grad_dot_rhs(g, a, b):
    """d/db of dot(a, b) given the output gradient g."""
    if isinstance(g, ZeroGrad) or isinstance(a, ZeroGrad):
        return ZeroGrad(_shape_of_like(b))
    if isinstance(a, PArray):
        a = a.checkout()
    if isinstance(b, PArray):
        b = b.checkout()
    an, bn = _dot_dims(a, b)
    if an == 2 and bn == 2:
        return _fresh(np.dot(a.T, g))
    if an == 1 and bn == 2:
        return _fresh(np.outer(a, g))
    if an == 2 and bn == 1:
        return _fresh(np.dot(g, a))
    return _result("grad_dot_rhs", g, a, g * a)


def copy_value(x):
    """Materializing copy: dense copies, persistent handles check out to a
    fresh dense array, scalars pass through."""
    if isinstance(x, ZeroGrad):
        return x
    if isinstance(x, np.ndarray):
        return _fresh(x.copy())
    if isinstance(x, PArray):
        return _fresh(x.checkout())
    if isinstance(x, (float, int, bool, str)):
        return x
    if isinstance(x, tuple):
        return x
    raise EvalError(f"cannot copy {type(x).__name__}")


# --------------------------------------------------------------------------
# Compute kernels


def _dot_dims(a, b):
    if not isinstance(a, np.ndarray) or not isinstance(b, np.ndarray):
        raise EvalError("dot needs two arrays")
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise EvalError(f"dot supports 1-d and 2-d arrays, got {a.ndim}-d and {b.ndim}-d")
    return a.ndim, b.ndim


def k_add(a, b):
    return op_add(a, b)


def k_multiply(a, b):
    return op_mul(a, b)


def k_dot(a, b):
    # a lazy zero operand makes the product exactly zero (tangent code
    # legitimately feeds zero tangents through the same kernels)
    if isinstance(a, ZeroGrad) or isinstance(b, ZeroGrad):
        sa, sb = _zshape(a), _zshape(b)
        if len(sa) not in (1, 2) or len(sb) not in (1, 2):
            raise EvalError(
                f"dot supports 1-d and 2-d arrays, got {len(sa)}-d and {len(sb)}-d"
            )
        if sa[-1] != sb[0]:
            raise EvalError(f"dot shape mismatch: {sa} and {sb}")
        return ZeroGrad((sa[:-1] if len(sa) == 2 else ()) + (sb[1:] if len(sb) == 2 else ()))
    if isinstance(a, PArray):
        a = a.checkout()
    if isinstance(b, PArray):
        b = b.checkout()
    _dot_dims(a, b)
    try:
        r = np.dot(a, b)
    except ValueError as e:
        raise EvalError(f"dot shape mismatch: {e}") from None
    if isinstance(r, np.ndarray):
        return _fresh(r)
    return float(r)


def _unary_math(fn, x, name):
    if isinstance(x, PArray):
        x = x.checkout()
    if isinstance(x, np.ndarray):
        return _fresh(fn(x))
    if _is_num(x):
        return float(fn(x))
    raise EvalError(f"{name} needs a numeric argument, got {type(x).__name__}")


def k_tanh(x):
    return _unary_math(np.tanh, x, "tanh")


def k_exp(x):
    return _unary_math(np.exp, x, "exp")


def k_log(x):
    return _unary_math(np.log, x, "log")


def _check_axis(x, axis, name):
    if not isinstance(axis, int) or isinstance(axis, bool):
        raise EvalError(f"{name} axis must be an int")
    if not -x.ndim <= axis < x.ndim:
        raise EvalError(f"{name} axis {axis} out of range for shape {x.shape}")


def _zero_reduced(x: ZeroGrad, axis, name):
    if axis is None:
        return ZeroGrad(())
    if not isinstance(axis, int) or isinstance(axis, bool):
        raise EvalError(f"{name} axis must be an int")
    nd = len(x.shape)
    if not -nd <= axis < nd:
        raise EvalError(f"{name} axis {axis} out of range for shape {x.shape}")
    k = axis % nd
    return ZeroGrad(x.shape[:k] + x.shape[k + 1 :])


def k_sum(x, axis=None):
    if isinstance(x, ZeroGrad):
        return _zero_reduced(x, axis, "sum")
    if isinstance(x, PArray):
        x = x.checkout()
    if isinstance(x, np.ndarray):
        if axis is None:
            return float(x.sum())
        _check_axis(x, axis, "sum")
        r = x.sum(axis=axis)
        return _fresh(r) if isinstance(r, np.ndarray) and r.ndim else float(r)
    if _is_num(x):
        return float(x)
    raise EvalError(f"sum needs a numeric argument, got {type(x).__name__}")


def k_mean(x, axis=None):
    if isinstance(x, ZeroGrad):
        return _zero_reduced(x, axis, "mean")
    if isinstance(x, PArray):
        x = x.checkout()
    if isinstance(x, np.ndarray):
        if x.size == 0:
            raise EvalError("mean of an empty array")
        if axis is None:
            return float(x.mean())
        _check_axis(x, axis, "mean")
        r = x.mean(axis=axis)
        return _fresh(r) if isinstance(r, np.ndarray) and r.ndim else float(r)
    if _is_num(x):
        return float(x)
    raise EvalError(f"mean needs a numeric argument, got {type(x).__name__}")


def k_zeros(n):
    if not isinstance(n, int) or isinstance(n, bool) or n < 0:
        raise EvalError("zeros takes a non-negative int length")
    return _fresh_zeros(n)


def _row_for(x, v):
    row_shape = x.shape[1:]
    if isinstance(v, np.ndarray):
        if v.shape != row_shape:
            raise EvalError(f"row shape {v.shape} does not fit array of shape {x.shape}")
        return v
    if _is_num(v):
        return np.broadcast_to(np.float64(v), row_shape)
    raise EvalError(f"row value must be numeric, got {type(v).__name__}")


def k_append(x, v):
    if isinstance(x, ZeroGrad):
        # zero gradient grows by a zero row: still exactly zero
        if not x.shape:
            raise EvalError("append needs an array receiver")
        return ZeroGrad((x.shape[0] + 1,) + x.shape[1:])
    if isinstance(v, ZeroGrad):
        v = 0.0
    if isinstance(x, PArray):
        return pa_append(x, v)
    if not isinstance(x, np.ndarray) or x.ndim < 1:
        raise EvalError("append needs an array receiver")
    row = _row_for(x, v)
    out = np.empty((x.shape[0] + 1,) + x.shape[1:])
    out[:-1] = x
    out[-1] = row
    return _fresh(out)


def k_setitem(x, i, v):
    """Functional row write: returns a new array with row i replaced."""
    if not isinstance(i, int) or isinstance(i, bool):
        raise EvalError("setitem index must be an int")
    if isinstance(v, ZeroGrad):
        v = 0.0
    if isinstance(x, ZeroGrad):
        # only the adjoint's row-kill (writing an exact zero) may do this
        if isinstance(v, (float, int)) and not isinstance(v, bool) and float(v) == 0.0:
            return x
        raise EvalError("setitem on a zero gradient with a nonzero row")
    if isinstance(x, PArray):
        return pa_setitem(x, i, v)
    if not isinstance(x, np.ndarray) or x.ndim < 1:
        raise EvalError("setitem needs an array receiver")
    if not -x.shape[0] <= i < x.shape[0]:
        raise EvalError(f"setitem index {i} out of range for shape {x.shape}")
    out = _fresh(x.copy())
    out[i] = _row_for(x, v) if x.ndim > 1 else _scalar_for_row(v)
    return out


def _scalar_for_row(v):
    if _is_num(v) and not isinstance(v, np.ndarray):
        return float(v)
    if isinstance(v, np.ndarray) and v.ndim == 0:
        return float(v)
    raise EvalError("1-d setitem takes a scalar value")


def drop_last(x):
    """Remove the final row (adjoint of append)."""
    if isinstance(x, ZeroGrad):
        if not x.shape or x.shape[0] == 0:
            raise EvalError("drop_last needs a non-empty array")
        return ZeroGrad((x.shape[0] - 1,) + x.shape[1:])
    if isinstance(x, PArray):
        return pa_drop_last(x)
    if not isinstance(x, np.ndarray) or x.ndim < 1 or x.shape[0] == 0:
        raise EvalError("drop_last needs a non-empty array")
    return _fresh(x[:-1].copy())


def k_shape_of(x):
    return _shape_of_like(x)


def k_size_of(x, axis=None):
    shape = _shape_of_like(x)
    if axis is None:
        n = 1
        for d in shape:
            n *= d
        return n
    if not isinstance(axis, int) or isinstance(axis, bool):
        raise EvalError("size_of axis must be an int")
    if not -len(shape) <= axis < len(shape):
        raise EvalError(f"size_of axis {axis} out of range for shape {shape}")
    return shape[axis]


def parray_kernel(x):
    if isinstance(x, ZeroGrad):
        return x
    if isinstance(x, PArray):
        return x
    if isinstance(x, np.ndarray) and x.ndim >= 1:
        return pa_new(x)
    raise EvalError("parray needs an array of at least one dimension")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return "(" + ", ".join(format_value(x) for x in v) + ")"
    if isinstance(v, np.ndarray):
        return np.array2string(v, separator=", ")
    return str(v)


def k_print(*args):
    print(" ".join(format_value(a) for a in args))
    return 0


def tape_push(tape, value, label):
    if not isinstance(tape, Tape):
        raise EvalError("push needs a tape as its first argument")
    if not isinstance(label, str):
        raise EvalError("push label must be a string")
    tape.push(value, label)
    return 0


def tape_pop(tape, label):
    if not isinstance(tape, Tape):
        raise EvalError("pop needs a tape as its first argument")
    if not isinstance(label, str):
        raise EvalError("pop label must be a string")
    return tape.pop(label)


# --------------------------------------------------------------------------
# Builtin registry

# name -> (min arity, max arity or None for variadic, fn)
BUILTINS: dict[str, tuple[int, int | None, object]] = {
    "add": (2, 2, k_add),
    "multiply": (2, 2, k_multiply),
    "dot": (2, 2, k_dot),
    "tanh": (1, 1, k_tanh),
    "exp": (1, 1, k_exp),
    "log": (1, 1, k_log),
    "sum": (1, 2, k_sum),
    "mean": (1, 2, k_mean),
    "zeros": (1, 1, k_zeros),
    "append": (2, 2, k_append),
    "setitem": (3, 3, k_setitem),
    "shape_of": (1, 1, k_shape_of),
    "size_of": (1, 2, k_size_of),
    "copy": (1, 1, copy_value),
    "parray": (1, 1, parray_kernel),
    "print": (0, None, k_print),
    "init_grad": (1, 1, init_grad),
    "add_grad": (2, 2, add_grad),
    "unbroadcast": (2, 2, unbroadcast),
    "unreduce": (2, 3, unreduce),
    "scatter_add": (4, 4, scatter_add),
    "drop_last": (1, 1, drop_last),
    "grad_dot_lhs": (3, 3, grad_dot_lhs),
    "grad_dot_rhs": (3, 3, grad_dot_rhs),
    "push": (3, 3, tape_push),
    "pop": (2, 2, tape_pop),
    "stack": (0, 0, None),  # special form: yields the ambient tape
}

# Builtins that tolerate ZeroGrad arguments. Everything else treats an
# incoming ZeroGrad as a transformer bug.
ZERO_TOLERANT = {
    "init_grad",
    "add_grad",
    "unbroadcast",
    "unreduce",
    "scatter_add",
    "drop_last",
    "copy",
    "setitem",
    "append",
    "dot",
    "sum",
    "mean",
    "parray",
    "grad_dot_lhs",
    "grad_dot_rhs",
    "push",
    "print",
}

# Calls whose value is intentionally discarded when used as a statement.
SIDE_EFFECT_BUILTINS = {"push", "print"}

BUILTIN_NAMES = frozenset(BUILTINS)
