"""Persistent arrays: a version tree with one materialized root.

Every version of the array is a node in a tree. Exactly one node, the root,
holds the full contents in a flat buffer; every edge stores a small invertible
delta (row write, row append, or last-row drop). Reading or writing any
version first reroots the tree onto it by applying the deltas along the path
while flipping edge orientation, so repeated access to the latest version is
O(1) amortized and a row update is O(row), not O(array).

Handles are reference counted; releasing a handle prunes versions that are no
longer reachable from any live handle (including advancing the root into its
only child when the root itself is dead). Instrumentation counts element
allocations, live elements, and delta applications for the scaling benchmark
and the memory-bound tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvalError


@dataclass(slots=True)
class SetRow:
    index: int  # absolute (non-negative) row index
    old: object  # row contents before / after, copies
    new: object


@dataclass(slots=True)
class AppendRow:
    row: object


@dataclass(slots=True)
class DropLastRow:
    row: object


Delta = SetRow | AppendRow | DropLastRow


def _invert(d: Delta) -> Delta:
    if isinstance(d, SetRow):
        return SetRow(d.index, d.new, d.old)
    if isinstance(d, AppendRow):
        return DropLastRow(d.row)
    return AppendRow(d.row)


def _delta_elements(d: Delta, rowsize: int) -> int:
    return 2 * rowsize if isinstance(d, SetRow) else rowsize


class Counters:
    __slots__ = ("elements_allocated", "live_elements", "deltas_applied")

    def __init__(self):
        self.reset()

    def reset(self):
        self.elements_allocated = 0
        self.live_elements = 0
        self.deltas_applied = 0

    @property
    def bytes_allocated(self):
        return 8 * self.elements_allocated

    @property
    def live_bytes(self):
        return 8 * self.live_elements


PA_COUNTERS = Counters()


class _Node:
    __slots__ = ("parent", "delta", "children", "handles", "nrows")

    def __init__(self, nrows: int):
        self.parent: _Node | None = None
        self.delta: Delta | None = None  # transforms parent contents into ours
        self.children: list[_Node] = []
        self.handles = 0
        self.nrows = nrows


class _Tree:
    __slots__ = ("buf", "row_shape", "rowsize", "root")

    def __init__(self, arr: np.ndarray):
        self.row_shape = arr.shape[1:]
        self.rowsize = int(np.prod(self.row_shape)) if self.row_shape else 1
        self.buf = np.empty(arr.shape, dtype=np.float64)
        self.buf[...] = arr
        n = arr.shape[0] * self.rowsize
        PA_COUNTERS.elements_allocated += n
        PA_COUNTERS.live_elements += n
        self.root = _Node(arr.shape[0])

    def _capacity(self) -> int:
        return self.buf.shape[0]

    def _ensure_capacity(self, need: int):
        cap = self._capacity()
        if need <= cap:
            return
        newcap = max(need, 2 * cap, 4)
        newbuf = np.empty((newcap,) + self.row_shape, dtype=np.float64)
        newbuf[:self.root.nrows] = self.buf[:self.root.nrows]
        PA_COUNTERS.elements_allocated += newcap * self.rowsize
        PA_COUNTERS.live_elements += (newcap - cap) * self.rowsize
        self.buf = newbuf

    def _apply(self, d: Delta, nrows: int) -> int:
        """Apply a delta to the buffer; returns the new row count."""
        PA_COUNTERS.deltas_applied += 1
        if isinstance(d, SetRow):
            self.buf[d.index] = d.new
            return nrows
        if isinstance(d, AppendRow):
            self._ensure_capacity(nrows + 1)
            self.buf[nrows] = d.row
            return nrows + 1
        return nrows - 1

    def reroot(self, target: _Node):
        if target is self.root:
            return
        path = []
        n = target
        while n.parent is not None:
            path.append(n)
            n = n.parent
        if n is not self.root:
            raise EvalError("persistent array version belongs to a different tree")
        nrows = self.root.nrows
        for child in reversed(path):
            parent = child.parent
            nrows = self._apply(child.delta, nrows)
            parent.children.remove(child)
            parent.parent = child
            parent.delta = _invert(child.delta)
            child.children.append(parent)
            child.parent = None
            child.delta = None
        self.root = target

    def collect(self, node: _Node):
        """Free dead leaves starting at node, then advance a dead root."""
        while (
            node is not self.root
            and node.handles == 0
            and not node.children
        ):
            parent = node.parent
            parent.children.remove(node)
            PA_COUNTERS.live_elements -= _delta_elements(node.delta, self.rowsize)
            node.parent = None
            node.delta = None
            node = parent
        while self.root.handles == 0 and len(self.root.children) == 1:
            old = self.root
            self.reroot(old.children[0])
            old.parent.children.remove(old)
            PA_COUNTERS.live_elements -= _delta_elements(old.delta, self.rowsize)
            old.parent = None
            old.delta = None
        if self.root.handles == 0 and not self.root.children and self.buf is not None:
            PA_COUNTERS.live_elements -= self._capacity() * self.rowsize
            self.buf = None


class PArray:
    """A reference-counted handle on one version of a persistent array."""

    __slots__ = ("_tree", "_node", "_released")

    def __init__(self, tree: _Tree, node: _Node):
        self._tree = tree
        self._node = node
        self._released = False
        node.handles += 1

    @property
    def shape(self) -> tuple:
        return (self._node.nrows,) + self._tree.row_shape

    def checkout(self) -> np.ndarray:
        """Materialize this version as a fresh dense array (reroots)."""
        self._check()
        t = self._tree
        t.reroot(self._node)
        return t.buf[: self._node.nrows].copy()

    def _check(self):
        if self._released:
            raise EvalError("use of a released persistent array handle")

    def __repr__(self):
        state = "released" if self._released else f"shape={self.shape}"
        return f"<parray {state}>"


def pa_new(arr) -> PArray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 1:
        raise EvalError("persistent arrays need at least one dimension")
    tree = _Tree(arr)
    return PArray(tree, tree.root)


def _advance(h: PArray, delta: Delta, nrows: int) -> PArray:
    """Create the version reached from h by delta and make it the root."""
    t = h._tree
    t.reroot(h._node)
    node = _Node(nrows)
    base = h._node
    nrows_check = t._apply(delta, base.nrows)
    assert nrows_check == nrows
    base.parent = node
    base.delta = _invert(delta)
    node.children.append(base)
    PA_COUNTERS.elements_allocated += _delta_elements(delta, t.rowsize)
    PA_COUNTERS.live_elements += _delta_elements(delta, t.rowsize)
    t.root = node
    return PArray(t, node)


def _coerce_row(t: _Tree, v) -> np.ndarray | float:
    if isinstance(v, PArray):
        v = v.checkout()
    if isinstance(v, np.ndarray):
        if v.shape != t.row_shape:
            raise EvalError(f"row shape {v.shape} does not fit persistent rows {t.row_shape}")
        return v.astype(np.float64, copy=True)
    if isinstance(v, (float, int)) and not isinstance(v, bool):
        if t.row_shape == ():
            return float(v)
        return np.full(t.row_shape, float(v))
    raise EvalError(f"row value must be numeric, got {type(v).__name__}")


def _norm_index(h: PArray, i) -> int:
    if not isinstance(i, int) or isinstance(i, bool):
        raise EvalError("persistent array index must be an int")
    n = h._node.nrows
    j = i + n if i < 0 else i
    if not 0 <= j < n:
        raise EvalError(f"index {i} out of range for {n} rows")
    return j


def pa_setitem(h: PArray, i, v) -> PArray:
    h._check()
    j = _norm_index(h, i)
    t = h._tree
    t.reroot(h._node)
    old = np.copy(t.buf[j])
    if t.row_shape == ():
        old = float(old)
    new = _coerce_row(t, v)
    return _advance(h, SetRow(j, old, new), h._node.nrows)


def pa_append(h: PArray, v) -> PArray:
    h._check()
    t = h._tree
    return _advance(h, AppendRow(_coerce_row(t, v)), h._node.nrows + 1)


def pa_drop_last(h: PArray) -> PArray:
    h._check()
    if h._node.nrows == 0:
        raise EvalError("drop_last on an empty persistent array")
    t = h._tree
    t.reroot(h._node)
    row = np.copy(t.buf[h._node.nrows - 1])
    if t.row_shape == ():
        row = float(row)
    return _advance(h, DropLastRow(row), h._node.nrows - 1)


def pa_row(h: PArray, i):
    h._check()
    j = _norm_index(h, i)
    t = h._tree
    t.reroot(h._node)
    r = t.buf[j]
    if isinstance(r, np.ndarray):
        return r.copy()
    return float(r)


def pa_checkout(h: PArray) -> np.ndarray:
    return h.checkout()


def pa_release(h: PArray):
    """Drop one handle; prune versions no longer reachable from any handle."""
    h._check()
    h._released = True
    node = h._node
    if node.handles <= 0:
        raise EvalError("persistent array handle count underflow")
    node.handles -= 1
    h._tree.collect(node)


def pa_live_versions(h: PArray) -> int:
    """Number of versions currently stored in h's tree (testing hook)."""
    t = h._tree
    count = 0
    stack = [t.root]
    while stack:
        n = stack.pop()
        count += 1
        stack.extend(n.children)
    return count
