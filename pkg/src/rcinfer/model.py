"""Recursive Cardinality model definitions.

An RC model over ``D`` binary variables is a product of per-variable unary
log-potentials and cardinality log-potentials ``f_k(sum_{d in s_k} y_d)``
attached to a laminar (nested) family of subsets.  Every laminar family can
be embedded in a binary tree whose leaves are the variables; each subset then
becomes one tree node and its cardinality table a unary potential on that
node's count.

Trees are stored as flat integer arrays.  Leaves are additionally laid out in
an in-order ``order`` array so that the leaf set of any node is the
contiguous slice ``order[lo[i]:hi[i]]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

NEG_INF = -np.inf


class ModelError(ValueError):
    """Raised when a model, tree, or subset family is malformed."""


# ---------------------------------------------------------------------------
# Cardinality tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CardinalityTable:
    """Log-potential over the counts ``0..n`` of an ``n``-variable subset."""

    log_f: np.ndarray

    def __post_init__(self):
        log_f = np.array(self.log_f, dtype=np.float64).reshape(-1)
        if log_f.size == 0:
            raise ModelError("cardinality table must have at least one entry")
        if np.any(np.isnan(log_f)) or np.any(log_f == np.inf):
            raise ModelError("cardinality table entries must be finite or -inf")
        if not np.any(np.isfinite(log_f)):
            raise ModelError("cardinality table has no finite entry (zero mass)")
        log_f.setflags(write=False)
        object.__setattr__(self, "log_f", log_f)

    @property
    def n(self) -> int:
        return self.log_f.size - 1

    def shifted_weights(self) -> tuple[np.ndarray, float]:
        """Return ``(exp(log_f - m), m)`` with ``m`` the largest entry."""
        m = float(np.max(self.log_f))
        return np.exp(self.log_f - m), m

    def __len__(self):
        return self.log_f.size


def noisy_or_table(n: int, eps: float, lam: float, t: int) -> CardinalityTable:
    """Noisy-OR link ``P(t | count)`` as a cardinality table.

    ``P(t=1 | c) = 1 - (1 - eps) (1 - lam)**c``; the ``t=0`` table is its
    complement.  Zero probabilities map to ``-inf``.
    """
    if not 0.0 <= eps <= 1.0 or not 0.0 <= lam <= 1.0:
        raise ModelError("eps and lam must lie in [0, 1]")
    if t not in (0, 1):
        raise ModelError("label t must be 0 or 1")
    c = np.arange(n + 1)
    with np.errstate(divide="ignore"):
        if lam < 1.0:
            log_off = np.log1p(-eps) + c * np.log1p(-lam)
        else:
            log_off = np.where(c == 0, np.log1p(-eps), NEG_INF)
        if t == 0:
            return CardinalityTable(log_off)
        return CardinalityTable(np.log(-np.expm1(log_off)))


def normal_table(n: int, mu: float, sigma: float, t: int) -> CardinalityTable:
    """Gaussian-shaped preference over the active fraction ``c / n``.

    The ``t=0`` table peaks at fraction 0, the ``t=1`` table at ``mu``.
    """
    if n <= 0:
        raise ModelError("normal_table needs n >= 1")
    if sigma <= 0:
        raise ModelError("sigma must be positive")
    if t not in (0, 1):
        raise ModelError("label t must be 0 or 1")
    center = mu if t == 1 else 0.0
    frac = np.arange(n + 1) / n
    return CardinalityTable(-((frac - center) ** 2) / (2.0 * sigma**2))


def hard_count_table(n: int, allowed: Iterable[int]) -> CardinalityTable:
    """Indicator table: log 1 on allowed counts, ``-inf`` elsewhere."""
    allowed = sorted(set(int(a) for a in allowed))
    if not allowed:
        raise ModelError("allowed count set is empty")
    if allowed[0] < 0 or allowed[-1] > n:
        raise ModelError(f"allowed counts must lie in 0..{n}")
    log_f = np.full(n + 1, NEG_INF)
    log_f[allowed] = 0.0
    return CardinalityTable(log_f)


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


class TreeSpec:
    """Binary tree whose leaves are the variables ``0..D-1``.

    ``left[i]``/``right[i]`` are child ids (-1 at leaves) and ``var[i]`` is
    the variable bound to a leaf (-1 at internal nodes).  Construction
    validates the structure; instances are treated as immutable.
    """

    def __init__(self, left, right, var, root: int):
        self.left = np.array(left, dtype=np.int64).reshape(-1)
        self.right = np.array(right, dtype=np.int64).reshape(-1)
        self.var = np.array(var, dtype=np.int64).reshape(-1)
        self.root = int(root)
        self._validate()
        for a in (self.left, self.right, self.var, self.parent, self.preorder,
                  self.order, self.lo, self.hi, self.size, self.leaf_of_var):
            a.setflags(write=False)

    @classmethod
    def from_records(cls, records: Sequence[Mapping], root_id) -> "TreeSpec":
        """Build from ``{id, left, right, var}`` records with arbitrary ids.

        Node ids of the result are positions in ``records``.
        """
        ids = [r["id"] for r in records]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate node ids")
        index = {nid: i for i, nid in enumerate(ids)}
        if root_id not in index:
            raise ModelError(f"root id {root_id!r} not among nodes")

        def lookup(nid, owner):
            if nid is None:
                return -1
            if nid not in index:
                raise ModelError(f"node {owner!r}: unknown child id {nid!r}")
            return index[nid]

        left = [lookup(r.get("left"), r["id"]) for r in records]
        right = [lookup(r.get("right"), r["id"]) for r in records]
        var = [-1 if r.get("var") is None else int(r["var"]) for r in records]
        return cls(left, right, var, index[root_id])

    def _validate(self):
        m = self.left.size
        if self.right.size != m or self.var.size != m or m == 0:
            raise ModelError("tree arrays must be nonempty and of equal length")
        if not 0 <= self.root < m:
            raise ModelError("root id out of range")
        if np.any(self.left >= m) or np.any(self.right >= m):
            bad = int(np.flatnonzero((self.left >= m) | (self.right >= m))[0])
            raise ModelError(f"node {bad}: child id out of range")
        is_leaf = self.left < 0
        mismatch = is_leaf != (self.right < 0)
        if mismatch.any():
            bad = int(np.flatnonzero(mismatch)[0])
            raise ModelError(f"node {bad}: internal nodes need exactly two children")
        mismatch = is_leaf != (self.var >= 0)
        if mismatch.any():
            bad = int(np.flatnonzero(mismatch)[0])
            raise ModelError(f"node {bad}: variables are bound to leaves only")
        D = int(is_leaf.sum())
        if m != 2 * D - 1:
            raise ModelError(f"{m} nodes cannot form a binary tree over {D} leaves")
        if not np.array_equal(np.sort(self.var[is_leaf]), np.arange(D)):
            raise ModelError("leaves must bind each variable 0..D-1 exactly once")

        left, right = self.left.tolist(), self.right.tolist()
        parent = [-1] * m
        seen = [False] * m
        preorder = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            if seen[i]:
                raise ModelError(f"node {i}: reached twice (not a tree)")
            seen[i] = True
            preorder.append(i)
            if left[i] >= 0:
                for c in (right[i], left[i]):
                    if c == self.root or parent[c] >= 0:
                        raise ModelError(f"node {c}: has more than one parent")
                    parent[c] = i
                    stack.append(c)
        if len(preorder) != m:
            bad = seen.index(False)
            raise ModelError(f"node {bad}: not reachable from the root")

        lo = [0] * m
        hi = [0] * m
        pos = 0
        var = self.var.tolist()
        order = []
        for i in preorder:  # leaves in preorder are left-to-right
            if left[i] < 0:
                lo[i], hi[i] = pos, pos + 1
                order.append(var[i])
                pos += 1
        for i in reversed(preorder):
            if left[i] >= 0:
                lo[i], hi[i] = lo[left[i]], hi[right[i]]
        self.parent = np.asarray(parent, dtype=np.int64)
        self.preorder = np.asarray(preorder, dtype=np.int64)
        self.order = np.asarray(order, dtype=np.int64)
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        self.size = self.hi - self.lo
        self.num_vars = D
        leaf_of_var = np.empty(D, dtype=np.int64)
        leaf_of_var[self.var[is_leaf]] = np.flatnonzero(is_leaf)
        self.leaf_of_var = leaf_of_var

    @property
    def num_nodes(self) -> int:
        return self.left.size

    def is_leaf(self, i: int) -> bool:
        return bool(self.left[i] < 0)

    def internal_nodes(self) -> np.ndarray:
        """Internal node ids in preorder."""
        return self.preorder[self.left[self.preorder] >= 0]

    def leaves_of(self, i: int) -> np.ndarray:
        """Sorted variable indices below node ``i``."""
        return np.sort(self.order[self.lo[i]:self.hi[i]])

    def heights(self) -> np.ndarray:
        """Longest distance to a leaf, per node."""
        left, right = self.left.tolist(), self.right.tolist()
        h = [0] * self.num_nodes
        for i in reversed(self.preorder.tolist()):
            if left[i] >= 0:
                h[i] = 1 + max(h[left[i]], h[right[i]])
        return np.asarray(h, dtype=np.int64)

    def depth(self) -> int:
        return int(self.heights()[self.root])

    def node_for_subset(self, subset: Iterable[int]) -> int:
        """Id of the node whose leaf set equals ``subset``."""
        s = np.unique(np.asarray(list(subset), dtype=np.int64))
        if s.size == 0 or s[0] < 0 or s[-1] >= self.num_vars:
            raise ModelError(f"invalid subset {s.tolist()}")
        i = int(self.leaf_of_var[s[0]])
        while self.size[i] < s.size and self.parent[i] >= 0:
            i = int(self.parent[i])
        if self.size[i] == s.size and np.array_equal(self.leaves_of(i), s):
            return i
        raise ModelError(f"no tree node covers exactly {s.tolist()}")

    def __eq__(self, other):
        if not isinstance(other, TreeSpec):
            return NotImplemented
        return (self.root == other.root and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right)
                and np.array_equal(self.var, other.var))

    __hash__ = None

    def __repr__(self):
        return f"TreeSpec(num_vars={self.num_vars}, depth={self.depth()})"


def balanced_tree(D: int) -> TreeSpec:
    """Balanced tree over variables ``0..D-1``.

    A node over m leaves gives its left child ``ceil(m/2)`` of them, so the
    depth is ``ceil(log2 D)``.  Node ids are assigned in preorder.
    """
    if D < 1:
        raise ModelError("balanced_tree needs D >= 1")
    left = [-1] * (2 * D - 1)
    right = [-1] * (2 * D - 1)
    var = [-1] * (2 * D - 1)
    stack = [(0, 0, D)]  # (node id, first variable, leaf count)
    while stack:
        node, start, m = stack.pop()
        if m == 1:
            var[node] = start
            continue
        k = (m + 1) // 2
        left[node] = node + 1
        right[node] = node + 2 * k  # the left subtree holds 2k - 1 nodes
        stack.append((node + 2 * k, start + k, m - k))
        stack.append((node + 1, start, k))
    return TreeSpec(left, right, var, 0)


# ---------------------------------------------------------------------------
# Laminar subset families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetFamily:
    """A collection of distinct, nonempty subsets of ``0..D-1``."""

    subsets: tuple
    D: int

    def __post_init__(self):
        if self.D < 1:
            raise ModelError("D must be positive")
        normalized = []
        for s in self.subsets:
            t = tuple(sorted(set(int(x) for x in s)))
            if not t:
                raise ModelError("subsets must be nonempty")
            if t[0] < 0 or t[-1] >= self.D:
                raise ModelError(f"subset {list(t)} has an index outside 0..{self.D - 1}")
            normalized.append(t)
        if len(set(normalized)) != len(normalized):
            raise ModelError("duplicate subsets")
        object.__setattr__(self, "subsets", tuple(normalized))

    def __len__(self):
        return len(self.subsets)


def _laminar_parents(family: SubsetFamily):
    """Smallest strict superset of every subset, or None if not laminar.

    Processes subsets by decreasing size; in a laminar family all members of
    a subset must share the same current smallest container.
    """
    order = sorted(range(len(family.subsets)), key=lambda k: -len(family.subsets[k]))
    owner = [-1] * family.D
    parents = [-1] * len(family.subsets)
    for k in order:
        s = family.subsets[k]
        first = owner[s[0]]
        if any(owner[x] != first for x in s):
            return None, owner
        parents[k] = first
        for x in s:
            owner[x] = k
    return parents, owner


def _violating_pair(family: SubsetFamily):
    sets = [set(s) for s in family.subsets]
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            inter = sets[a] & sets[b]
            if inter and inter != sets[a] and inter != sets[b]:
                return family.subsets[a], family.subsets[b]
    return None


def validate_nested(family: SubsetFamily) -> bool:
    """True iff every pair of subsets is disjoint or ordered by containment."""
    parents, _ = _laminar_parents(family)
    return parents is not None


def align_tree(family: SubsetFamily) -> TreeSpec:
    """Binary tree in which every subset of a laminar family is one node.

    Children of each subset (nested subsets and loose variables) are combined
    by a size-weighted balanced split.  Singletons map to leaves and a subset
    equal to ``0..D-1`` maps to the root.
    """
    parents, owner = _laminar_parents(family)
    if parents is None:
        a, b = _violating_pair(family)
        raise ModelError(f"subsets {list(a)} and {list(b)} overlap without nesting")
    subsets = family.subsets
    # items: ("v", var) or ("s", subset index); -1 is the full variable set
    children = {-1: []}
    for k in range(len(subsets)):
        children[k] = []
    for k, p in enumerate(parents):
        children[p].append(("s", k))
    for x, k in enumerate(owner):
        children[k].append(("v", x))

    def first_var(item):
        return item[1] if item[0] == "v" else subsets[item[1]][0]

    def weight(item):
        return 1 if item[0] == "v" else len(subsets[item[1]])

    for items in children.values():
        items.sort(key=first_var)

    left, right, var = [], [], []

    def new_node():
        left.append(-1)
        right.append(-1)
        var.append(-1)
        return len(left) - 1

    # explicit stack; popping left before right yields preorder ids
    stack = [(children[-1], -1, None)]
    while stack:
        items, parent, side = stack.pop()
        while len(items) == 1 and items[0][0] == "s":
            items = children[items[0][1]]
        if len(items) == 1:
            node = new_node()
            var[node] = items[0][1]
        else:
            node = new_node()
            split = _balanced_split([weight(it) for it in items])
            stack.append((items[split:], node, "r"))
            stack.append((items[:split], node, "l"))
        if parent >= 0:
            if side == "l":
                left[parent] = node
            else:
                right[parent] = node
    return TreeSpec(left, right, var, 0)


def _balanced_split(weights: Sequence[int]) -> int:
    """Split index with left weight closest to half; ties favour the heavier left."""
    total = sum(weights)
    best_k, best_gap = 1, math.inf
    acc = 0
    for k in range(1, len(weights)):
        acc += weights[k - 1]
        gap = abs(2 * acc - total)
        if gap < best_gap:
            best_k, best_gap = k, gap
        elif gap == best_gap and 2 * acc > total:
            best_k = k
    return best_k


# ---------------------------------------------------------------------------
# RC models
# ---------------------------------------------------------------------------


def _as_table(t) -> CardinalityTable:
    return t if isinstance(t, CardinalityTable) else CardinalityTable(t)


class RCModel:
    """Unary log-potentials plus cardinality tables on the nodes of a tree.

    ``unary`` has shape ``(D, 2)`` holding ``(log theta_d(0), log theta_d(1))``.
    ``tables`` maps node ids to tables whose ``n`` equals the node's leaf
    count.  Tables given on leaves are folded into the unary potentials.
    """

    def __init__(self, unary, tree: TreeSpec, tables: Mapping | None = None):
        unary = np.array(unary, dtype=np.float64)
        if unary.ndim == 1:
            unary = np.column_stack([np.zeros_like(unary), unary])
        if unary.shape != (tree.num_vars, 2):
            raise ModelError(
                f"unary must have shape ({tree.num_vars}, 2), got {unary.shape}")
        if np.any(np.isnan(unary)) or np.any(unary == np.inf):
            raise ModelError("unary log-potentials must be finite or -inf")
        internal = {}
        for node, table in (tables or {}).items():
            node = int(node)
            if not 0 <= node < tree.num_nodes:
                raise ModelError(f"table attached to unknown node {node}")
            table = _as_table(table)
            if table.n != tree.size[node]:
                raise ModelError(
                    f"node {node}: table covers counts 0..{table.n} but the node "
                    f"has {tree.size[node]} leaves")
            if tree.left[node] < 0:
                unary[tree.var[node]] += table.log_f
            else:
                internal[node] = table
        dead = ~np.isfinite(unary).any(axis=1)
        if dead.any():
            raise ModelError(f"variable {int(np.flatnonzero(dead)[0])} has zero mass")
        unary.setflags(write=False)
        self.unary = unary
        self.tree = tree
        self.tables: dict[int, CardinalityTable] = internal

    @property
    def D(self) -> int:
        return self.tree.num_vars

    @classmethod
    def standard(cls, unary, table) -> "RCModel":
        """One cardinality potential over all variables on a balanced tree."""
        unary = np.asarray(unary, dtype=np.float64)
        tree = balanced_tree(unary.shape[0])
        return cls(unary, tree, {tree.root: table})

    @classmethod
    def from_family(cls, unary, family: SubsetFamily, tables: Sequence) -> "RCModel":
        """Align ``family`` into a tree and attach ``tables[k]`` to subset k."""
        if len(tables) != len(family):
            raise ModelError("need one table per subset")
        tree = align_tree(family)
        mapped = {}
        for s, t in zip(family.subsets, tables):
            mapped[tree.node_for_subset(s)] = t
        return cls(unary, tree, mapped)

    def table_weights(self):
        """Per-node ``(exp(log_f - shift), shift)``; ``None`` where no table."""
        cached = getattr(self, "_table_weights", None)
        if cached is None:
            cached = [None] * self.tree.num_nodes
            for node, table in self.tables.items():
                cached[node] = table.shifted_weights()
            self._table_weights = cached
        return cached

    def log_weight(self, y) -> np.ndarray:
        """Unnormalized log-probability of configurations ``y`` (``(..., D)``)."""
        y = np.asarray(y, dtype=np.int64)
        with np.errstate(invalid="ignore"):
            out = np.where(y == 1, self.unary[:, 1], self.unary[:, 0]).sum(axis=-1)
        yo = y[..., self.tree.order]
        csum = np.concatenate([np.zeros(yo.shape[:-1] + (1,), dtype=np.int64),
                               np.cumsum(yo, axis=-1)], axis=-1)
        for node, table in self.tables.items():
            counts = csum[..., self.tree.hi[node]] - csum[..., self.tree.lo[node]]
            out = out + table.log_f[counts]
        return out

    def __repr__(self):
        return f"RCModel(D={self.D}, tables={len(self.tables)})"


# ---------------------------------------------------------------------------
# JSON model files
# ---------------------------------------------------------------------------


def _encode_float(x: float):
    return "-inf" if x == NEG_INF else float(x)


def _decode_float(x, where: str) -> float:
    if isinstance(x, str):
        if x.strip().lower() in ("-inf", "-infinity"):
            return NEG_INF
        raise ModelError(f"{where}: unrecognized value {x!r}")
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ModelError(f"{where}: expected a number, got {x!r}")
    return float(x)


def model_to_dict(model: RCModel) -> dict:
    tree = model.tree
    left, right = tree.left.tolist(), tree.right.tolist()

    def node_dict(i):
        return {
            "vars": tree.leaves_of(i).tolist(),
            "log_f": ([_encode_float(v) for v in model.tables[i].log_f]
                      if i in model.tables else None),
        }

    root = node_dict(tree.root)
    stack = [(tree.root, root)]
    while stack:
        i, d = stack.pop()
        if left[i] >= 0:
            kids = [node_dict(left[i]), node_dict(right[i])]
            d["children"] = kids
            stack.append((right[i], kids[1]))
            stack.append((left[i], kids[0]))
    return {
        "num_vars": model.D,
        "unaries": [[_encode_float(a), _encode_float(b)] for a, b in model.unary],
        "tree": root,
    }


def model_from_dict(doc: Mapping) -> RCModel:
    """Parse the JSON model format; node ids are preorder positions."""
    try:
        D = int(doc["num_vars"])
        unaries = doc["unaries"]
        root = doc["tree"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"model file missing field: {exc}") from None
    if D < 1 or len(unaries) != D:
        raise ModelError(f"expected {D} unary pairs, found {len(unaries)}")
    unary = np.empty((D, 2))
    for d, pair in enumerate(unaries):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ModelError(f"unaries[{d}] must be a pair")
        unary[d] = [_decode_float(v, f"unaries[{d}]") for v in pair]

    left, right, var, tables = [], [], [], {}
    stack = [(root, -1, None)]
    while stack:
        node, parent, side = stack.pop()
        nid = len(left)
        label = f"node {nid}"
        if not isinstance(node, Mapping) or "vars" not in node:
            raise ModelError(f"{label}: expected an object with 'vars'")
        vs = node["vars"]
        if (not isinstance(vs, list) or not vs
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in vs)):
            raise ModelError(f"{label}: 'vars' must be a nonempty list of integers")
        if vs != sorted(set(vs)) or vs[0] < 0 or vs[-1] >= D:
            raise ModelError(f"{label} {vs}: 'vars' must be sorted, distinct, in 0..{D - 1}")
        label = f"node {nid} {vs}"
        left.append(-1)
        right.append(-1)
        var.append(-1)
        if parent >= 0:
            (left if side == "l" else right)[parent] = nid
        if node.get("log_f") is not None:
            raw = node["log_f"]
            if not isinstance(raw, list):
                raise ModelError(f"{label}: 'log_f' must be a list or null")
            if len(raw) != len(vs) + 1:
                raise ModelError(
                    f"{label}: log_f has {len(raw)} entries, expected {len(vs) + 1}")
            try:
                tables[nid] = CardinalityTable([_decode_float(v, label) for v in raw])
            except ModelError as exc:
                raise ModelError(f"{label}: {exc}") from None
        kids = node.get("children")
        if kids is None:
            if len(vs) != 1:
                raise ModelError(f"{label}: leaf must cover exactly one variable")
            var[nid] = vs[0]
            continue
        if not isinstance(kids, list) or len(kids) != 2:
            raise ModelError(f"{label}: internal nodes need exactly two children")
        try:
            kv = [k["vars"] for k in kids]
            merged = sorted(kv[0] + kv[1])
        except (TypeError, KeyError):
            raise ModelError(f"{label}: malformed child") from None
        if merged != vs:
            raise ModelError(f"{label}: children {kv[0]} and {kv[1]} do not partition it")
        stack.append((kids[1], nid, "r"))
        stack.append((kids[0], nid, "l"))
    try:
        tree = TreeSpec(left, right, var, 0)
    except ModelError as exc:
        raise ModelError(f"invalid tree: {exc}") from None
    return RCModel(unary, tree, tables)


def load_model(path) -> RCModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def dump_model(model: RCModel, fh) -> None:
    json.dump(model_to_dict(model), fh)
