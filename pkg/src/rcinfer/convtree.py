"""Sum-product inference on the convolution tree.

Every internal tree node carries an integer count ``z_p = z_l + z_r``.  The
upward message into ``z_p`` is the discrete convolution of the children's
messages, multiplied by the node's cardinality table; the downward message
to a child is a correlation of the parent's outside message with the
sibling's upward message.  With balanced trees and FFT convolutions a full
inward/outward pass costs O(D log^2 D).

Messages are kept normalized to unit sum; the normalizers are accumulated in
log space.  Nodes are processed level by level, grouped by child sizes, so
that the many short messages near the leaves are handled as batched numpy
operations rather than one Python call per node.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import CardinalityTable, RCModel, TreeSpec, balanced_tree

BACKENDS = ("auto", "fft", "naive")

# Below this length the direct O(nm) kernel beats an FFT.
FFT_THRESHOLD = 64
# FFT outputs smaller than this fraction of the row maximum are rounding noise.
FFT_FLUSH = 1e-15


class ZeroMassError(ValueError):
    """The model (or a sub-model) assigns zero probability to everything."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass
class InferenceResult:
    """Marginals and log-partition value of an RC model.

    ``count_marginals`` maps internal node ids to the distribution of the
    number of active leaves below that node.
    """

    leaf_marginals: np.ndarray
    count_marginals: dict = field(default_factory=dict)
    log_z: float = 0.0
    root: int = 0

    @property
    def root_counts(self) -> np.ndarray:
        return self.count_marginals[self.root]


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _use_fft(backend: str, la: int, lb: int) -> bool:
    if backend == "fft":
        return True
    if backend == "naive":
        return False
    if backend == "auto":
        return min(la, lb) >= FFT_THRESHOLD
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


def _fft_len(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _clean(out: np.ndarray) -> np.ndarray:
    np.maximum(out, 0.0, out=out)
    peak = out.max(axis=-1, keepdims=True)
    out[out < FFT_FLUSH * peak] = 0.0
    return out


@njit(cache=True)
def _direct_conv(A, B):
    rows, la = A.shape
    lb = B.shape[1]
    out = np.zeros((rows, la + lb - 1))
    for r in range(rows):
        for j in range(lb):
            b = B[r, j]
            for k in range(la):
                out[r, j + k] += A[r, k] * b
    return out


@njit(cache=True)
def _direct_corr(P, S):
    rows, lp = P.shape
    ls = S.shape[1]
    n = lp - ls + 1
    out = np.zeros((rows, n))
    for r in range(rows):
        for j in range(ls):
            s = S[r, j]
            for k in range(n):
                out[r, k] += P[r, k + j] * s
    return out


@njit(cache=True)
def _normalize_rows(out):
    """Scale each row to unit sum in place; returns the row sums."""
    rows, n = out.shape
    tot = np.empty(rows)
    for r in range(rows):
        t = 0.0
        for k in range(n):
            t += out[r, k]
        tot[r] = t
        if t > 0.0:
            for k in range(n):
                out[r, k] /= t
    return tot


def _conv_rows(A: np.ndarray, B: np.ndarray, backend: str) -> np.ndarray:
    """Row-wise full convolution of two ``(batch, n)`` arrays."""
    la, lb = A.shape[1], B.shape[1]
    n_out = la + lb - 1
    if _use_fft(backend, la, lb):
        n = _fft_len(n_out)
        out = np.fft.irfft(np.fft.rfft(A, n) * np.fft.rfft(B, n), n)[:, :n_out]
        return _clean(out)
    return _direct_conv(np.ascontiguousarray(A), np.ascontiguousarray(B))


def _corr_rows(P: np.ndarray, S: np.ndarray, backend: str) -> np.ndarray:
    """Row-wise valid correlation: ``out[:, i] = sum_j P[:, i + j] * S[:, j]``."""
    lp, ls = P.shape[1], S.shape[1]
    if _use_fft(backend, lp, ls):
        n = _fft_len(lp + ls - 1)
        full = np.fft.irfft(np.fft.rfft(P, n) * np.fft.rfft(S[:, ::-1], n), n)
        return _clean(full[:, ls - 1:lp])
    return _direct_corr(np.ascontiguousarray(P), np.ascontiguousarray(S))


def _check_weights(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    return a


def convolve(a, b, backend: str = "auto") -> np.ndarray:
    """Full discrete convolution of two nonnegative weight vectors."""
    a = _check_weights(a, "a")
    b = _check_weights(b, "b")
    return _conv_rows(a[None, :], b[None, :], backend)[0]


def correlate(parent_msg, sibling_msg, backend: str = "auto") -> np.ndarray:
    """``out[i] = sum_j parent_msg[i + j] * sibling_msg[j]`` over valid offsets."""
    p = _check_weights(parent_msg, "parent_msg")
    s = _check_weights(sibling_msg, "sibling_msg")
    if s.size > p.size:
        raise ValueError("sibling message longer than parent message")
    return _corr_rows(p[None, :], s[None, :], backend)[0]


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def _as_slice(idx):
    if isinstance(idx, slice) or idx.size == 0:
        return idx
    if idx.size == 1:
        return slice(int(idx[0]), int(idx[0]) + 1)
    step = int(idx[1] - idx[0])
    if step > 0 and np.all(np.diff(idx) == step):
        return slice(int(idx[0]), int(idx[-1]) + 1, step)
    return idx


def _plan(children: np.ndarray, group_of: np.ndarray, row_of: np.ndarray) -> list:
    """How to gather the rows of ``children`` from per-group message arrays.

    Returns ``(group, dst, src)`` triples; ``dst`` indexes positions in
    ``children`` and ``src`` rows of that group's array.  Evenly spaced rows,
    the common case on balanced trees, become slices.
    """
    plan = []
    src_group = group_of[children]
    for g in np.unique(src_group).tolist():
        dst = np.flatnonzero(src_group == g)
        src = row_of[children[dst]]
        if dst.size == children.size:
            dst = slice(None)
        plan.append((g, _as_slice(dst), _as_slice(src)))
    return plan


class _Group:
    __slots__ = ("nodes", "lefts", "rights", "sl", "sr", "plan_l", "plan_r")

    def __init__(self, nodes, lefts, rights, sl, sr):
        self.nodes, self.lefts, self.rights, self.sl, self.sr = nodes, lefts, rights, sl, sr


class _Schedule:
    """Internal nodes grouped by (height, left size, right size).

    Group 0 holds the leaves in variable order; internal groups follow in
    order of increasing height, so children always precede parents.  Every
    node owns one row of its group's message array.
    """

    def __init__(self, tree: TreeSpec):
        m = tree.num_nodes
        self.group_of = np.zeros(m, dtype=np.int64)
        self.row_of = np.zeros(m, dtype=np.int64)
        self.leaves = tree.leaf_of_var  # leaf node of each variable
        self.row_of[self.leaves] = np.arange(self.leaves.size)
        self.groups = []
        self.widths = [2]
        heights = tree.heights()
        internal = np.flatnonzero(tree.left >= 0)
        if internal.size:
            key = np.lexsort((tree.size[tree.right[internal]],
                              tree.size[tree.left[internal]], heights[internal]))
            internal = internal[key]
            h = heights[internal]
            sl = tree.size[tree.left[internal]]
            sr = tree.size[tree.right[internal]]
            cut = np.flatnonzero((np.diff(h) != 0) | (np.diff(sl) != 0) | (np.diff(sr) != 0)) + 1
            for block in np.split(np.arange(internal.size), cut):
                nodes = internal[block]
                g = _Group(nodes, tree.left[nodes], tree.right[nodes],
                           int(sl[block[0]]), int(sr[block[0]]))
                self.groups.append(g)
                self.group_of[nodes] = len(self.groups)
                self.row_of[nodes] = np.arange(nodes.size)
                self.widths.append(g.sl + g.sr + 1)
        for g in self.groups:
            g.plan_l = _plan(g.lefts, self.group_of, self.row_of)
            g.plan_r = _plan(g.rights, self.group_of, self.row_of)


def _schedule(model: RCModel) -> _Schedule:
    sched = getattr(model.tree, "_schedule", None)
    if sched is None:
        sched = _Schedule(model.tree)
        model.tree._schedule = sched
    return sched


def _gather(arrays: list, plan: list, rows: int, width: int) -> np.ndarray:
    if len(plan) == 1:
        g, _, src = plan[0]
        return arrays[g][src]
    out = np.empty((rows, width))
    for g, dst, src in plan:
        out[dst] = arrays[g][src]
    return out


def _scatter(arrays: list, plan: list, values: np.ndarray) -> None:
    for g, dst, src in plan:
        arrays[g][src] = values[dst]


def _group_tables(model: RCModel, sched: _Schedule) -> list:
    """Per internal group: stacked shifted table weights and shifts, or None."""
    cached = getattr(model, "_group_tables", None)
    if cached is not None and cached[0] is sched:
        return cached[1]
    tw = model.table_weights()
    has = np.zeros(model.tree.num_nodes, dtype=bool)
    has[list(model.tables)] = True
    blocks = []
    for g in sched.groups:
        rows = np.flatnonzero(has[g.nodes])
        if rows.size == 0:
            blocks.append(None)
            continue
        W = np.ones((g.nodes.size, g.sl + g.sr + 1))
        shift = np.zeros(g.nodes.size)
        for r in rows.tolist():
            W[r], shift[r] = tw[int(g.nodes[r])]
        blocks.append((W, shift))
    model._group_tables = (sched, blocks)
    return blocks


class NodeMessages:
    """Per-node view of messages stored as one array per schedule group."""

    def __init__(self, arrays: list, sched: _Schedule):
        self.arrays = arrays
        self._sched = sched

    def __getitem__(self, node: int) -> np.ndarray:
        return self.arrays[self._sched.group_of[node]][self._sched.row_of[node]]

    def __len__(self) -> int:
        return self._sched.group_of.size


# ---------------------------------------------------------------------------
# Passes
# ---------------------------------------------------------------------------


@dataclass
class UpState:
    """Normalized upward messages (own table included) and their log-scales."""

    messages: NodeMessages
    log_scale: np.ndarray
    root: int

    @property
    def log_z(self) -> float:
        return float(self.log_scale[self.root])


def upward_pass(model: RCModel, backend: str = "auto") -> UpState:
    """Compute the upward message of every node, leaves first."""
    tree = model.tree
    sched = _schedule(model)
    tables = _group_tables(model, sched)
    log_scale = np.zeros(tree.num_nodes)

    U = model.unary
    top = np.maximum(U[:, 0], U[:, 1])
    W = np.exp(U - top[:, None])
    s = W[:, 0] + W[:, 1]
    W /= s[:, None]
    log_scale[sched.leaves] = top + np.log(s)
    arrays = [W]

    for g, tab in zip(sched.groups, tables):
        rows = g.nodes.size
        A = _gather(arrays, g.plan_l, rows, g.sl + 1)
        B = _gather(arrays, g.plan_r, rows, g.sr + 1)
        out = _conv_rows(A, B, backend)
        ls = log_scale[g.lefts] + log_scale[g.rights]
        if tab is not None:
            out *= tab[0]
            ls += tab[1]
        tot = _normalize_rows(out)
        if not tot.min() > 0:
            bad = int(g.nodes[np.flatnonzero(~(tot > 0))[0]])
            raise ZeroMassError(
                f"node {bad} (variables {tree.leaves_of(bad).tolist()[:8]}...) "
                f"has zero mass", node=bad)
        log_scale[g.nodes] = ls + np.log(tot)
        arrays.append(out)
    return UpState(NodeMessages(arrays, sched), log_scale, tree.root)


def downward_pass(model: RCModel, up: UpState, backend: str = "auto") -> NodeMessages:
    """Normalized downward messages (everything outside each node's subtree).

    The message at the root is uniform.
    """
    sched = _schedule(model)
    tables = _group_tables(model, sched)
    ups = up.messages.arrays
    down = [np.empty((ups[k].shape[0], w)) for k, w in enumerate(sched.widths)]
    root = model.tree.root
    down[sched.group_of[root]][sched.row_of[root]] = 1.0 / sched.widths[sched.group_of[root]]
    for k in range(len(sched.groups), 0, -1):
        g, tab = sched.groups[k - 1], tables[k - 1]
        psi = down[k] if tab is None else down[k] * tab[0]
        rows = g.nodes.size
        upl = _gather(ups, g.plan_l, rows, g.sl + 1)
        upr = _gather(ups, g.plan_r, rows, g.sr + 1)
        for kids, plan, sib in ((g.lefts, g.plan_l, upr), (g.rights, g.plan_r, upl)):
            out = _corr_rows(psi, sib, backend)
            tot = _normalize_rows(out)
            if not tot.min() > 0:
                bad = int(kids[np.flatnonzero(~(tot > 0))[0]])
                raise ZeroMassError(f"downward message to node {bad} vanished", node=bad)
            _scatter(down, plan, out)
    return NodeMessages(down, sched)


def log_partition(model: RCModel, backend: str = "auto") -> float:
    """Log normalizer of the model."""
    return upward_pass(model, backend).log_z


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / v.sum(axis=-1, keepdims=True)


def marginals(model: RCModel, backend: str = "auto",
              count_marginals: bool = True) -> InferenceResult:
    """Leaf activation probabilities, count distributions, and log Z."""
    up = upward_pass(model, backend)
    down = downward_pass(model, up, backend)
    L = up.messages.arrays[0] * down.arrays[0]
    leaf = L[:, 1] / L.sum(axis=1)
    counts = {}
    if count_marginals:
        for k, g in enumerate(_schedule(model).groups, 1):
            block = _normalize(up.messages.arrays[k] * down.arrays[k])
            counts.update(zip(g.nodes.tolist(), block))
    return InferenceResult(leaf, counts, up.log_z, model.tree.root)


def count_marginal(model: RCModel, node: int, backend: str = "auto") -> np.ndarray:
    """Distribution of the number of active variables below ``node``."""
    tree = model.tree
    if not 0 <= node < tree.num_nodes:
        raise KeyError(f"unknown node id {node}")
    up = upward_pass(model, backend)
    if node == tree.root:
        return up.messages[node].copy()
    down = downward_pass(model, up, backend)
    return _normalize(up.messages[node] * down[node])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``cdf`` rows are unnormalized cumulative weights.

    ``u`` must lie in (0, 1] so that zero-weight entries are never chosen.
    """
    return (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)


def sample(model: RCModel, num_samples: int, seed=None, backend: str = "auto",
           up: UpState | None = None) -> np.ndarray:
    """Exact joint samples, shape ``(num_samples, D)``, dtype uint8.

    Draws the root count from the root belief, then splits each parent count
    into its two children along the diagonal ``z_l + z_r = z_p``.
    """
    if num_samples < 0:
        raise ValueError("num_samples must be nonnegative")
    tree = model.tree
    rng = np.random.default_rng(seed)
    if up is None:
        up = upward_pass(model, backend)
    S = int(num_samples)
    z = [None] * tree.num_nodes
    root_cdf = np.cumsum(up.messages[tree.root])[None, :]
    z[tree.root] = _draw(np.broadcast_to(root_cdf, (S, root_cdf.shape[1])),
                         1.0 - rng.random(S)) if S else np.zeros(0, dtype=np.int64)
    left, right = tree.left.tolist(), tree.right.tolist()
    out = np.zeros((S, tree.num_vars), dtype=np.uint8)
    for p in tree.preorder.tolist():
        if left[p] < 0:
            out[:, tree.var[p]] = z[p]
            continue
        zp = z[p]
        a, b = up.messages[left[p]], up.messages[right[p]]
        na, nb = a.size - 1, b.size - 1
        u = 1.0 - rng.random(S)
        # joint[c, k] = a[k] * b[c - k]: weight of z_l = k given z_p = c
        if (na + nb + 1) * (na + 1) <= 1 << 16 and S * (na + 1) <= 1 << 26:
            k = np.arange(na + 1)
            c = np.arange(na + nb + 1)[:, None]
            diff = c - k
            joint = np.where((diff >= 0) & (diff <= nb), a[None, :] * b[np.clip(diff, 0, nb)], 0.0)
            cdf = np.cumsum(joint, axis=1)
            zl = _draw(cdf[zp], u)
        else:
            zl = np.empty(S, dtype=np.int64)
            for c in np.unique(zp).tolist():
                mask = zp == c
                k = np.arange(max(0, c - nb), min(na, c) + 1)
                cdf = np.cumsum(a[k] * b[c - k])
                zl[mask] = k[_draw(np.broadcast_to(cdf, (int(mask.sum()), cdf.size)), u[mask])]
        if S:
            assert np.all((zl <= np.minimum(na, zp)) & (zp - zl <= nb)), "zero-probability diagonal"
        z[left[p]] = zl
        z[right[p]] = zp - zl
        z[p] = None
    return out


# ---------------------------------------------------------------------------
# Cardinality-factor messages
# ---------------------------------------------------------------------------


def factor_messages(incoming, table, backend: str = "auto") -> np.ndarray:
    """All outgoing sum-product messages of one cardinality factor.

    ``incoming`` has shape ``(D, 2)``; row ``d`` is the message from variable
    ``d`` to the factor.  Row ``d`` of the result is proportional to
    ``sum_{y without y_d} f(sum y) prod_{d' != d} incoming[d'](y_d')`` and is
    normalized to sum to one.  The receiving variable's own message never
    enters its outgoing message, so no division is needed.
    """
    incoming = np.asarray(incoming, dtype=np.float64)
    table = table if isinstance(table, CardinalityTable) else CardinalityTable(table)
    if incoming.ndim != 2 or incoming.shape[1] != 2:
        raise ValueError("incoming messages must have shape (D, 2)")
    D = incoming.shape[0]
    if table.n != D:
        raise ValueError(f"table covers {table.n} variables, got {D} messages")
    if np.any(incoming < 0) or not np.all(np.isfinite(incoming)):
        raise ValueError("incoming messages must be finite and nonnegative")
    dead = incoming.sum(axis=1) <= 0
    if dead.any():
        raise ZeroMassError(f"incoming message {int(np.flatnonzero(dead)[0])} is all zero")
    if D == 1:
        w, _ = table.shifted_weights()
        return (w / w.sum())[None, :]
    with np.errstate(divide="ignore"):
        log_in = np.log(incoming)
    tree = _factor_tree(D)
    model = RCModel(log_in, tree, {tree.root: table})
    up = upward_pass(model, backend)
    down = downward_pass(model, up, backend)
    return down.arrays[0].copy()


_FACTOR_TREES: dict = {}


def _factor_tree(D: int) -> TreeSpec:
    tree = _FACTOR_TREES.get(D)
    if tree is None:
        tree = _FACTOR_TREES[D] = balanced_tree(D)
    return tree
