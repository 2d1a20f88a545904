"""Maximum-likelihood learning for RC models and related tools.

RC models are exponential families whose sufficient statistics are the
variables themselves and one-hot encodings of every table-bearing node's
count, so exact gradients are differences between model marginals (from the
convolution tree) and empirical frequencies.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .convtree import ZeroMassError, marginals, sample
from .model import CardinalityTable, ModelError, RCModel, TreeSpec, balanced_tree

NEG_INF = -np.inf


class DivergenceError(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def as_dataset(data) -> np.ndarray:
    """Validate an ``(N, D)`` binary array; returns it as uint8."""
    Y = np.asarray(data)
    if Y.ndim != 2 or Y.shape[0] < 1 or Y.shape[1] < 1:
        raise ValueError("dataset must be a nonempty (N, D) array")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("dataset entries must be 0 or 1")
    return Y.astype(np.uint8)


def load_dataset(path) -> np.ndarray:
    """One ``0``/``1`` string per line, all of equal width."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if set(line) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: only '0' and '1' are allowed")
            if rows and len(line) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: width {len(line)} != {len(rows[0])}")
            rows.append(line)
    if not rows:
        raise ValueError(f"{path}: no data")
    return np.frombuffer("".join(rows).encode(), dtype=np.uint8).reshape(len(rows), -1) - ord("0")


def format_dataset(Y) -> str:
    Y = np.asarray(Y, dtype=np.uint8)
    if Y.size == 0:
        return ""
    chars = (Y + ord("0")).astype(np.uint8)
    return "\n".join(r.tobytes().decode() for r in chars) + "\n"


def count_histograms(data, tree: TreeSpec, nodes=None) -> dict:
    """Empirical distribution of each node's active-leaf count."""
    Y = np.asarray(data)
    Yo = Y[:, tree.order].astype(np.int64)
    csum = np.concatenate([np.zeros((Y.shape[0], 1), dtype=np.int64),
                           np.cumsum(Yo, axis=1)], axis=1)
    nodes = range(tree.num_nodes) if nodes is None else nodes
    out = {}
    for i in nodes:
        c = csum[:, tree.hi[i]] - csum[:, tree.lo[i]]
        out[int(i)] = np.bincount(c, minlength=tree.size[i] + 1) / Y.shape[0]
    return out


# ---------------------------------------------------------------------------
# Parameters and likelihood
# ---------------------------------------------------------------------------


@dataclass
class Parameters:
    """Unary log-odds ``w_d`` and free log-potentials of table-bearing nodes.

    ``-inf`` table entries are structural zeros and are never updated.
    """

    unary_weights: np.ndarray
    table_params: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, tree: TreeSpec, table_nodes=None) -> "Parameters":
        if table_nodes is None:
            table_nodes = tree.internal_nodes().tolist()
        return cls(np.zeros(tree.num_vars),
                   {int(i): np.zeros(tree.size[i] + 1) for i in table_nodes})

    def copy(self) -> "Parameters":
        return Parameters(self.unary_weights.copy(),
                          {k: v.copy() for k, v in self.table_params.items()})

    def to_model(self, tree: TreeSpec) -> RCModel:
        w = np.asarray(self.unary_weights, dtype=np.float64)
        for node in self.table_params:
            if tree.left[node] < 0:
                raise ModelError(f"table parameters on leaf node {node}; use unary weights")
        return RCModel(np.column_stack([np.zeros_like(w), w]), tree,
                       {k: CardinalityTable(v) for k, v in self.table_params.items()})

    def flat(self) -> np.ndarray:
        parts = [self.unary_weights] + [self.table_params[k] for k in sorted(self.table_params)]
        return np.concatenate(parts)

    def with_flat(self, x: np.ndarray) -> "Parameters":
        out = self.copy()
        D = out.unary_weights.size
        out.unary_weights = np.array(x[:D], dtype=np.float64)
        pos = D
        for k in sorted(out.table_params):
            n = out.table_params[k].size
            out.table_params[k] = np.array(x[pos:pos + n], dtype=np.float64)
            pos += n
        return out


def _data_term(params: Parameters, ybar: np.ndarray, hists: dict) -> float:
    total = float(params.unary_weights @ ybar)
    for k, f in params.table_params.items():
        h = hists[k]
        live = h > 0
        if np.any(f[live] == NEG_INF):
            return NEG_INF
        total += float(f[live] @ h[live])
    return total


def nll_and_grad(params: Parameters, structure: TreeSpec, data,
                 backend: str = "auto"):
    """Average negative log-likelihood and its gradient.

    Returns ``(nll, grads)`` with ``grads`` shaped like ``params``.  The
    unary gradient is ``E_model[y_d] - mean(y_d)`` and a table entry's
    gradient is ``P_model(count = c) - empirical frequency of c``.  ``nll`` is
    ``inf`` when some example has a count excluded by a hard table.
    """
    Y = as_dataset(data)
    if Y.shape[1] != structure.num_vars:
        raise ValueError("dataset width does not match the structure")
    ybar = Y.mean(axis=0)
    hists = count_histograms(Y, structure, params.table_params.keys())
    model = params.to_model(structure)
    res = marginals(model, backend)
    nll = res.log_z - _data_term(params, ybar, hists)
    grads = Parameters(res.leaf_marginals - ybar, {})
    for k, f in params.table_params.items():
        g = res.count_marginals[k] - hists[k]
        g[f == NEG_INF] = 0.0
        grads.table_params[k] = g
    return float(nll), grads


@dataclass(frozen=True)
class FitOptions:
    step: float = 1.0
    iters: int = 200
    l1_lambda: float = 0.0
    min_step: float = 1e-12

    def __post_init__(self):
        if self.step < 0 or self.iters < 0 or self.l1_lambda < 0:
            raise ValueError("step, iters and l1_lambda must be nonnegative")


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def fit(structure: TreeSpec, data, opts: FitOptions = FitOptions(),
        init: Parameters | None = None, table_nodes=None, history: list | None = None,
        backend: str = "auto") -> Parameters:
    """Proximal gradient descent on ``nll + l1_lambda * ||w||_1``.

    A step that would increase the objective is retried at half the step
    size; the reduced step is kept for later iterations.
    """
    Y = as_dataset(data)
    params = init.copy() if init is not None else Parameters.zeros(structure, table_nodes)
    lam = opts.l1_lambda

    def objective(p):
        nll, g = nll_and_grad(p, structure, Y, backend)
        return nll + lam * float(np.abs(p.unary_weights).sum()), g

    obj, grad = objective(params)
    if not math.isfinite(obj):
        raise DivergenceError("initial negative log-likelihood is not finite", 0)
    if history is not None:
        history.append(obj)
    step = opts.step
    for it in range(1, opts.iters + 1):
        while True:
            cand = params.copy()
            cand.unary_weights = _soft_threshold(
                params.unary_weights - step * grad.unary_weights, step * lam)
            for k in cand.table_params:
                cand.table_params[k] = params.table_params[k] - step * grad.table_params[k]
            try:
                new_obj, new_grad = objective(cand)
            except ZeroMassError:
                new_obj = math.inf
            if new_obj <= obj:
                break
            step /= 2.0
            if step < opts.min_step:
                if not math.isfinite(new_obj):
                    raise DivergenceError(f"non-finite objective at iteration {it}", it)
                return params
        params, obj, grad = cand, new_obj, new_grad
        if history is not None:
            history.append(obj)
    return params


# ---------------------------------------------------------------------------
# Multiple-instance learning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bag:
    """Instance features (``m x p``) with a bag label."""

    X: np.ndarray
    label: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if X.shape[0] < 1:
            raise ValueError("a bag needs at least one instance")
        if self.label not in (0, 1):
            raise ValueError("bag label must be 0 or 1")
        object.__setattr__(self, "X", X)

    @property
    def size(self) -> int:
        return self.X.shape[0]


def _bag_inference(bag: Bag, weights, table: CardinalityTable):
    """(log Z, E[y]) of the bag model under one label's table."""
    theta = bag.X @ np.asarray(weights, dtype=np.float64)
    tree = balanced_tree(bag.size)
    try:
        res = marginals(RCModel(theta, tree, {tree.root: table}), count_marginals=False)
    except ZeroMassError:
        return NEG_INF, np.zeros(bag.size)
    return res.log_z, res.leaf_marginals


def mil_label_probs(bag: Bag, weights, f0, f1) -> np.ndarray:
    """``[P(t=0 | bag), P(t=1 | bag)]``."""
    lz0, _ = _bag_inference(bag, weights, _table(f0, bag.size))
    lz1, _ = _bag_inference(bag, weights, _table(f1, bag.size))
    norm = np.logaddexp(lz0, lz1)
    if norm == NEG_INF:
        raise ZeroMassError("bag has zero mass under both labels")
    return np.exp(np.array([lz0, lz1]) - norm)


def _table(f, m) -> CardinalityTable:
    t = f if isinstance(f, CardinalityTable) else CardinalityTable(f)
    if t.n != m:
        raise ValueError(f"table covers {t.n} instances, bag has {m}")
    return t


def mil_loglik_and_grad(bag: Bag, weights, f0, f1):
    """``log P(t | bag)`` and its gradient with respect to ``weights``.

    ``P(t | bag) = Z_t / (Z_0 + Z_1)`` where ``Z_t`` sums
    ``f_t(sum y) prod exp(theta_d y_d)`` over instance labels, with
    ``theta_d = x_d . weights``.
    """
    lz = np.empty(2)
    E = []
    for t, f in enumerate((f0, f1)):
        lz[t], e = _bag_inference(bag, weights, _table(f, bag.size))
        E.append(e)
    norm = np.logaddexp(lz[0], lz[1])
    if norm == NEG_INF:
        raise ZeroMassError("bag has zero mass under both labels")
    post = np.exp(lz - norm)
    t = bag.label
    loglik = float(lz[t] - norm)
    grad = bag.X.T @ (E[t] - post[0] * E[0] - post[1] * E[1])
    return loglik, grad


def expected_positive_count(bag: Bag, weights, f0, f1) -> float:
    """Expected number of active instances given a positive label."""
    theta = bag.X @ np.asarray(weights, dtype=np.float64)
    tree = balanced_tree(bag.size)
    res = marginals(RCModel(theta, tree, {tree.root: _table(f1, bag.size)}))
    if bag.size == 1:
        return float(res.leaf_marginals[0])
    counts = res.count_marginals[tree.root]
    return float(np.arange(counts.size) @ counts)


TableFactory = Callable[[int], tuple]


def train_mil(bags: Sequence[Bag], tables: TableFactory, opts: FitOptions = FitOptions(),
              threads: int = 1, init=None, history: list | None = None) -> np.ndarray:
    """Fit instance weights by proximal gradient descent on the bag likelihood.

    ``tables(m)`` returns the ``(f0, f1)`` pair for a bag of ``m`` instances.
    The minimized objective, recorded in ``history``, is the negative mean
    log-likelihood plus ``l1_lambda * ||w||_1``.
    """
    if not bags:
        raise ValueError("no bags")
    p = bags[0].X.shape[1]
    w = np.zeros(p) if init is None else np.array(init, dtype=np.float64)
    cache = {}

    def pair(m):
        if m not in cache:
            cache[m] = tables(m)
        return cache[m]

    def objective(w):
        def one(bag):
            f0, f1 = pair(bag.size)
            return mil_loglik_and_grad(bag, w, f0, f1)
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(one, bags))
        else:
            parts = [one(b) for b in bags]
        ll = sum(v for v, _ in parts) / len(bags)
        g = np.sum([gr for _, gr in parts], axis=0) / len(bags)
        return -ll + opts.l1_lambda * float(np.abs(w).sum()), -g

    obj, grad = objective(w)
    if not math.isfinite(obj):
        raise DivergenceError("initial objective is not finite", 0)
    if history is not None:
        history.append(obj)
    step = opts.step
    for it in range(1, opts.iters + 1):
        while True:
            cand = _soft_threshold(w - step * grad, step * opts.l1_lambda)
            new_obj, new_grad = objective(cand)
            if new_obj <= obj:
                break
            step /= 2.0
            if step < opts.min_step:
                return w
        w, obj, grad = cand, new_obj, new_grad
        if history is not None:
            history.append(obj)
    return w


def load_bags(path) -> list:
    """Bags separated by ``label t`` header lines, one instance row per line."""
    bags, label, rows = [], None, []

    def flush(lineno):
        if label is None:
            return
        if not rows:
            raise ValueError(f"{path}:{lineno}: bag with no instances")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"{path}:{lineno}: ragged feature rows")
        bags.append(Bag(np.array(rows), label))

    with open(path) as fh:
        lineno = 0
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "label":
                flush(lineno)
                if len(parts) != 2 or parts[1] not in ("0", "1"):
                    raise ValueError(f"{path}:{lineno}: expected 'label 0' or 'label 1'")
                label, rows = int(parts[1]), []
                continue
            if label is None:
                raise ValueError(f"{path}:{lineno}: feature row before any 'label' header")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature") from None
        flush(lineno)
    if not bags:
        raise ValueError(f"{path}: no bags")
    if len({b.X.shape[1] for b in bags}) != 1:
        raise ValueError(f"{path}: bags disagree on the number of features")
    return bags


# ---------------------------------------------------------------------------
# Structure heuristics and evaluation
# ---------------------------------------------------------------------------


def agreement_similarity(data) -> np.ndarray:
    """Fraction of examples on which each pair of variables agrees."""
    Y = as_dataset(data).astype(np.float64)
    N = Y.shape[0]
    return (Y.T @ Y + (1 - Y).T @ (1 - Y)) / N


def agglomerative_structure(data, mode: str = "adaptive") -> TreeSpec:
    """Average-linkage clustering tree over the variables.

    ``adaptive`` merges the most similar clusters first; ``anti`` negates
    the similarities, merging the least similar first.  The merged cluster
    takes the lower slot index; ties go to the lexicographically smallest
    slot pair.  Leaves are nodes ``0..D-1`` and merge ``k`` is node ``D + k``.
    """
    if mode not in ("adaptive", "anti"):
        raise ValueError("mode must be 'adaptive' or 'anti'")
    S = agreement_similarity(data)
    D = S.shape[0]
    if mode == "anti":
        S = -S
    if D == 1:
        return TreeSpec([-1], [-1], [0], 0)
    S = S.copy()
    active = np.ones(D, dtype=bool)
    node = list(range(D))
    sizes = np.ones(D)
    left = [-1] * D
    right = [-1] * D
    var = list(range(D))
    upper = np.triu(np.ones((D, D), dtype=bool), 1)
    for _ in range(D - 1):
        mask = upper & active[:, None] & active[None, :]
        flat = np.where(mask, S, -np.inf).argmax()
        a, b = divmod(int(flat), D)
        na, nb = sizes[a], sizes[b]
        merged = (na * S[a] + nb * S[b]) / (na + nb)
        S[a, :] = merged
        S[:, a] = merged
        active[b] = False
        sizes[a] = na + nb
        left.append(node[a])
        right.append(node[b])
        var.append(-1)
        node[a] = len(left) - 1
    return TreeSpec(left, right, var, len(left) - 1)


def count_rmse_by_size(reference: dict, estimate: dict, tree: TreeSpec) -> dict:
    """Pooled RMSE between two sets of count distributions, keyed by subset size."""
    sq = {}
    for i, ref in reference.items():
        err = np.asarray(ref) - np.asarray(estimate[i])
        s = int(tree.size[i])
        tot, cnt = sq.get(s, (0.0, 0))
        sq[s] = (tot + float(err @ err), cnt + err.size)
    return {s: math.sqrt(tot / cnt) for s, (tot, cnt) in sorted(sq.items())}


def model_count_distributions(model: RCModel, eval_tree: TreeSpec, num_samples: int = 10000,
                              seed=None, backend: str = "auto") -> dict:
    """Model count distribution for every node of ``eval_tree``.

    Exact where the node's variable set is also a node of the model's tree;
    otherwise estimated from ``num_samples`` exact joint samples.
    """
    if eval_tree.num_vars != model.D:
        raise ValueError("evaluation tree and model disagree on D")
    res = marginals(model, backend)
    out, missing = {}, []
    for i in range(eval_tree.num_nodes):
        try:
            j = model.tree.node_for_subset(eval_tree.leaves_of(i))
        except ModelError:
            missing.append(i)
            continue
        if model.tree.left[j] < 0:
            p = float(res.leaf_marginals[model.tree.var[j]])
            out[i] = np.array([1.0 - p, p])
        else:
            out[i] = res.count_marginals[j]
    if missing:
        draws = sample(model, num_samples, seed=seed, backend=backend)
        out.update(count_histograms(draws, eval_tree, missing))
    return out


def count_statistics_error(model: RCModel, data, eval_tree: TreeSpec,
                           num_samples: int = 10000, seed=None) -> dict:
    """RMSE between empirical and model count distributions, by subset size."""
    Y = as_dataset(data)
    emp = count_histograms(Y, eval_tree)
    est = model_count_distributions(model, eval_tree, num_samples, seed)
    return count_rmse_by_size(emp, est, eval_tree)


# ---------------------------------------------------------------------------
# Synthetic Ising data
# ---------------------------------------------------------------------------

CRITICAL_COUPLING = 0.5 * math.log(1.0 + math.sqrt(2.0))


def ising_gibbs_generate(height: int, width: int, coupling: float, num_samples: int,
                         sweeps: int, seed=None) -> np.ndarray:
    """Grid Ising samples from independent single-site Gibbs chains.

    Spins take values in {-1, +1} with ``p(s) ∝ exp(coupling * sum_<ij> s_i s_j)``
    over nearest neighbours with free boundaries and no field.  Each chain
    starts uniformly at random and runs ``sweeps`` checkerboard sweeps; the
    final state is returned as a row-major 0/1 vector.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be at least 1")
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, (num_samples, height, width)).astype(np.int8) * 2 - 1
    ii, jj = np.indices((height, width))
    colors = [(ii + jj) % 2 == c for c in (0, 1)]
    for _ in range(sweeps):
        for mask in colors:
            field_ = np.zeros(s.shape, dtype=np.int16)
            field_[:, 1:, :] += s[:, :-1, :]
            field_[:, :-1, :] += s[:, 1:, :]
            field_[:, :, 1:] += s[:, :, :-1]
            field_[:, :, :-1] += s[:, :, 1:]
            p_up = 1.0 / (1.0 + np.exp(-2.0 * coupling * field_))
            draw = np.where(rng.random(s.shape) < p_up, 1, -1).astype(np.int8)
            s = np.where(mask, draw, s)
    return ((s.reshape(num_samples, -1) + 1) // 2).astype(np.uint8)
