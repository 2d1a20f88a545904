"""Reference inference routines.

``chain_marginals`` is the partial-sum dynamic program for a single
cardinality potential (forward/backward over ``z_d = z_{d-1} + y_d``), with
an optional count cap that makes it O(Dk).  ``quadratic_tree_marginals`` is
the convolution tree with direct convolutions.  ``brute_force`` enumerates
all configurations and is the ground truth for small models.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .convtree import InferenceResult, ZeroMassError, marginals
from .model import CardinalityTable, RCModel

MAX_BRUTE_FORCE_VARS = 24
_BLOCK = 1 << 15


def _unary_weights(unary: np.ndarray):
    top = unary.max(axis=1)
    w = np.exp(unary - top[:, None])
    s = w.sum(axis=1)
    return w / s[:, None], float(np.sum(top + np.log(s)))


@njit(cache=True)
def _chain_sweeps(w0, w1, f, alpha, beta):
    """Fill normalized forward/backward partial-sum tables in place.

    Returns the forward log-normalizer and the first variable whose prefix
    has zero mass (-1 if none).
    """
    D = w0.size
    K = alpha.shape[1] - 1
    alpha[0, 0] = 1.0
    log_alpha = 0.0
    for d in range(1, D + 1):
        s = 0.0
        a0, a1 = w0[d - 1], w1[d - 1]
        for k in range(K + 1):
            v = alpha[d - 1, k] * a0
            if k > 0:
                v += alpha[d - 1, k - 1] * a1
            alpha[d, k] = v
            s += v
        if s <= 0.0:
            return log_alpha, d - 1
        for k in range(K + 1):
            alpha[d, k] /= s
        log_alpha += np.log(s)

    s = 0.0
    for k in range(K + 1):
        s += f[k]
    for k in range(K + 1):
        beta[D, k] = f[k] / s
    for d in range(D, 0, -1):
        s = 0.0
        b0, b1 = w0[d - 1], w1[d - 1]
        for k in range(K + 1):
            v = beta[d, k] * b0
            if k < K:
                v += beta[d, k + 1] * b1
            beta[d - 1, k] = v
            s += v
        if s > 0.0:
            for k in range(K + 1):
                beta[d - 1, k] /= s
    return log_alpha, -1


def chain_marginals(unary, table, max_count: int | None = None) -> InferenceResult:
    """Marginals of ``unary`` + one cardinality potential via a partial-sum chain.

    Forward and backward message tables of shape ``(D + 1, k + 1)`` are kept
    in memory, so space is O(Dk) (O(D^2) uncapped).
    """
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim == 1:
        unary = np.column_stack([np.zeros_like(unary), unary])
    table = table if isinstance(table, CardinalityTable) else CardinalityTable(table)
    D = unary.shape[0]
    if table.n != D:
        raise ValueError(f"table covers {table.n} variables, model has {D}")
    K = D if max_count is None else int(max_count)
    if not 0 <= K <= D:
        raise ValueError("max_count must lie in 0..D")
    if np.any(np.isfinite(table.log_f[K + 1:])):
        raise ValueError(f"table has mass above max_count={K}")

    w, log_unary = _unary_weights(unary)
    w0, w1 = w[:, 0], w[:, 1]
    f, f_shift = table.shifted_weights()
    f = f[:K + 1]

    alpha = np.zeros((D + 1, K + 1))
    beta = np.zeros((D + 1, K + 1))
    log_alpha, dead = _chain_sweeps(w0, w1, f, alpha, beta)
    if dead >= 0:
        raise ZeroMassError(f"chain prefix up to variable {dead} has zero mass")

    final = alpha[D] * f
    total = final.sum()
    if total <= 0:
        raise ZeroMassError("cardinality potential excludes every reachable count")
    log_z = log_unary + log_alpha + np.log(total) + f_shift

    # P(y_d) from the prefix before d and the suffix from d on
    stay = np.einsum("ij,ij->i", alpha[:D], beta[1:])
    step = np.einsum("ij,ij->i", alpha[:D, :-1], beta[1:, 1:])
    p1 = w1 * step
    p0 = w0 * stay
    leaf = p1 / (p0 + p1)
    counts = np.zeros(D + 1)
    counts[:K + 1] = final / total
    return InferenceResult(leaf, {0: counts}, float(log_z), 0)


def chain_memory_bytes(D: int, max_count: int | None = None) -> int:
    K = D if max_count is None else max_count
    return 2 * (D + 1) * (K + 1) * 8


def quadratic_tree_marginals(model: RCModel) -> InferenceResult:
    """Convolution tree with direct O(nm) convolutions everywhere."""
    return marginals(model, backend="naive")


@dataclass
class OracleResult(InferenceResult):
    """Brute-force result; ``joint[i]`` is P(y) with ``y_d = (i >> d) & 1``."""

    joint: np.ndarray | None = None


def _configs(start: int, stop: int, D: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(D)) & 1).astype(np.int8)


def brute_force(model: RCModel) -> OracleResult:
    """Exact inference by enumerating all ``2**D`` configurations.

    Blocks are combined in index order with a running log-domain maximum so
    the result does not depend on memory layout.
    """
    D = model.D
    if D > MAX_BRUTE_FORCE_VARS:
        raise ValueError(f"brute_force refuses D={D} > {MAX_BRUTE_FORCE_VARS}")
    tree = model.tree
    internal = tree.internal_nodes().tolist()
    n_all = 1 << D
    keep_joint = D <= 20
    joint_lw = np.empty(n_all) if keep_joint else None

    run_max = -np.inf
    mass = 0.0
    on = np.zeros(D)
    hist = {i: np.zeros(tree.size[i] + 1) for i in internal}
    for start in range(0, n_all, _BLOCK):
        stop = min(n_all, start + _BLOCK)
        Y = _configs(start, stop, D)
        lw = model.log_weight(Y)
        if keep_joint:
            joint_lw[start:stop] = lw
        bmax = lw.max()
        if bmax == -np.inf:
            continue
        if bmax > run_max:
            scale = np.exp(run_max - bmax)
            mass *= scale
            on *= scale
            for h in hist.values():
                h *= scale
            run_max = bmax
        w = np.exp(lw - run_max)
        mass += w.sum()
        on += w @ Y
        Yo = Y[:, tree.order].astype(np.int64)
        csum = np.concatenate([np.zeros((Y.shape[0], 1), dtype=np.int64),
                               np.cumsum(Yo, axis=1)], axis=1)
        for i in internal:
            c = csum[:, tree.hi[i]] - csum[:, tree.lo[i]]
            hist[i] += np.bincount(c, weights=w, minlength=tree.size[i] + 1)
    if mass <= 0:
        raise ZeroMassError("model has zero total mass")
    log_z = float(run_max + np.log(mass))
    counts = {i: h / mass for i, h in hist.items()}
    joint = None
    if keep_joint:
        joint = np.exp(joint_lw - log_z)
    return OracleResult(on / mass, counts, log_z, tree.root, joint)


def brute_force_log_z(model: RCModel) -> float:
    """Log normalizer by enumeration, via a single log-sum-exp."""
    D = model.D
    if D > MAX_BRUTE_FORCE_VARS:
        raise ValueError(f"brute_force refuses D={D} > {MAX_BRUTE_FORCE_VARS}")
    parts = [logsumexp(model.log_weight(_configs(s, min(1 << D, s + _BLOCK), D)))
             for s in range(0, 1 << D, _BLOCK)]
    return float(logsumexp(parts))
