"""Random model generators for testing and benchmarking."""
from __future__ import annotations

import numpy as np

from .model import CardinalityTable, RCModel, SubsetFamily, balanced_tree

NEG_INF = -np.inf


def random_laminar_family(rng: np.random.Generator, D: int, keep: float = 0.6) -> SubsetFamily:
    """Laminar family from recursive random splitting of a shuffled index set."""
    perm = rng.permutation(D)
    subsets = []
    stack = [perm]
    if rng.random() < 0.5:
        subsets.append(tuple(perm.tolist()))
    while stack:
        block = stack.pop()
        if block.size < 2:
            continue
        parts = int(rng.integers(2, min(3, block.size) + 1))
        cuts = np.sort(rng.choice(np.arange(1, block.size), parts - 1, replace=False))
        for piece in np.split(block, cuts):
            if rng.random() < keep:
                subsets.append(tuple(piece.tolist()))
            stack.append(piece)
    unique = list(dict.fromkeys(tuple(sorted(s)) for s in subsets))
    return SubsetFamily(tuple(unique), D)


def _random_log_table(rng, n, feasible_count, scale, p_neg_inf):
    log_f = scale * rng.standard_normal(n + 1)
    if p_neg_inf > 0:
        log_f[rng.random(n + 1) < p_neg_inf] = NEG_INF
        log_f[feasible_count] = scale * rng.standard_normal()
    return log_f


def random_rc_model(rng: np.random.Generator, D: int, scale: float = 1.0,
                    p_neg_inf: float = 0.2, unary_scale: float = 1.0) -> RCModel:
    """Random nested model with nonzero mass.

    Tables get iid normal entries, a fraction replaced by ``-inf``; every
    table stays finite at the counts of one hidden reference configuration.
    """
    family = random_laminar_family(rng, D)
    ref = rng.integers(0, 2, D)
    unary = unary_scale * rng.standard_normal((D, 2))
    tables = []
    for s in family.subsets:
        c = int(ref[list(s)].sum())
        tables.append(_random_log_table(rng, len(s), c, scale, p_neg_inf))
    return RCModel.from_family(unary, family, tables)


def random_standard_model(rng: np.random.Generator, D: int, p_neg_inf: float = 0.0,
                          tree=None) -> RCModel:
    """Unaries ``log theta(1) ~ U[-1, 1]`` and one N(0, 1) cardinality table."""
    unary = np.column_stack([np.zeros(D), rng.uniform(-1.0, 1.0, D)])
    ref = int(rng.integers(0, D + 1))
    log_f = _random_log_table(rng, D, ref, 1.0, p_neg_inf)
    tree = balanced_tree(D) if tree is None else tree
    return RCModel(unary, tree, {tree.root: CardinalityTable(log_f)})
