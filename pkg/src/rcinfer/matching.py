"""Generalized bipartite matching with row and column cardinality potentials.

Variables ``y[i, j]`` on an ``R x C`` grid carry unary log-potentials
``theta[i, j]``; every row has a table over its count (0..C) and every column
a table over its count (0..R).  Exact marginals are #P-hard in general, so
loopy belief propagation is used, with each cardinality factor's full set of
outgoing messages computed by one pass over its convolution tree.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .convtree import ZeroMassError, factor_messages
from .model import CardinalityTable, ModelError, hard_count_table

MAX_EXACT_VARS = 20


class InfeasibleError(ValueError):
    """No configuration satisfies the hard constraints (as seen by LBP)."""


@dataclass(frozen=True)
class MatchingModel:
    theta: np.ndarray
    row_tables: tuple
    col_tables: tuple

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 2 or theta.size == 0:
            raise ModelError("theta must be a nonempty matrix")
        if not np.all(np.isfinite(theta)):
            raise ModelError("theta must be finite")
        R, C = theta.shape
        rows = tuple(t if isinstance(t, CardinalityTable) else CardinalityTable(t)
                     for t in self.row_tables)
        cols = tuple(t if isinstance(t, CardinalityTable) else CardinalityTable(t)
                     for t in self.col_tables)
        if len(rows) != R or any(t.n != C for t in rows):
            raise ModelError(f"need {R} row tables over counts 0..{C}")
        if len(cols) != C or any(t.n != R for t in cols):
            raise ModelError(f"need {C} column tables over counts 0..{R}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "row_tables", rows)
        object.__setattr__(self, "col_tables", cols)

    @property
    def shape(self):
        return self.theta.shape

    @classmethod
    def with_allowed_counts(cls, theta, row_allowed, col_allowed) -> "MatchingModel":
        """Hard row/column count constraints shared by every row/column."""
        theta = np.asarray(theta, dtype=np.float64)
        R, C = theta.shape
        return cls(theta, tuple(hard_count_table(C, row_allowed) for _ in range(R)),
                   tuple(hard_count_table(R, col_allowed) for _ in range(C)))

    def log_weight(self, Y: np.ndarray) -> np.ndarray:
        """Unnormalized log-probability of configurations ``Y`` (``(..., R, C)``)."""
        Y = np.asarray(Y)
        lw = np.einsum("...ij,ij->...", Y.astype(np.float64), self.theta)
        rc = Y.sum(axis=-1).astype(np.int64)
        cc = Y.sum(axis=-2).astype(np.int64)
        for i, t in enumerate(self.row_tables):
            lw = lw + t.log_f[rc[..., i]]
        for j, t in enumerate(self.col_tables):
            lw = lw + t.log_f[cc[..., j]]
        return lw


@dataclass(frozen=True)
class LbpOptions:
    max_iters: int = 200
    damping: float = 0.5
    tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class LbpResult:
    marginals: np.ndarray
    converged: bool
    iterations: int
    residual: float
    residuals: list


def _normalize(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=-1, keepdims=True)


def _beliefs(unary: np.ndarray, row_msg: np.ndarray, col_msg: np.ndarray) -> np.ndarray:
    b = unary * row_msg * col_msg
    tot = b.sum(axis=-1)
    if not np.all(tot > 0):
        i, j = np.argwhere(~(tot > 0))[0]
        raise InfeasibleError(f"belief of variable ({i}, {j}) vanished")
    return b[..., 1] / tot


def lbp_matching(model: MatchingModel, opts: LbpOptions = LbpOptions(),
                 backend: str = "auto") -> LbpResult:
    """Damped loopy BP with a fixed schedule: all rows, then all columns.

    Messages start uniform and the first update of each factor is undamped.
    The residual is the largest change in any belief over one iteration.
    """
    R, C = model.shape
    unary = _normalize(np.stack([expit(-model.theta), expit(model.theta)], axis=-1))
    row_msg = np.full((R, C, 2), 0.5)
    col_msg = np.full((R, C, 2), 0.5)
    belief = _beliefs(unary, row_msg, col_msg)
    residuals = []
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        mix = 0.0 if it == 1 else opts.damping
        to_rows = _normalize(unary * col_msg)
        for i in range(R):
            try:
                new = factor_messages(to_rows[i], model.row_tables[i], backend)
            except ZeroMassError:
                raise InfeasibleError(f"row {i} constraint cannot be satisfied") from None
            row_msg[i] = _normalize((1 - mix) * new + mix * row_msg[i])
        to_cols = _normalize(unary * row_msg)
        for j in range(C):
            try:
                new = factor_messages(to_cols[:, j], model.col_tables[j], backend)
            except ZeroMassError:
                raise InfeasibleError(f"column {j} constraint cannot be satisfied") from None
            col_msg[:, j] = _normalize((1 - mix) * new + mix * col_msg[:, j])
        new_belief = _beliefs(unary, row_msg, col_msg)
        residual = float(np.max(np.abs(new_belief - belief)))
        residuals.append(residual)
        belief = new_belief
        if residual < opts.tol:
            converged = True
            break
    return LbpResult(belief, converged, it, residuals[-1], residuals)


def node_marginal_baseline(model: MatchingModel) -> np.ndarray:
    """Marginals of the unary-only factorized model (constraints ignored)."""
    return expit(model.theta)


def exact_matching_marginals(model: MatchingModel) -> np.ndarray:
    """Marginals by enumerating all ``2**(R*C)`` configurations."""
    R, C = model.shape
    n = R * C
    if n > MAX_EXACT_VARS:
        raise ValueError(f"exact enumeration refuses {R}x{C} > {MAX_EXACT_VARS} variables")
    total = 1 << n
    block = 1 << 15
    run_max = -np.inf
    mass = 0.0
    on = np.zeros(n)
    for start in range(0, total, block):
        idx = np.arange(start, min(total, start + block), dtype=np.int64)
        Y = ((idx[:, None] >> np.arange(n)) & 1).astype(np.int8)
        lw = model.log_weight(Y.reshape(-1, R, C))
        bmax = lw.max()
        if bmax == -np.inf:
            continue
        if bmax > run_max:
            scale = np.exp(run_max - bmax)
            mass *= scale
            on *= scale
            run_max = bmax
        w = np.exp(lw - run_max)
        mass += w.sum()
        on += w @ Y
    if mass <= 0:
        raise InfeasibleError("no configuration satisfies the constraints")
    return (on / mass).reshape(R, C)


# ---------------------------------------------------------------------------
# Block Gibbs
# ---------------------------------------------------------------------------


def _padded_tables(tables, n):
    out = np.full((len(tables), n + 1), -np.inf)
    for k, t in enumerate(tables):
        out[k] = t.log_f
    return out


@numba.njit(cache=True)
def _gibbs_chunk(Y, theta, row_lf, col_lf, rows, cols, picks, u, acc, n_acc,
                 updates_per_sweep, record_from):
    R, C = Y.shape
    rc = np.zeros(R, np.int64)
    cc = np.zeros(C, np.int64)
    for i in range(R):
        for j in range(C):
            rc[i] += Y[i, j]
            cc[j] += Y[i, j]
    lw = np.empty(16)
    for s in range(picks.shape[0]):
        i1, i2 = rows[s, 0], rows[s, 1]
        j1, j2 = cols[s, 0], cols[s, 1]
        # counts with the block removed
        r1 = rc[i1] - Y[i1, j1] - Y[i1, j2]
        r2 = rc[i2] - Y[i2, j1] - Y[i2, j2]
        c1 = cc[j1] - Y[i1, j1] - Y[i2, j1]
        c2 = cc[j2] - Y[i1, j2] - Y[i2, j2]
        top = -np.inf
        for b in range(16):
            a, bb, c, d = b & 1, (b >> 1) & 1, (b >> 2) & 1, (b >> 3) & 1
            v = (a * theta[i1, j1] + bb * theta[i1, j2]
                 + c * theta[i2, j1] + d * theta[i2, j2]
                 + row_lf[i1, r1 + a + bb] + row_lf[i2, r2 + c + d]
                 + col_lf[j1, c1 + a + c] + col_lf[j2, c2 + bb + d])
            lw[b] = v
            if v > top:
                top = v
        tot = 0.0
        for b in range(16):
            lw[b] = np.exp(lw[b] - top)
            tot += lw[b]
        target = u[s] * tot
        acc_w = 0.0
        pick = 15
        for b in range(16):
            acc_w += lw[b]
            if lw[b] > 0.0 and acc_w >= target:
                pick = b
                break
        a, bb, c, d = pick & 1, (pick >> 1) & 1, (pick >> 2) & 1, (pick >> 3) & 1
        Y[i1, j1], Y[i1, j2], Y[i2, j1], Y[i2, j2] = a, bb, c, d
        rc[i1] = r1 + a + bb
        rc[i2] = r2 + c + d
        cc[j1] = c1 + a + c
        cc[j2] = c2 + bb + d
        step = picks[s]
        if (step + 1) % updates_per_sweep == 0 and (step + 1) // updates_per_sweep > record_from:
            for i in range(R):
                for j in range(C):
                    acc[i, j] += Y[i, j]
            n_acc[0] += 1


def block_gibbs(model: MatchingModel, init, seed=None, sweeps: int = 1000,
                burn_in: int = 100, chunk: int = 1 << 16):
    """Block Gibbs estimates of the marginals.

    Each update picks two distinct rows and two distinct columns uniformly
    and resamples the four shared variables from their exact 16-state
    conditional.  A sweep is ``max(1, R*C // 4)`` updates; the state after
    every post-burn-in sweep is averaged.
    """
    R, C = model.shape
    if R < 2 or C < 2:
        raise ValueError("block Gibbs needs at least two rows and two columns")
    if sweeps <= burn_in:
        raise ValueError("sweeps must exceed burn_in")
    Y = np.array(init, dtype=np.int64)
    if Y.shape != (R, C) or not np.all((Y == 0) | (Y == 1)):
        raise ValueError(f"init must be a binary {R}x{C} matrix")
    if not np.isfinite(model.log_weight(Y)):
        raise InfeasibleError("initial configuration violates a hard constraint")
    rng = np.random.default_rng(seed)
    row_lf = _padded_tables(model.row_tables, C)
    col_lf = _padded_tables(model.col_tables, R)
    per_sweep = max(1, R * C // 4)
    total = sweeps * per_sweep
    acc = np.zeros((R, C))
    n_acc = np.zeros(1, dtype=np.int64)
    for start in range(0, total, chunk):
        n = min(chunk, total - start)
        rows = np.sort(_pairs(rng, R, n), axis=1)
        cols = np.sort(_pairs(rng, C, n), axis=1)
        u = 1.0 - rng.random(n)
        _gibbs_chunk(Y, model.theta, row_lf, col_lf, rows, cols,
                     np.arange(start, start + n), u, acc, n_acc, per_sweep, burn_in)
    return acc / max(1, n_acc[0])


def _pairs(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """``size`` uniformly random ordered pairs of distinct indices in ``0..n-1``."""
    a = rng.integers(0, n, size)
    b = (a + rng.integers(1, n, size)) % n
    return np.stack([a, b], axis=1)


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------


def _tables_from(doc, key_allowed, key_log_f, count, n):
    if key_allowed in doc:
        allowed = doc[key_allowed]
        if allowed and isinstance(allowed[0], list):
            if len(allowed) != count:
                raise ModelError(f"{key_allowed}: expected {count} lists")
            return tuple(hard_count_table(n, a) for a in allowed)
        return tuple(hard_count_table(n, allowed) for _ in range(count))
    if key_log_f in doc:
        raw = doc[key_log_f]
        rows = raw if raw and isinstance(raw[0], list) else [raw] * count
        if len(rows) != count:
            raise ModelError(f"{key_log_f}: expected {count} tables")
        return tuple(CardinalityTable([-np.inf if v == "-inf" else float(v) for v in r])
                     for r in rows)
    return tuple(CardinalityTable(np.zeros(n + 1)) for _ in range(count))


def matching_from_dict(doc) -> MatchingModel:
    """Parse ``{"theta", "row_allowed"|"row_log_f", "col_allowed"|"col_log_f"}``.

    ``*_allowed`` is one list of counts shared by all rows (columns) or a list
    of such lists; ``*_log_f`` likewise holds one table or one per row.
    Missing constraints mean uniform tables.
    """
    if "theta" not in doc:
        raise ModelError("matching problem needs 'theta'")
    theta = np.asarray(doc["theta"], dtype=np.float64)
    if theta.ndim != 2:
        raise ModelError("'theta' must be a matrix")
    R, C = theta.shape
    rows = _tables_from(doc, "row_allowed", "row_log_f", R, C)
    cols = _tables_from(doc, "col_allowed", "col_log_f", C, R)
    return MatchingModel(theta, rows, cols)


def load_matching(path) -> MatchingModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: not valid JSON ({exc})") from None
    try:
        return matching_from_dict(doc)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"{path}: {exc}") from None
