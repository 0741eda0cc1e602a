"""External clustering quality metrics: NMI, assignment-optimal accuracy,
and adjusted Rand index. All are invariant to relabeling of either argument.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, InputError


@dataclass
class Contingency:
    table: np.ndarray  # (K_true, K_pred) int64 counts
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    n: int


def _as_labels(true, pred, min_len: int = 1):
    t = np.asarray(true).ravel()
    p = np.asarray(pred).ravel()
    if len(t) != len(p):
        raise InputError(f"label vectors differ in length: {len(t)} vs {len(p)}")
    if len(t) < min_len:
        raise InputError(f"need at least {min_len} samples, got {len(t)}")
    return t, p


def contingency(true, pred) -> Contingency:
    t, p = _as_labels(true, pred)
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return Contingency(table=table, row_marginals=table.sum(axis=1),
                       col_marginals=table.sum(axis=0), n=len(t))


def _entropy(marginals: np.ndarray, n: int) -> float:
    probs = marginals[marginals > 0] / n
    return float(-(probs * np.log(probs)).sum())


def nmi(true, pred, norm: str = "sqrt") -> float:
    """Mutual information normalized by sqrt(H_true * H_pred) (default) or by
    the arithmetic mean of the entropies.

    Degenerate partitions: if both sides are a single cluster the partitions
    coincide and the value is 1; if only one side is, it is 0.
    """
    if norm not in ("sqrt", "arithmetic"):
        raise ConfigError(f"nmi norm must be 'sqrt' or 'arithmetic', got {norm!r}")
    ct = contingency(true, pred)
    h_t = _entropy(ct.row_marginals, ct.n)
    h_p = _entropy(ct.col_marginals, ct.n)
    if h_t == 0.0 and h_p == 0.0:
        return 1.0
    if h_t == 0.0 or h_p == 0.0:
        return 0.0
    nz = ct.table > 0
    nij = ct.table[nz].astype(np.float64)
    outer = np.outer(ct.row_marginals, ct.col_marginals)[nz].astype(np.float64)
    mi = float((nij / ct.n * np.log(ct.n * nij / outer)).sum())
    mi = max(mi, 0.0)  # guard fp dust on independent partitions
    if norm == "sqrt":
        return mi / np.sqrt(h_t * h_p)
    return 2.0 * mi / (h_t + h_p)


def accuracy(true, pred) -> float:
    """Best matched fraction over one-to-one cluster-to-class assignments,
    computed on the square-padded contingency table."""
    ct = contingency(true, pred)
    k = max(ct.table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[:ct.table.shape[0], :ct.table.shape[1]] = ct.table
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum()) / ct.n


def ari(true, pred) -> float:
    """Pair-counting adjusted Rand index."""
    _as_labels(true, pred, min_len=2)
    ct = contingency(true, pred)

    def comb2(x):
        x = x.astype(np.float64)
        return (x * (x - 1.0) / 2.0).sum()

    index = comb2(ct.table.ravel())
    sum_a = comb2(ct.row_marginals)
    sum_b = comb2(ct.col_marginals)
    total = ct.n * (ct.n - 1.0) / 2.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # Both partitions degenerate in agreement (all singletons or a single
        # cluster on both sides): conventionally perfect agreement.
        return 1.0
    return float((index - expected) / (max_index - expected))
