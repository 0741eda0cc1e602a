"""Cross-level alignment: k-means pseudo-labels in the instance subspace,
hard labels from the cluster subspace, optimal cluster matching, and the
alignment cross-entropy.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import InputError, InvalidProbability


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (M, d)
    labels: np.ndarray  # (N,) int64
    objective: float
    iterations_run: int
    # Objective after each Lloyd iteration (assignment + centroid update).
    objective_history: list[float] = field(default_factory=list)


def _cost(z: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = z - centroids[labels]
    return float((diff * diff).sum())


def _sq_dists(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (N, M) squared euclidean distances.
    return ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(z: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centroids = np.empty((m, z.shape[1]), dtype=np.float64)
    centroids[0] = z[rng.integers(n)]
    for j in range(1, m):
        d2 = _sq_dists(z, centroids[:j]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[j] = z[pick]
    return centroids


def kmeans(z: np.ndarray, m: int, seed, max_iters: int = 100,
           tol: float = 1e-10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Assignment ties break to the smallest centroid index. A cluster emptied
    mid-run is re-seeded at the point farthest from its own assigned
    centroid. Stops when the objective improves by less than tol or after
    max_iters; the returned labels/objective are recomputed against the
    final centroids so they are always mutually consistent.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InputError(f"expected (N, d) data, got shape {z.shape}")
    n = z.shape[0]
    if not n >= m >= 1:
        raise InputError(f"need N >= M >= 1, got N={n}, M={m}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(z, m, rng)
    history: list[float] = []
    prev_obj = None
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        labels = _sq_dists(z, centroids).argmin(axis=1)

        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=m)
        for j in range(m):
            if counts[j] > 0:
                new_centroids[j] = z[labels == j].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if len(empties) > 0:
            # Distance of each point to its own (updated) centroid.
            own = ((z - new_centroids[labels]) ** 2).sum(axis=1)
            for j in empties:
                far = int(own.argmax())
                new_centroids[j] = z[far]
                own[far] = -1.0  # a point seeds at most one empty cluster

        centroids = new_centroids
        obj = _cost(z, centroids, labels)
        history.append(obj)
        if prev_obj is not None and prev_obj - obj < tol:
            break
        prev_obj = obj

    labels = _sq_dists(z, centroids).argmin(axis=1).astype(np.int64)
    objective = _cost(z, centroids, labels)
    return KMeansResult(centroids=centroids, labels=labels, objective=objective,
                        iterations_run=iterations, objective_history=history)


def hard_labels(c) -> np.ndarray:
    """Per-row argmax of a probability matrix; ties to the smallest index."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise InputError(f"expected (N, M) probabilities, got shape {c.shape}")
    return c.argmax(axis=1).astype(np.int64)


def match_clusters(p, q, m: int) -> np.ndarray:
    """Permutation matrix w (m x m) maximizing the label overlap
    sum_{ms} w_ms |{i : q_i = m and p_i = s}|.

    Solved as a linear assignment problem; the optimum equals exhaustive
    permutation search.
    """
    p = np.asarray(p, dtype=np.int64)
    q = np.asarray(q, dtype=np.int64)
    if p.shape != q.shape or p.ndim != 1:
        raise InputError(f"label vectors must share one shape, got {p.shape} and {q.shape}")
    for name, vec in (("p", p), ("q", q)):
        if len(vec) and (vec.min() < 0 or vec.max() >= m):
            raise InputError(f"{name} labels must lie in [0, {m}), got range "
                             f"[{vec.min()}, {vec.max()}]")
    overlap = np.zeros((m, m), dtype=np.int64)
    np.add.at(overlap, (q, p), 1)
    rows, cols = linear_sum_assignment(-overlap)
    w = np.zeros((m, m), dtype=np.int64)
    w[rows, cols] = 1
    return w


def modify_pseudo(p, w: np.ndarray) -> np.ndarray:
    """One-hot rows: row i is hot at m where w[m, p_i] = 1."""
    p = np.asarray(p, dtype=np.int64)
    w = np.asarray(w)
    m = w.shape[0]
    if w.ndim != 2 or w.shape[0] != w.shape[1] or \
            not ((w.sum(axis=0) == 1).all() and (w.sum(axis=1) == 1).all()):
        raise InputError("w must be a square permutation matrix")
    if len(p) and (p.min() < 0 or p.max() >= m):
        raise InputError(f"labels must lie in [0, {m})")
    row_for_col = w.argmax(axis=0)
    onehot = np.zeros((len(p), m), dtype=np.float64)
    onehot[np.arange(len(p)), row_for_col[p]] = 1.0
    return onehot


def cli_loss(p_tilde_a, c_a, p_tilde_b, c_b) -> torch.Tensor:
    """Cross-entropy aligning cluster probabilities with the one-hot matched
    pseudo-labels, averaged per sample and over the two views. Differentiable
    in the probability matrices; the log is clamped at 1e-12."""
    total = None
    for p_tilde, c in ((p_tilde_a, c_a), (p_tilde_b, c_b)):
        pt = torch.as_tensor(np.asarray(p_tilde), dtype=torch.float64) \
            if not isinstance(p_tilde, torch.Tensor) else p_tilde.double()
        ct = c if isinstance(c, torch.Tensor) else torch.as_tensor(
            np.asarray(c), dtype=torch.float64)
        if pt.shape != ct.shape or pt.ndim != 2:
            raise InputError(f"pseudo-labels {tuple(pt.shape)} and probabilities "
                             f"{tuple(ct.shape)} must be matching (N, M)")
        if (ct < 0).any():
            raise InvalidProbability("cluster probabilities must be non-negative")
        n = pt.shape[0]
        term = -(pt * torch.log(ct.clamp(min=1e-12))).sum() / n
        total = term if total is None else total + term
    return total / 2.0
