"""Differentiable training objectives.

All functions accept torch tensors (gradients flow) or numpy arrays and
return 0-dim float64 torch tensors. The two contrastive losses follow the
paired-view InfoNCE pattern: for instances the positives are the two views of
one sample, for clusters the positives are the two views of one probability
column. The self-similarity term is excluded from the denominator unless
include_self=True, which restores the literal textbook form.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (EmptyClusterError, InputError, InvalidProbability,
                     InvalidTemperature, ZeroNormError)
from .masking import MaskPlan, PatchSequence

LOG_EPS = 1e-12


@dataclass
class LossBreakdown:
    """One logged row of per-objective values. l_picd is defined as
    l_ins + l_clu."""

    l_pisd: float = 0.0
    l_ins: float = 0.0
    l_clu: float = 0.0
    l_entropy: float = 0.0
    l_cli: float = 0.0

    @property
    def l_picd(self) -> float:
        return self.l_ins + self.l_clu


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.double() if x.dtype != torch.float64 else x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def cosine_sim(u, v) -> torch.Tensor:
    """u.v / (|u||v|); equals the plain dot product for unit vectors."""
    u, v = _t(u), _t(v)
    nu, nv = u.norm(), v.norm()
    if float(nu) == 0.0 or float(nv) == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm vectors")
    return (u @ v) / (nu * nv)


def _paired_infonce(reps: torch.Tensor, tau: float, include_self: bool) -> torch.Tensor:
    """Row losses for 2K stacked representations where row i's positive is
    row (i + K) mod 2K. reps rows must already be unit-norm.

    Returns the (2K,) vector of per-row -log softmax terms.
    """
    two_k = reps.shape[0]
    k = two_k // 2
    logits = (reps @ reps.T) / tau
    if not include_self:
        eye = torch.eye(two_k, dtype=torch.bool)
        logits = logits.masked_fill(eye, float("-inf"))
    pos = (torch.arange(two_k) + k) % two_k
    return torch.logsumexp(logits, dim=1) - logits[torch.arange(two_k), pos]


def instance_loss(z_a, z_b, tau_i: float, include_self: bool = False) -> torch.Tensor:
    """Paired-view InfoNCE over samples, averaged over all 2N view rows.

    Rows of z_a/z_b are assumed unit-norm (the instance head guarantees it),
    so similarities reduce to dot products.
    """
    if tau_i <= 0:
        raise InvalidTemperature(f"tau_i must be > 0, got {tau_i}")
    z_a, z_b = _t(z_a), _t(z_b)
    if z_a.shape != z_b.shape or z_a.ndim != 2 or z_a.shape[0] < 1:
        raise InputError(f"expected matching (N, d) views, got {tuple(z_a.shape)} "
                         f"and {tuple(z_b.shape)}")
    n = z_a.shape[0]
    rows = _paired_infonce(torch.cat([z_a, z_b], dim=0), tau_i, include_self)
    return rows.sum() / (2 * n)


def cluster_entropy(c_a, c_b) -> torch.Tensor:
    """Entropy of the mean cluster assignment, summed over both views.

    P_i = column mean of the probability matrix; H = -sum_i P_i ln P_i per
    view, added. 0 ln 0 is taken as 0 (the log is clamped at 1e-12).
    """
    c_a, c_b = _t(c_a), _t(c_b)
    if (c_a < 0).any() or (c_b < 0).any():
        raise InvalidProbability("cluster probabilities must be non-negative")
    h = c_a.new_zeros(())
    for c in (c_a, c_b):
        p = c.mean(dim=0)
        h = h - (p * torch.log(p.clamp(min=LOG_EPS))).sum()
    return h


def cluster_loss(c_a, c_b, tau_c: float, include_self: bool = False,
                 column_eps: float = 0.0) -> torch.Tensor:
    """Paired-view InfoNCE over probability columns minus the assignment
    entropy.

    Columns act as cluster representations; a zero column means an empty
    cluster and raises EmptyClusterError (set column_eps > 0 to regularize
    instead).
    """
    if tau_c <= 0:
        raise InvalidTemperature(f"tau_c must be > 0, got {tau_c}")
    c_a, c_b = _t(c_a), _t(c_b)
    if c_a.shape != c_b.shape or c_a.ndim != 2:
        raise InputError(f"expected matching (N, M) views, got {tuple(c_a.shape)} "
                         f"and {tuple(c_b.shape)}")
    m = c_a.shape[1]
    if m < 2:
        raise InputError(f"cluster loss needs M >= 2 columns, got {m}")
    if (c_a < 0).any() or (c_b < 0).any():
        raise InvalidProbability("cluster probabilities must be non-negative")

    cols = torch.cat([c_a.T, c_b.T], dim=0)  # (2M, N)
    if column_eps > 0:
        cols = cols + column_eps
    norms = cols.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        empty = torch.nonzero(norms[:, 0] == 0).flatten().tolist()
        raise EmptyClusterError(
            f"zero probability column(s) {empty} (view-stacked index); "
            "no cluster representation to contrast")
    rows = _paired_infonce(cols / norms, tau_c, include_self)
    return rows.sum() / (2 * m) - cluster_entropy(c_a, c_b)


def reconstruction_loss(pred, target, plan: MaskPlan,
                        all_patches: bool = False) -> torch.Tensor:
    """Mean squared pixel error over the masked patches (or the whole grid
    with all_patches=True). An empty masked set yields 0 with a warning."""
    pred_arr = pred.patches if isinstance(pred, PatchSequence) else pred
    target_arr = target.patches if isinstance(target, PatchSequence) else target
    p, t = _t(pred_arr), _t(target_arr)
    if p.shape != t.shape or p.ndim != 2:
        raise InputError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} "
                         "must be matching (n_patches, patch_dim) grids")
    if all_patches:
        idx = torch.arange(p.shape[0])
    else:
        idx = torch.from_numpy(np.asarray(plan.masked_idx, dtype=np.int64))
    if len(idx) == 0:
        warnings.warn("reconstruction loss over an empty masked set; returning 0",
                      stacklevel=2)
        return p.new_zeros(())
    diff = p[idx] - t[idx]
    return (diff * diff).sum() / diff.numel()


def masked_mse_batch(pred: torch.Tensor, target: torch.Tensor,
                     masked: torch.Tensor) -> torch.Tensor:
    """Batched reconstruction loss: per-sample mean over masked pixels, then
    mean over the batch. pred/target (B, n, D); masked (B, n) bool. Samples
    with no masked patches contribute 0."""
    d = pred.shape[-1]
    sq = ((pred - target) ** 2).sum(dim=-1)  # (B, n)
    per_sample = (sq * masked).sum(dim=1) / (masked.sum(dim=1).clamp(min=1) * d)
    return per_sample.mean()


def pisd_loss(recon_a, recon_b) -> torch.Tensor:
    """Average of the two per-view reconstruction losses."""
    return (_t(recon_a) + _t(recon_b)) / 2.0
