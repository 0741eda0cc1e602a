"""Patch grid handling and random patch masking.

An image is split into a row-major grid of non-overlapping square patches,
each flattened in (row, col, channel) order. A mask plan partitions the patch
indices into a visible set and a masked set drawn uniformly at random.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, InvalidImage, InvalidRatio, PatchGridError


@dataclass
class PatchSequence:
    """Flattened patches of one image plus the grid geometry."""

    patches: np.ndarray  # (n_patches, patch_dim)
    patch_size: int
    grid: tuple[int, int]  # (rows, cols)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskPlan:
    """Disjoint visible/masked index split of a patch grid."""

    visible_idx: np.ndarray  # sorted int64
    masked_idx: np.ndarray  # sorted int64
    ratio: float

    @property
    def n_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def mask_count(n_patches: int, ratio: float) -> int:
    """Number of masked patches: round(ratio * n) with half-up rounding."""
    return int(math.floor(ratio * n_patches + 0.5))


def patchify(img: np.ndarray, patch_size: int) -> PatchSequence:
    """Split an (H, W, C) image into flattened non-overlapping patches.

    Patch k covers grid cell k in row-major order; within a patch, pixels are
    flattened (row, col, channel).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise InvalidImage(f"expected a (H, W, C) array, got shape {img.shape}")
    h, w, c = img.shape
    if patch_size < 1:
        raise PatchGridError(f"patch_size must be >= 1, got {patch_size}")
    if h % patch_size != 0 or w % patch_size != 0:
        raise PatchGridError(
            f"image {h}x{w} not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = img.reshape(rows, patch_size, cols, patch_size, c)
    x = x.transpose(0, 2, 1, 3, 4)
    patches = x.reshape(rows * cols, patch_size * patch_size * c)
    return PatchSequence(patches=patches, patch_size=patch_size, grid=(rows, cols))


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Exact inverse of patchify."""
    rows, cols = seq.grid
    ps = seq.patch_size
    n, dim = seq.patches.shape
    if n != rows * cols:
        raise PatchGridError(f"{n} patches inconsistent with grid {rows}x{cols}")
    if dim % (ps * ps) != 0:
        raise PatchGridError(
            f"patch_dim {dim} not a multiple of patch_size^2 = {ps * ps}")
    c = dim // (ps * ps)
    x = seq.patches.reshape(rows, cols, ps, ps, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * ps, cols * ps, c)


def sample_mask(n_patches: int, ratio: float, rng_seed) -> MaskPlan:
    """Draw a uniform random masked subset of round(ratio * n) patch indices.

    Deterministic given the seed: the index list is shuffled once and the
    first round(ratio * n) entries become the masked set.
    """
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatio(f"mask ratio must lie in [0, 1), got {ratio}")
    if n_patches < 1:
        raise InputError(f"n_patches must be >= 1, got {n_patches}")
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(n_patches)
    k = mask_count(n_patches, ratio)
    masked = np.sort(perm[:k]).astype(np.int64)
    visible = np.sort(perm[k:]).astype(np.int64)
    return MaskPlan(visible_idx=visible, masked_idx=masked, ratio=float(ratio))
