"""Weak and strong augmentation pipelines producing the two parallel views.

The weak pipeline only resizes and channel-normalizes. The strong pipeline
applies, in fixed order: random resized crop, color jitter, random grayscale,
random horizontal flip, random gaussian blur, then resize and normalize.
Strong augmentation is a pure function of (image, policy, seed).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InvalidImage

# ITU-R 601 luma weights, same convention as common image libraries.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class AugmentPolicy:
    """Parameters of one augmentation pipeline.

    kind="weak" pipelines ignore the stochastic knobs entirely; they resize to
    target_size and normalize with (normalize_mean, normalize_std) only.
    """

    kind: str  # "weak" | "strong"
    target_size: int
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    normalize_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"policy kind must be 'weak' or 'strong', got {self.kind!r}")
        if self.target_size < 1:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("grayscale_prob", "flip_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise ConfigError(f"jitter_strength must be >= 0, got {self.jitter_strength}")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError(f"normalize_std entries must be positive, got {self.normalize_std}")


def weak_policy(target_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> AugmentPolicy:
    return AugmentPolicy(kind="weak", target_size=target_size,
                         crop_scale_range=(1.0, 1.0), jitter_strength=0.0,
                         grayscale_prob=0.0, flip_prob=0.0, blur_prob=0.0,
                         normalize_mean=tuple(mean), normalize_std=tuple(std))


def strong_policy(target_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0),
                  **knobs) -> AugmentPolicy:
    return AugmentPolicy(kind="strong", target_size=target_size,
                         normalize_mean=tuple(mean), normalize_std=tuple(std),
                         **knobs)


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidImage(f"expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidImage("zero-area image")
    if not np.isfinite(arr).all():
        raise InvalidImage("image contains non-finite pixel values")
    return arr


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to (size, size) with half-pixel centre alignment.

    Equal input and output sizes return the input unchanged (exact identity).
    """
    h, w = img.shape[:2]
    if h == size and w == size:
        return img.copy()

    def axis_coords(src_len, dst_len):
        coords = (np.arange(dst_len, dtype=np.float64) + 0.5) * (src_len / dst_len) - 0.5
        coords = np.clip(coords, 0.0, src_len - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src_len - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, size)
    x0, x1, fx = axis_coords(w, size)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def _normalize(img: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    mean = np.asarray(policy.normalize_mean, dtype=np.float64)
    std = np.asarray(policy.normalize_std, dtype=np.float64)
    return (img - mean) / std


def _random_resized_crop(arr: np.ndarray, scale_range, rng) -> np.ndarray:
    """Area-and-aspect random crop; falls back to the full image after 10
    failed window draws."""
    h, w = arr.shape[:2]
    area = h * w
    log_ratio = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))
    for _ in range(10):
        target_area = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return arr[top:top + ch, left:left + cw]
    return arr


def _gray(arr: np.ndarray) -> np.ndarray:
    return arr @ _LUMA


def _shift_hue(arr: np.ndarray, delta: float) -> np.ndarray:
    """Rotate hue by `delta` (fraction of the full wheel) via RGB<->HSV."""
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    maxc = arr.max(axis=-1)
    minc = arr.min(axis=-1)
    v = maxc
    rangec = maxc - minc
    safe_range = np.where(rangec == 0, 1.0, rangec)
    s = np.where(maxc > 0, rangec / np.where(maxc == 0, 1.0, maxc), 0.0)

    rc = (maxc - r) / safe_range
    gc = (maxc - g) / safe_range
    bc = (maxc - b) / safe_range
    hue = np.select([maxc == r, maxc == g], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc)
    hue = (hue / 6.0) % 1.0
    hue = np.where(rangec == 0, 0.0, hue)

    hue = (hue + delta) % 1.0

    i = np.floor(hue * 6.0)
    f = hue * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6

    # Sextant table of (r, g, b) choices, indexed by i per pixel.
    channel_options = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    out = np.empty_like(arr)
    for ch in range(3):
        stacked = np.stack([opt[ch] for opt in channel_options], axis=-1)
        out[..., ch] = np.take_along_axis(stacked, i[..., None], axis=-1)[..., 0]
    return np.clip(out, 0.0, 1.0)


def _color_jitter(arr: np.ndarray, strength: float, rng) -> np.ndarray:
    """Brightness, contrast, saturation factors in [1 - 0.8s, 1 + 0.8s] and a
    hue rotation in [-0.2s, 0.2s], applied in that fixed order."""
    lo = max(0.0, 1.0 - 0.8 * strength)
    hi = 1.0 + 0.8 * strength
    f_bright = rng.uniform(lo, hi)
    f_contrast = rng.uniform(lo, hi)
    f_sat = rng.uniform(lo, hi)
    d_hue = rng.uniform(-0.2 * strength, 0.2 * strength)

    arr = np.clip(arr * f_bright, 0.0, 1.0)
    arr = np.clip(f_contrast * arr + (1.0 - f_contrast) * _gray(arr).mean(), 0.0, 1.0)
    arr = np.clip(f_sat * arr + (1.0 - f_sat) * _gray(arr)[..., None], 0.0, 1.0)
    if d_hue != 0.0:
        arr = _shift_hue(arr, d_hue)
    return arr


def weak_augment(img, policy: AugmentPolicy) -> np.ndarray:
    """Resize to (target_size, target_size) and channel-normalize. Deterministic."""
    if policy.kind != "weak":
        raise ConfigError(f"weak_augment requires a weak policy, got kind={policy.kind!r}")
    arr = _check_image(img)
    arr = resize_bilinear(arr, policy.target_size)
    return _normalize(arr, policy)


def strong_augment(img, policy: AugmentPolicy, seed) -> np.ndarray:
    """Stochastic view: crop -> jitter -> grayscale -> flip -> blur -> resize
    -> normalize. Bit-identical output for identical (img, policy, seed)."""
    if policy.kind != "strong":
        raise ConfigError(f"strong_augment requires a strong policy, got kind={policy.kind!r}")
    arr = _check_image(img)
    rng = np.random.default_rng(seed)

    arr = _random_resized_crop(arr, policy.crop_scale_range, rng)
    if policy.jitter_strength > 0:
        arr = _color_jitter(arr, policy.jitter_strength, rng)
    if rng.uniform() < policy.grayscale_prob:
        arr = np.repeat(_gray(arr)[..., None], 3, axis=-1)
    if rng.uniform() < policy.flip_prob:
        arr = arr[:, ::-1, :]
    if rng.uniform() < policy.blur_prob:
        sigma = rng.uniform(0.1, 2.0)
        arr = gaussian_filter(arr, sigma=(sigma, sigma, 0.0))
        arr = np.clip(arr, 0.0, 1.0)
    arr = resize_bilinear(np.ascontiguousarray(arr), policy.target_size)
    return _normalize(arr, policy)
