"""Dataset ingestion, the synthetic blob-image fixture, and deterministic
batch iteration."""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, InputError

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class Dataset:
    items: list  # (image (H, W, 3) float64 in [0,1], label int, id str)
    n_classes: int
    name: str
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label, _ in self.items], dtype=np.int64)

    def ids(self) -> list[str]:
        return [item_id for _, _, item_id in self.items]

    def channel_stats(self):
        """Per-channel mean and std over every pixel of every item (std
        floored at 1e-6)."""
        pixels = np.concatenate([img.reshape(-1, 3) for img, _, _ in self.items])
        mean = pixels.mean(axis=0)
        std = np.maximum(pixels.std(axis=0), 1e-6)
        return tuple(mean.tolist()), tuple(std.tolist())


def _center_crop_square(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return arr[top:top + side, left:left + side]


def load_image_folder(root_path) -> Dataset:
    """Load root/<class_name>/<image files> with deterministic lexicographic
    ordering. Labels follow sorted class-directory order. Unreadable files
    are skipped and counted; non-square images are center-cropped square."""
    from PIL import Image  # imported lazily; only folder ingestion needs it

    root = Path(root_path)
    if not root.is_dir():
        raise EmptyDatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise EmptyDatasetError(f"dataset root {root} has no class directories")

    items = []
    skipped = 0
    for label, class_dir in enumerate(class_dirs):
        files = sorted(f for f in class_dir.iterdir()
                       if f.is_file() and f.suffix.lower() in _IMAGE_SUFFIXES)
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except OSError:
                skipped += 1
                continue
            arr = _center_crop_square(arr)
            items.append((arr, label, f"{class_dir.name}/{f.name}"))
    if not items:
        raise EmptyDatasetError(f"no readable PNG/JPEG files under {root}")
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable file(s) under {root}")
    return Dataset(items=items, n_classes=len(class_dirs), name=root.name,
                   skipped=skipped)


def _hsv_to_rgb(h: float, s: float, v: float):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def synth_blobs(n_classes: int, per_class: int, image_size: int, seed) -> Dataset:
    """Synthetic class-separable images: each class has a distinct base hue,
    sinusoid texture frequency, and blob anchor; samples jitter the blob
    position and phase and add sigma=0.05 pixel noise. Deterministic per
    (seed, class, sample index)."""
    if n_classes < 1 or per_class < 1 or image_size < 1:
        raise InputError("n_classes, per_class and image_size must be positive")
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    items = []
    for k in range(n_classes):
        base = np.array(_hsv_to_rgb(k / n_classes, 0.85, 0.9))
        angle = 2.0 * np.pi * k / n_classes
        anchor = (image_size / 2.0 + (image_size / 4.0) * np.sin(angle),
                  image_size / 2.0 + (image_size / 4.0) * np.cos(angle))
        freq = 2.0 * np.pi * (k + 1) / image_size
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), k, i)))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img = np.empty((image_size, image_size, 3))
            img[:] = 0.30 * base + 0.10
            img += 0.12 * np.sin(freq * (xx + yy) + phase)[..., None]
            cy = anchor[0] + rng.uniform(-image_size / 10.0, image_size / 10.0)
            cx = anchor[1] + rng.uniform(-image_size / 10.0, image_size / 10.0)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (image_size / 5.0) ** 2))
            bright = np.clip(0.9 * base + 0.1, 0.0, 1.0)
            img = img * (1.0 - bump[..., None]) + bright * bump[..., None]
            img += rng.normal(0.0, 0.05, img.shape)
            img = np.clip(img, 0.0, 1.0)
            items.append((img, k, f"blob_{k:02d}_{i:04d}"))
    return Dataset(items=items, n_classes=n_classes,
                   name=f"synth_blobs_{n_classes}x{per_class}_{image_size}")


def batches(dataset, batch_size: int, epoch_seed, drop_partial: bool = False):
    """Seeded shuffle of dataset indices, chunked into batches. The final
    partial batch is dropped when drop_partial is set (contrastive stages
    need at least a pair per batch) and kept otherwise."""
    n = len(dataset) if not isinstance(dataset, (int, np.integer)) else int(dataset)
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(epoch_seed)
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if drop_partial and out and len(out[-1]) < batch_size:
        out.pop()
    return out
