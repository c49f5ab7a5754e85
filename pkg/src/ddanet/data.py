"""Image/mask ingestion, grayscale targets, resizing, splitting, and the
synthetic blob dataset used for desk-scale training runs.

On-disk layout: ``<root>/images/*.png`` paired with ``<root>/masks/*.png`` by
identical file stem. Images load to (1, 3, H, W) float arrays in [0, 1];
masks binarize at byte value 128 and load to (1, 1, H, W) arrays of {0, 1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
_SUPPORTED_MODES = ("L", "LA", "P", "RGB", "RGBA")


@dataclass
class DatasetItem:
    stem: str
    image: "np.ndarray | Path"
    mask: "np.ndarray | Path"


@dataclass
class Dataset:
    items: list[DatasetItem]
    name: str = "dataset"
    source: str = "directory"

    def __len__(self) -> int:
        return len(self.items)

    def load_pair(self, index: int, size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Image/mask pair, optionally resized to size x size."""
        item = self.items[index]
        img = item.image if isinstance(item.image, np.ndarray) else load_image(item.image)
        mask = item.mask if isinstance(item.mask, np.ndarray) else load_mask(item.mask)
        if img.shape[2:] != mask.shape[2:]:
            raise ValueError(
                f"item {item.stem!r}: image {img.shape[2:]} and mask {mask.shape[2:]} sizes differ"
            )
        if size is not None and img.shape[2:] != (size, size):
            img = resize_bilinear(img, size, size)
            mask = resize_mask(mask, size, size)
        return img, mask


@dataclass
class SplitSpec:
    train_fraction: float = 0.88
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


def _open_8bit(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise IOError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in _SUPPORTED_MODES:
        raise IOError(f"cannot read image {path}: unsupported mode {img.mode!r}")
    return img


def load_image(path) -> np.ndarray:
    """8-bit RGB/grayscale file -> (1, 3, H, W) float32 in [0, 1]."""
    img = _open_8bit(Path(path)).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)[None]


def load_mask(path) -> np.ndarray:
    """8-bit file -> (1, 1, H, W) float32 mask, byte >= 128 mapping to 1."""
    img = _open_8bit(Path(path)).convert("L")
    arr = (np.asarray(img, dtype=np.uint8) >= 128).astype(np.float32)
    return arr[None, None]


def save_mask(path, mask: np.ndarray) -> None:
    """Write a (1, 1, H, W) binary mask as a 0/255 single-channel PNG."""
    data = (np.asarray(mask).reshape(mask.shape[-2:]) >= 0.5).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def save_gray(path, img: np.ndarray) -> None:
    """Write a (1, 1, H, W) image in [0, 1] as an 8-bit grayscale PNG."""
    data = np.clip(np.asarray(img).reshape(img.shape[-2:]), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="L").save(path)


def save_rgb(path, img: np.ndarray) -> None:
    """Write a (1, 3, H, W) image in [0, 1] as an 8-bit RGB PNG."""
    data = np.clip(np.asarray(img)[0], 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="RGB").save(path)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """BT.601 luminance of a (N, 3, H, W) image: 0.299 R + 0.587 G + 0.114 B."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (N,3,H,W) image, got {image.shape}")
    r, g, b = image[:, 0], image[:, 1], image[:, 2]
    return (0.299 * r + 0.587 * g + 0.114 * b)[:, None]


def _sample_axis(size_in: int, size_out: int):
    """Source indices and lerp weights for half-pixel-center resampling."""
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size_in - 1)
    t = src - lo
    return lo, hi, t


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of (N, C, H, W) with pixel centers at (i + 0.5)/N.

    Resizing to the input size reproduces it exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    n, c, h, w = x.shape
    ylo, yhi, ty = _sample_axis(h, out_h)
    xlo, xhi, tx = _sample_axis(w, out_w)
    ty = ty[:, None]
    top = x[:, :, ylo][:, :, :, xlo] * (1.0 - tx) + x[:, :, ylo][:, :, :, xhi] * tx
    bot = x[:, :, yhi][:, :, :, xlo] * (1.0 - tx) + x[:, :, yhi][:, :, :, xhi] * tx
    return (top * (1.0 - ty) + bot * ty).astype(x.dtype)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize followed by re-binarization at 0.5."""
    return (resize_bilinear(mask, out_h, out_w) >= 0.5).astype(mask.dtype)


def from_directory(root) -> Dataset:
    """Scan <root>/images and <root>/masks, pairing files by stem.

    Items are ordered lexicographically by stem; any stem present on only one
    side is a hard error listing the offenders.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise IOError(f"missing dataset directory {d}")

    def scan(d: Path) -> dict[str, Path]:
        found = {}
        for p in sorted(d.iterdir()):
            if p.suffix.lower() in _IMAGE_SUFFIXES:
                found[p.stem] = p
        return found

    images, masks = scan(img_dir), scan(mask_dir)
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise ValueError(f"unpaired image/mask stems in {root}: {', '.join(unpaired)}")
    if not images:
        raise ValueError(f"no image files found under {img_dir}")
    items = [DatasetItem(stem, images[stem], masks[stem]) for stem in sorted(images)]
    return Dataset(items=items, name=root.name, source="directory")


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic partition: floor(train_fraction * N) items to train."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    n_train = int(math.floor(spec.train_fraction * n))
    train_items = [dataset.items[i] for i in order[:n_train]]
    val_items = [dataset.items[i] for i in order[n_train:]]
    return (
        Dataset(train_items, name=f"{dataset.name}/train", source=dataset.source),
        Dataset(val_items, name=f"{dataset.name}/val", source=dataset.source),
    )


def _smooth_noise(rng: np.random.Generator, channels: int, size: int, grid: int) -> np.ndarray:
    """Low-frequency noise: a coarse random grid upsampled bilinearly."""
    coarse = rng.uniform(0.0, 1.0, (1, channels, grid, grid)).astype(np.float32)
    return resize_bilinear(coarse, size, size)[0]


def synthetic_blobs(n: int, size: int, seed: int) -> Dataset:
    """Generate n images of elliptical "polyps" on a textured dark background.

    Each image carries 1-3 bright reddish ellipses; the mask is exactly the
    rendered ellipse union. Fully determined by (n, size, seed). Semi-axes
    are bounded so the foreground fraction always lands inside (0.01, 0.6).
    """
    if size < 16 or size % 16 != 0:
        raise ValueError(f"size {size} must be a positive multiple of 16")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    items = []
    for idx in range(n):
        base = rng.uniform(0.18, 0.32)
        image = base + 0.25 * _smooth_noise(rng, 3, size, max(2, size // 8))
        image += 0.02 * rng.standard_normal((3, size, size)).astype(np.float32)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            a = rng.uniform(0.08, 0.22) * size
            b = rng.uniform(0.08, 0.22) * size
            margin = max(a, b)
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            theta = rng.uniform(0.0, np.pi)
            ct, st = np.cos(theta), np.sin(theta)
            u = ((xx - cx) * ct + (yy - cy) * st) / a
            v = (-(xx - cx) * st + (yy - cy) * ct) / b
            ellipse = u * u + v * v <= 1.0
            color = np.array(
                [rng.uniform(0.6, 0.9), rng.uniform(0.25, 0.45), rng.uniform(0.3, 0.5)],
                dtype=np.float32,
            )
            texture = 0.1 * _smooth_noise(rng, 3, size, max(2, size // 4))
            blob = color[:, None, None] + texture
            image = np.where(ellipse[None], blob, image)
            mask |= ellipse
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        items.append(
            DatasetItem(
                stem=f"blob_{idx:04d}",
                image=image[None],
                mask=mask.astype(np.float32)[None, None],
            )
        )
    return Dataset(items=items, name=f"synthetic-{seed}", source="synthetic")


def export_dataset(dataset: Dataset, root) -> None:
    """Materialize a dataset to the images/ + masks/ directory layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, item in enumerate(dataset.items):
        img, mask = dataset.load_pair(i)
        save_rgb(root / "images" / f"{item.stem}.png", img)
        save_mask(root / "masks" / f"{item.stem}.png", mask)
