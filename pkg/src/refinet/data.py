"""Image loading, normalization, pyramids and deterministic batching."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import backend as B
from .backend import Tensor

IMAGE_SUFFIXES = (".png",)


def _is_pow2(v: int) -> bool:
    return v > 0 and (v & (v - 1)) == 0


# ---------------------------------------------------------------------------
# pixels


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 [0, 255] linearly onto float32 [-1, 1]."""
    return np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def denormalize(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.rint((v + 1.0) * 127.5).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """Decode to an (H, W, 3) uint8 array; grayscale is replicated to RGB."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def center_crop_square(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return pixels[top:top + s, left:left + s]


def resize_nearest_pixels(pixels: np.ndarray, res: int) -> np.ndarray:
    """Square nearest-neighbour resize; integer downscales pick the top-left pixel."""
    s = pixels.shape[0]
    idx = (np.arange(res) * s) // res
    return pixels[idx][:, idx]


def to_chw(pixels: np.ndarray) -> np.ndarray:
    return normalize(pixels).transpose(2, 0, 1)


def to_hwc_pixels(chw: np.ndarray) -> np.ndarray:
    return denormalize(np.asarray(chw).transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# pyramids


@dataclass
class ImagePyramid:
    """Downscaled copies of a batch, lowest resolution first.

    ``levels`` covers lowest_res .. target_res/2; an entry may be None when the
    refine input does not reach that resolution. ``source_hr`` is the
    target-resolution original when one exists.
    """

    levels: list[Tensor | None]
    source_hr: Tensor | None = None

    @property
    def resolutions(self) -> list[int | None]:
        return [None if lv is None else lv.shape[-1] for lv in self.levels]

    @property
    def lowest(self) -> Tensor:
        return self.levels[0]


def _pyramid_resolutions(lowest_res: int, target_res: int) -> list[int]:
    if not (_is_pow2(lowest_res) and _is_pow2(target_res)):
        raise ValueError(f"resolutions must be powers of two, got lowest={lowest_res}, target={target_res}")
    if lowest_res > target_res // 2:
        raise ValueError(f"lowest_res {lowest_res} must be <= target_res/2 ({target_res // 2})")
    out, r = [], lowest_res
    while r < target_res:
        out.append(r)
        r *= 2
    return out


def make_pyramid(image: Tensor, lowest_res: int) -> ImagePyramid:
    """Build every level by repeated x2 nearest-neighbour downsampling of ``image``."""
    if image.data.ndim != 4 or image.shape[2] != image.shape[3]:
        raise ValueError(f"make_pyramid expects a square NCHW tensor, got {image.shape}")
    res = _pyramid_resolutions(lowest_res, image.shape[-1])
    levels: list[Tensor | None] = []
    cur = image
    for _ in res:
        cur = B.resize_nearest(cur, 2, "down")
        levels.append(cur)
    levels.reverse()
    return ImagePyramid(levels, image)


def pyramid_from_partial(image: Tensor, lowest_res: int, target_res: int) -> ImagePyramid:
    """Pyramid for an input below target resolution: levels above it are absent."""
    s = image.shape[-1]
    res = _pyramid_resolutions(lowest_res, target_res)
    if s == target_res:
        return make_pyramid(image, lowest_res)
    if s not in res:
        raise ValueError(f"input resolution {s} is not one of the pyramid levels {res} or target {target_res}")
    lower = make_pyramid(image, lowest_res).levels if s > lowest_res else []
    levels = lower + [image] + [None] * (len(res) - len(lower) - 1)
    return ImagePyramid(levels, None)


def stack_pyramids(pyramids: Sequence[ImagePyramid]) -> ImagePyramid:
    def cat(ts):
        if any(t is None for t in ts):
            return None
        return Tensor(np.concatenate([t.data for t in ts], axis=0))

    levels = [cat([p.levels[i] for p in pyramids]) for i in range(len(pyramids[0].levels))]
    return ImagePyramid(levels, cat([p.source_hr for p in pyramids]))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, R, R) float32 in [-1, 1]
    names: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError("a dataset needs at least one (3, R, R) image")
        if not self.names:
            self.names = [f"{i:05d}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def target_res(self) -> int:
        return self.images.shape[-1]


def load_pixels(path, target_res: int | None = None) -> np.ndarray:
    pixels = center_crop_square(read_png(path))
    if target_res is not None and pixels.shape[0] != target_res:
        pixels = resize_nearest_pixels(pixels, target_res)
    return pixels


def list_images(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image directory not found: {path}")
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(path, target_res: int, seed: int = 0) -> Dataset:
    files = list_images(path)
    if not files:
        raise ValueError(f"no PNG images in {path}")
    images, names = [], []
    for f in files:
        try:
            pixels = load_pixels(f, target_res)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            warnings.warn(f"skipping undecodable image {f}: {exc}", stacklevel=2)
            continue
        images.append(to_chw(pixels))
        names.append(f.stem)
    if not images:
        raise ValueError(f"no decodable images in {path}")
    return Dataset(np.stack(images), names, seed)


def toy_pixels(rng: np.random.Generator, res: int) -> np.ndarray:
    """A smooth radial gradient overlaid with 1-3 solid rectangles."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / max(res - 1, 1)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / np.sqrt(2)
    inner, outer = rng.uniform(0, 255, size=(2, 3))
    img = inner + (outer - inner) * np.clip(r / rng.uniform(0.4, 1.0), 0, 1)[..., None]
    for _ in range(int(rng.integers(1, 4))):
        h, w = rng.integers(max(1, res // 8), max(2, res // 2) + 1, size=2)
        top, left = rng.integers(0, res - h + 1), rng.integers(0, res - w + 1)
        img[top:top + h, left:left + w] = rng.uniform(0, 255, size=3)
    return np.rint(img).astype(np.uint8)


def toy_dataset(count: int, res: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    images = np.stack([to_chw(toy_pixels(rng, res)) for _ in range(count)])
    return Dataset(images, [f"toy_{i:05d}" for i in range(count)], seed)


def write_toy_dir(path, count: int, res: int, seed: int = 0) -> list[Path]:
    os.makedirs(path, exist_ok=True)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        p = Path(path) / f"toy_{i:05d}.png"
        write_png(p, toy_pixels(rng, res))
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# batching


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(ds: Dataset, batch_size: int) -> int:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > len(ds):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    return len(ds) // batch_size


def batch_indices(ds: Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    nb = batches_per_epoch(ds, batch_size)
    perm = epoch_permutation(len(ds), seed, epoch)
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(nb)]


def make_batch(ds: Dataset, idx: np.ndarray, lowest_res: int) -> ImagePyramid:
    return make_pyramid(Tensor(ds.images[idx]), lowest_res)


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int, lowest_res: int = 8) -> Iterator[ImagePyramid]:
    """Yield pyramid batches in a permutation fixed by (seed, epoch); the remainder is dropped."""
    for idx in batch_indices(ds, batch_size, seed, epoch):
        yield make_batch(ds, idx, lowest_res)


def batch_for_step(ds: Dataset, batch_size: int, seed: int, step: int, lowest_res: int) -> ImagePyramid:
    """The batch consumed by 0-based training ``step``; a pure function of its arguments."""
    nb = batches_per_epoch(ds, batch_size)
    epoch, i = divmod(step, nb)
    perm = epoch_permutation(len(ds), seed, epoch)
    return make_batch(ds, perm[i * batch_size:(i + 1) * batch_size], lowest_res)
