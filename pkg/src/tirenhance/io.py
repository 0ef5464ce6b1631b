"""
Image I/O, dataset manifests and paired augmentation.

Every raster inside the toolkit is a single-channel float64 array in [0, 1]
wrapped in :class:`Image`, which also remembers the bit depth of the file it
came from.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

SUPPORTED_SUFFIXES = (".png", ".tif", ".tiff")
_MODE_DEPTH = {"L": 8, "I;16": 16, "I;16L": 16, "I;16B": 16, "I;16N": 16}


class ImageFormatError(ValueError):
    """Raised for unsupported or multi-channel image files."""


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel raster with intensities in [0, 1].

    Parameters
    ----------
    pixels : np.ndarray
        H x W array. Converted to float64 on construction.
    source_depth : int
        Bit depth of the originating file (8 or 16).
    """

    pixels: np.ndarray
    source_depth: int = 16

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"Image must be 2-D, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("Image must be at least 1x1")
        if self.source_depth not in (8, 16):
            raise ValueError(f"source_depth must be 8 or 16, got {self.source_depth}")
        if not np.all(np.isfinite(px)):
            raise ValueError("Image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("Image pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(pixels, self.source_depth)


def load_image(path: str | os.PathLike) -> Image:
    """Read an 8- or 16-bit grayscale PNG/TIFF and normalize to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageFormatError(f"unsupported container: {path.suffix}")
    try:
        pil = PILImage.open(path)
    except (OSError, PILImage.UnidentifiedImageError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    with pil:
        if getattr(pil, "n_frames", 1) != 1:
            raise ImageFormatError(f"{path} has {pil.n_frames} pages; expected one")
        depth = _MODE_DEPTH.get(pil.mode)
        if depth is None:
            raise ImageFormatError(
                f"{path} has mode {pil.mode!r}; only 8/16-bit single-channel images are accepted"
            )
        raw = np.array(pil)
    if raw.ndim != 2:
        raise ImageFormatError(f"{path} is not single-channel (shape {raw.shape})")
    return Image(raw.astype(np.float64) / (2**depth - 1), depth)


def quantize(pixels: np.ndarray, depth: int) -> np.ndarray:
    """Map [0, 1] floats to unsigned integers with round(x * (2**depth - 1))."""
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    dtype = np.uint8 if depth == 8 else np.uint16
    return np.rint(np.clip(pixels, 0.0, 1.0) * (2**depth - 1)).astype(dtype)


def save_image(img: Image, path: str | os.PathLike, depth: int | None = None) -> Path:
    """Quantize and write ``img``; the container is chosen by suffix."""
    path = Path(path)
    depth = img.source_depth if depth is None else depth
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageFormatError(f"unsupported container: {path.suffix}")
    data = quantize(img.pixels, depth)
    try:
        PILImage.fromarray(data).save(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _check_same_shape(images: Sequence[Image]):
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")


def crop_offsets(shape: tuple[int, int], size: int, rng: np.random.Generator) -> tuple[int, int]:
    h, w = shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def random_crop_stack(images: Sequence[Image], size: int, rng: np.random.Generator) -> list[Image]:
    """Crop every image at one shared random offset."""
    _check_same_shape(images)
    top, left = crop_offsets(images[0].shape, size, rng)
    return [im.with_pixels(im.pixels[top:top + size, left:left + size]) for im in images]


def random_crop_pair(a: Image, b: Image, size: int, rng: np.random.Generator) -> tuple[Image, Image]:
    ca, cb = random_crop_stack([a, b], size, rng)
    return ca, cb


def flip_stack(images: Sequence[Image], rng: np.random.Generator) -> list[Image]:
    """Apply one random horizontal/vertical flip decision to every image."""
    _check_same_shape(images)
    hflip, vflip = rng.random(2) < 0.5
    out = []
    for im in images:
        px = im.pixels
        if hflip:
            px = px[:, ::-1]
        if vflip:
            px = px[::-1, :]
        out.append(im.with_pixels(np.ascontiguousarray(px)))
    return out


def augment_flip(a: Image, b: Image, rng: np.random.Generator) -> tuple[Image, Image]:
    fa, fb = flip_stack([a, b], rng)
    return fa, fb


@dataclass
class DatasetManifest:
    """A split of a clean-image directory.

    ``entries`` holds ``(image_id, relative_path)`` pairs relative to ``root``.
    """

    root: str
    split: str
    entries: list[tuple[str, str]]
    seed: int = 0

    def __post_init__(self):
        if self.split not in ("train", "val", "all"):
            raise ValueError(f"unknown split {self.split!r}")
        if not self.entries:
            raise ValueError("manifest has no entries")
        self.entries = [(str(i), str(p)) for i, p in self.entries]
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in manifest")

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def path_of(self, image_id: str) -> Path:
        return Path(self.root) / dict(self.entries)[image_id]

    def load_all(self) -> dict[str, Image]:
        return {i: load_image(Path(self.root) / p) for i, p in self.entries}

    def to_dict(self) -> dict:
        return {"root": self.root, "split": self.split, "seed": self.seed,
                "entries": [list(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        unknown = set(d) - {"root", "split", "seed", "entries"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(d["root"], d["split"], [tuple(e) for e in d["entries"]], int(d.get("seed", 0)))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def scan_directory(root: str | os.PathLike) -> list[tuple[str, str]]:
    """List supported images under ``root`` as (stem, relative path), sorted."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in SUPPORTED_SUFFIXES)
    entries = [(p.relative_to(root).with_suffix("").as_posix(), p.relative_to(root).as_posix())
               for p in files]
    return entries


def split_manifest(root: str | os.PathLike, seed: int = 0, train_fraction: float = 0.8,
                   entries: list[tuple[str, str]] | None = None) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle of image ids into train/val manifests.

    The train side receives ``round(n * train_fraction)`` images, clipped so
    that both sides are non-empty whenever ``n >= 2``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    entries = scan_directory(root) if entries is None else list(entries)
    if len(entries) < 2:
        raise ValueError("need at least two images to split")
    entries = sorted(entries)
    order = np.random.default_rng(seed).permutation(len(entries))
    n_train = min(max(int(round(len(entries) * train_fraction)), 1), len(entries) - 1)
    train = [entries[i] for i in sorted(order[:n_train])]
    val = [entries[i] for i in sorted(order[n_train:])]
    return (DatasetManifest(str(root), "train", train, seed),
            DatasetManifest(str(root), "val", val, seed))


def synthetic_thermal_scene(size: int | tuple[int, int], rng: np.random.Generator) -> Image:
    """Procedural stand-in for a clean thermal frame.

    Smooth background gradient, a few warm blobs and rectangular structures,
    and faint texture. Used by the desk-scale experiments and the tests.
    """
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    img = 0.35 + 0.15 * (np.cos(angle) * xx + np.sin(angle) * yy)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, 1, 2) * (h / max(h, w), w / max(h, w))
        r = rng.uniform(0.05, 0.18)
        img += rng.uniform(0.15, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
    for _ in range(int(rng.integers(2, 5))):
        y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
        bh, bw = rng.integers(4, max(5, h // 2)), rng.integers(3, max(4, w // 3))
        img[y0:y0 + bh, x0:x0 + bw] += rng.uniform(-0.2, 0.25)
    img += 0.02 * np.sin(2 * np.pi * xx * rng.uniform(6, 14)) * np.sin(2 * np.pi * yy * rng.uniform(6, 14))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return Image(0.05 + 0.9 * img, 16)


def write_synthetic_dataset(root: str | os.PathLike, count: int, size: int, seed: int = 0) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    return [save_image(synthetic_thermal_scene(size, rng), root / f"scene_{i:04d}.png", 16)
            for i in range(count)]
