"""Image normalization, quadrant cropping and assembly of per-region image sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..pasi import Region

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

MODES = ("low_res", "four_crop")


class ImageFormatError(ValueError):
    pass


def _as_hwc(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[-1] != 3:
        raise ImageFormatError(f"expected an H x W x 3 RGB array, got shape {raw.shape}")
    return raw


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Scale 8-bit RGB (H, W, 3) to [0, 1] and standardize with ImageNet stats.

    Returns a float32 array laid out channels-first, (3, H, W).
    """
    raw = _as_hwc(raw)
    x = raw.astype(np.float64) / 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def denormalize_image(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_image`, returning (H, W, 3) values on the 0..255 scale."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ImageFormatError(f"expected a 3 x H x W array, got shape {x.shape}")
    hwc = x.transpose(1, 2, 0) * IMAGENET_STD + IMAGENET_MEAN
    return hwc * 255.0


def four_crop(image: np.ndarray) -> list[np.ndarray]:
    """Split an (H, W, ...) image into its quadrants: TL, TR, BL, BR."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % 2 or w % 2:
        raise ImageFormatError(f"four_crop needs even sides, got {h}x{w}; pad first")
    hh, hw = h // 2, w // 2
    return [image[:hh, :hw], image[:hh, hw:], image[hh:, :hw], image[hh:, hw:]]


def recompose(crops: Sequence[np.ndarray]) -> np.ndarray:
    if len(crops) != 4:
        raise ImageFormatError(f"expected 4 crops, got {len(crops)}")
    top = np.concatenate([crops[0], crops[1]], axis=1)
    bottom = np.concatenate([crops[2], crops[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def resize_rgb(raw: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an 8-bit RGB array to ``size`` = (H, W)."""
    raw = _as_hwc(raw)
    h, w = size
    if raw.shape[:2] == (h, w):
        return raw.astype(np.uint8, copy=False)
    img = Image.fromarray(raw.astype(np.uint8), mode="RGB")
    return np.asarray(img.resize((w, h), Image.BILINEAR))


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def write_rgb(path: str | Path, raw: np.ndarray) -> None:
    Image.fromarray(_as_hwc(raw).astype(np.uint8), mode="RGB").save(path, format="PNG")


def set_capacity(region: Region | str, mode: str) -> int:
    region = Region.parse(region)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return region.image_count * (4 if mode == "four_crop" else 1)


@dataclass
class RegionalImageSet:
    """Fixed-capacity image set for one region.

    ``images`` has shape (capacity, 3, H, W) and holds standardized values;
    slots whose ``valid_mask`` entry is False are all zero.
    """

    region: Region
    images: np.ndarray
    valid_mask: np.ndarray
    sources: list = field(default_factory=list)

    def __post_init__(self):
        self.region = Region.parse(self.region)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ImageFormatError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.valid_mask.shape != (self.images.shape[0],):
            raise ImageFormatError("valid_mask length must match the number of slots")

    @property
    def capacity(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    @classmethod
    def empty(cls, region, mode: str, size: tuple[int, int]) -> "RegionalImageSet":
        cap = set_capacity(region, mode)
        return cls(region, np.zeros((cap, 3, *size), np.float32), np.zeros(cap, bool))


def assemble_region_set(
    images: Iterable[tuple[int, np.ndarray]],
    region: Region | str,
    mode: str = "low_res",
    target_size: tuple[int, int] = (224, 224),
    sources: Sequence | None = None,
) -> RegionalImageSet:
    """Build a masked set from ``(slot_index, raw RGB array)`` pairs.

    In ``four_crop`` mode each photo is resized to twice ``target_size`` and
    split into quadrants, which occupy slots ``4 * slot + crop``.
    """
    region = Region.parse(region)
    items = list(images)
    n = region.image_count
    if len(items) > n:
        raise ValueError(f"{len(items)} images for {region.value}, capacity is {n}")
    out = RegionalImageSet.empty(region, mode, target_size)
    src = [None] * out.capacity
    seen = set()
    for k, (slot, raw) in enumerate(items):
        if not 0 <= slot < n:
            raise ValueError(f"slot {slot} outside 0..{n - 1} for {region.value}")
        if slot in seen:
            raise ValueError(f"duplicate slot {slot} for {region.value}")
        seen.add(slot)
        tag = sources[k] if sources is not None else slot
        if mode == "four_crop":
            big = resize_rgb(raw, (2 * target_size[0], 2 * target_size[1]))
            for c, crop in enumerate(four_crop(big)):
                out.images[4 * slot + c] = normalize_image(crop)
                out.valid_mask[4 * slot + c] = True
                src[4 * slot + c] = (tag, c)
        else:
            out.images[slot] = normalize_image(resize_rgb(raw, target_size))
            out.valid_mask[slot] = True
            src[slot] = tag
    out.sources = src
    return out
