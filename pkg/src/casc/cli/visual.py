"""Tiled, labeled image grids written losslessly."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from casc.data import float_to_pixels
from casc.errors import ArgumentError

LABEL_BAND_PX = 12
TILE_PAD_PX = 2


def _as_single_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ArgumentError("pass one image per label (got a batch)")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ArgumentError(f"expected (H,W,3) image, got {arr.shape}")
    return arr


def export_visual_grid(entries, path) -> Path:
    """Write labeled images as a near-square tile grid to a lossless PNG.

    `entries` is a list of (label, image) pairs; images are float arrays in
    [-1,1]. Image pixels are stored exactly as the clamped [-1,1] -> [0,255]
    mapping; labels render in a band above each tile."""
    entries = list(entries)
    if not entries:
        raise ArgumentError("need at least one labeled image")
    images = [_as_single_image(img) for _, img in entries]
    h, w = images[0].shape[:2]
    if any(im.shape[:2] != (h, w) for im in images):
        raise ArgumentError("all images in a grid must share one size")
    n = len(entries)
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    tile_h = LABEL_BAND_PX + h + TILE_PAD_PX
    tile_w = w + TILE_PAD_PX
    canvas = np.full((rows * tile_h + TILE_PAD_PX, cols * tile_w + TILE_PAD_PX, 3), 255, dtype=np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y = TILE_PAD_PX + r * tile_h + LABEL_BAND_PX
        x = TILE_PAD_PX + c * tile_w
        canvas[y : y + h, x : x + w] = float_to_pixels(im)
    pil = Image.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    for i, (label, _) in enumerate(entries):
        r, c = divmod(i, cols)
        y = TILE_PAD_PX + r * tile_h
        x = TILE_PAD_PX + c * tile_w
        draw.text((x, y), str(label)[:24], fill=(0, 0, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")
    return path


def tile_pixel_region(index: int, n: int, image_hw: tuple[int, int]) -> tuple[slice, slice]:
    """Canvas slices of tile `index`'s image region (for fidelity checks)."""
    h, w = image_hw
    cols = math.ceil(math.sqrt(n))
    r, c = divmod(index, cols)
    y = TILE_PAD_PX + r * (LABEL_BAND_PX + h + TILE_PAD_PX) + LABEL_BAND_PX
    x = TILE_PAD_PX + c * (w + TILE_PAD_PX)
    return slice(y, y + h), slice(x, x + w)
