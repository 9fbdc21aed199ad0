"""Face images as float64 pixel grids, with binary PGM/PPM I/O."""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

MIN_SIDE = 8


@dataclass(eq=False)
class FaceImage:
    """Pixels in [0, 1], shape (height, width, channels) with 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) pixels, got shape {pixels.shape}")
        if pixels.shape[0] < MIN_SIDE or pixels.shape[1] < MIN_SIDE:
            raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {pixels.shape[1]}x{pixels.shape[0]}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0 or not np.all(np.isfinite(pixels))):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = pixels

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def size(self):
        """(width, height)"""
        return self.width, self.height


def load_image(path: str) -> FaceImage:
    """Read an 8-bit binary PGM (P5) or PPM (P6) and normalise to [0, 1]."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Image not found: {path}")
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
        array = np.asarray(img, dtype=np.float64) / 255.0
    return FaceImage(array)


def save_image(path: str, image: FaceImage):
    """Quantise to 8 bits and write P5 for grayscale, P6 for RGB."""
    quantised = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    if image.channels == 1:
        Image.fromarray(quantised[:, :, 0]).save(path, format="PPM")
    else:
        Image.fromarray(quantised).save(path, format="PPM")
