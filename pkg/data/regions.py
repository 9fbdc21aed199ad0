"""Region crop generation (fixed, random, landmark) and bilinear resizing."""

import csv
import math
from functools import lru_cache
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from data.images import FaceImage

SCHEMES = ("fixed", "random", "landmark")
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")

CORNER_SCALE = 0.75
CENTER_SCALES = (0.9, 0.85)
RANDOM_SCALE_RANGE = (0.7, 0.95)
DEFAULT_RADIUS_RATIO = 0.4

# floor() guard for products such as 0.85 * 20 that land a hair below an integer
_FLOOR_EPS = 1e-9


class RegionError(ValueError):
    """Raised for region specs that fall outside their image or are too small."""


class EmptyRegionSetError(RegionError):
    """Raised when landmark cropping leaves no region inside the image."""


@dataclass(frozen=True)
class RegionSpec:
    """A crop rectangle: top-left (x, y), extent (w, h). index 1..k within the crop set."""

    index: int
    scheme: str
    x: int
    y: int
    w: int
    h: int

    def fits(self, width: int, height: int) -> bool:
        return (self.x >= 0 and self.y >= 0 and self.w >= 1 and self.h >= 1
                and self.x + self.w <= width and self.y + self.h <= height)

    def validate(self, width: int, height: int):
        if not self.fits(width, height):
            raise RegionError(f"region {self} does not fit a {width}x{height} image")


@dataclass(frozen=True)
class Landmark:
    name: str
    x: float
    y: float

    def __post_init__(self):
        if self.name not in LANDMARK_NAMES:
            raise ValueError(f"unknown landmark {self.name!r}; expected one of {LANDMARK_NAMES}")


@dataclass(eq=False)
class CropSet:
    """The resized duplicate I_0 plus k resized crops and their specs."""

    original: FaceImage
    crops: List[FaceImage]
    specs: List[RegionSpec]

    def __post_init__(self):
        if len(self.crops) != len(self.specs):
            raise RegionError(f"{len(self.crops)} crops but {len(self.specs)} specs")
        shape = self.original.pixels.shape
        for crop in self.crops:
            if crop.pixels.shape != shape:
                raise RegionError(f"crop shape {crop.pixels.shape} differs from original {shape}")

    @property
    def k(self) -> int:
        return len(self.crops)

    def images(self) -> List[FaceImage]:
        """I_0 followed by I_1..I_k."""
        return [self.original] + list(self.crops)


def _floor(value: float) -> int:
    return int(math.floor(value + _FLOOR_EPS))


def _side(scale: float, length: int) -> int:
    return max(1, min(length, _floor(scale * length)))


def fixed_crops(image: FaceImage, scale_ratio: float = 1.0, min_side: int = 1) -> List[RegionSpec]:
    """Five fixed regions: top-left, top-right, center-down at 0.75, centered 0.9 and 0.85.

    scale_ratio multiplies every scale before flooring (region-size sweep);
    extents are clamped to the image. Raises RegionError if any side drops
    below min_side.
    """
    W, H = image.width, image.height
    cw, ch = _side(CORNER_SCALE * scale_ratio, W), _side(CORNER_SCALE * scale_ratio, H)
    specs = [
        RegionSpec(1, "fixed", 0, 0, cw, ch),
        RegionSpec(2, "fixed", W - cw, 0, cw, ch),
        RegionSpec(3, "fixed", (W - cw) // 2, H - ch, cw, ch),
    ]
    for index, scale in enumerate(CENTER_SCALES, start=4):
        w, h = _side(scale * scale_ratio, W), _side(scale * scale_ratio, H)
        specs.append(RegionSpec(index, "fixed", (W - w) // 2, (H - h) // 2, w, h))
    for spec in specs:
        if spec.w < min_side or spec.h < min_side:
            raise RegionError(f"scale ratio {scale_ratio} gives a {spec.w}x{spec.h} crop, below {min_side} pixels")
    return specs


def random_crops(image: FaceImage, n: int, rng_seed: Union[int, Sequence[int]]) -> List[RegionSpec]:
    """n random regions.

    Algorithm (numpy PCG64 via default_rng(rng_seed)), per region in order:
    sx, sy = uniform(0.7, 0.95, size=2); w = floor(sx W), h = floor(sy H);
    x = integers(0, W - w + 1); y = integers(0, H - h + 1).
    """
    if n < 1:
        raise ValueError("random_crops needs n >= 1")
    rng = np.random.default_rng(rng_seed)
    W, H = image.width, image.height
    low, high = RANDOM_SCALE_RANGE
    specs = []
    for index in range(1, n + 1):
        sx, sy = rng.uniform(low, high, size=2)
        w, h = _side(sx, W), _side(sy, H)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        specs.append(RegionSpec(index, "random", x, y, w, h))
    return specs


def landmark_crops(image: FaceImage, landmarks: Sequence[Landmark],
                   radius_ratio: float = DEFAULT_RADIUS_RATIO) -> List[RegionSpec]:
    """Square regions of side floor(2 r min(W, H)) centred on each landmark.

    Regions that leave the image are dropped, never clamped. Raises
    EmptyRegionSetError when nothing survives.
    """
    if not 1 <= len(landmarks) <= len(LANDMARK_NAMES):
        raise ValueError(f"expected 1-5 landmarks, got {len(landmarks)}")
    if not 0.0 < radius_ratio <= 0.5:
        raise ValueError(f"radius_ratio must be in (0, 0.5], got {radius_ratio}")
    W, H = image.width, image.height
    side = max(1, _floor(2.0 * radius_ratio * min(W, H)))
    half = side // 2
    specs = []
    for landmark in landmarks:
        x = int(math.floor(landmark.x)) - half
        y = int(math.floor(landmark.y)) - half
        spec = RegionSpec(len(specs) + 1, "landmark", x, y, side, side)
        if spec.fits(W, H):
            specs.append(spec)
    if not specs:
        raise EmptyRegionSetError(f"no landmark region of side {side} fits a {W}x{H} image")
    return specs


def generate_regions(image: FaceImage, scheme: str, n: int = 3, rng_seed: Union[int, Sequence[int]] = 0,
                     landmarks: Optional[Sequence[Landmark]] = None,
                     radius_ratio: float = DEFAULT_RADIUS_RATIO, scale_ratio: float = 1.0) -> List[RegionSpec]:
    """Dispatch to a crop scheme; landmark cropping falls back to fixed crops."""
    if scheme == "fixed":
        return fixed_crops(image, scale_ratio)
    if scheme == "random":
        return random_crops(image, n, rng_seed)
    if scheme == "landmark":
        if not landmarks:
            return fixed_crops(image, scale_ratio)
        try:
            return landmark_crops(image, landmarks, radius_ratio)
        except EmptyRegionSetError:
            return fixed_crops(image, scale_ratio)
    raise ValueError(f"unknown crop scheme {scheme!r}; expected one of {SCHEMES}")


@lru_cache(maxsize=256)
def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) interpolation weights with half-pixel centre alignment.

    Cached; callers must not modify the result.
    """
    weights = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        weights[i, i0] += 1.0 - frac
        weights[i, i1] += frac
    return weights


def _target_size(target) -> Tuple[int, int]:
    if isinstance(target, int):
        return target, target
    width, height = target
    return int(width), int(height)


def resize(pixels: np.ndarray, target) -> np.ndarray:
    """Bilinear resize of an (h, w, c) array to target (width, height) or a square int."""
    width, height = _target_size(target)
    rows = bilinear_matrix(pixels.shape[0], height)
    cols = bilinear_matrix(pixels.shape[1], width)
    out = np.einsum("ij,jkc,lk->ilc", rows, pixels, cols, optimize=True)
    return np.clip(out, 0.0, 1.0)


def extract_and_resize(image: FaceImage, spec: RegionSpec, target) -> FaceImage:
    """Cut spec out of image and resize it to the backbone input size."""
    spec.validate(image.width, image.height)
    region = image.pixels[spec.y:spec.y + spec.h, spec.x:spec.x + spec.w, :]
    return FaceImage(resize(region, target))


def build_crop_set(image: FaceImage, specs: Sequence[RegionSpec], target) -> CropSet:
    original = FaceImage(resize(image.pixels, target))
    crops = [extract_and_resize(image, spec, target) for spec in specs]
    return CropSet(original=original, crops=crops, specs=list(specs))


def write_specs_csv(path_or_file, specs: Sequence[RegionSpec]):
    """Write `index,scheme,x,y,w,h` rows to a path or an open text file."""
    if hasattr(path_or_file, "write"):
        _write_specs(path_or_file, specs)
        return
    with open(path_or_file, "w", newline="") as f:
        _write_specs(f, specs)


def _write_specs(f, specs):
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(["index", "scheme", "x", "y", "w", "h"])
    for spec in specs:
        writer.writerow([spec.index, spec.scheme, spec.x, spec.y, spec.w, spec.h])
