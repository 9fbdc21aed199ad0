"""Synthetic localisation task: a class glyph inside one fixed-crop region, occluders everywhere else.

Occluders are constant-value rectangles kept clear of the whole signal
region. An occluder large enough to hold a glyph carries a decoy: the glyph
of another class, printed at the same contrast on the occluder's raised
background. Crops that overlap the signal region therefore see the decoy
too, while the signal crop never does.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from data.datasets import ManifestRecord, RegionDataset, write_manifest
from data.images import MIN_SIDE, FaceImage, save_image
from data.regions import RegionSpec, fixed_crops

GLYPH_CODE_SIDE = 4
SPLITS = {"train": 0, "test": 1}

Box = Tuple[int, int, int, int]


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_classes: int = 3
    signal_region: int = 1
    occluder_prob: float = 0.7
    occluder_size_range: Tuple[int, int] = (12, 16)
    occluder_value_range: Tuple[float, float] = (0.2, 0.4)
    decoy_prob: float = 1.0
    noise_level: float = 0.3
    glyph_intensity: float = 0.6
    num_train: int = 2000
    num_test: int = 500
    seed: int = 0
    glyph_size: int = 12

    def validate(self):
        if self.image_size < MIN_SIDE:
            raise SyntheticSpecError(f"image_size must be >= {MIN_SIDE}")
        if self.num_classes < 2:
            raise SyntheticSpecError("need at least 2 classes")
        for name in ("occluder_prob", "decoy_prob", "noise_level"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SyntheticSpecError(f"{name} {value} outside [0, 1]")
        if not 1 <= self.signal_region <= 5:
            raise SyntheticSpecError(f"signal_region must be a fixed-crop index 1..5, got {self.signal_region}")
        if self.num_train < 0 or self.num_test < 0:
            raise SyntheticSpecError("sample counts must be non-negative")
        if not 0.0 < self.glyph_intensity <= 1.0:
            raise SyntheticSpecError(f"glyph_intensity {self.glyph_intensity} outside (0, 1]")
        low, high = self.occluder_value_range
        if not 0.0 <= low <= high or high + self.glyph_intensity > 1.0 + 1e-12:
            raise SyntheticSpecError(
                f"occluder_value_range {self.occluder_value_range} plus glyph_intensity must stay within [0, 1]"
            )
        low, high = self.occluder_size_range
        if not 1 <= low <= high <= self.image_size:
            raise SyntheticSpecError(f"bad occluder_size_range {self.occluder_size_range}")
        if self.glyph_size < GLYPH_CODE_SIDE:
            raise SyntheticSpecError(f"glyph_size must be >= {GLYPH_CODE_SIDE}")
        region = signal_spec(self)
        if region.w < self.glyph_size or region.h < self.glyph_size:
            raise SyntheticSpecError(
                f"glyph of side {self.glyph_size} does not fit signal region {self.signal_region}"
            )
        if self.occluder_prob > 0 and outside_room(region, self.image_size) < high:
            raise SyntheticSpecError(f"occluders up to {high}px do not fit outside signal region {self.signal_region}")


def signal_spec(spec: SyntheticSpec) -> RegionSpec:
    blank = FaceImage(np.zeros((spec.image_size, spec.image_size)))
    return fixed_crops(blank)[spec.signal_region - 1]


def region_box(region: RegionSpec) -> Box:
    return region.x, region.y, region.w, region.h


def outside_room(region: RegionSpec, image_size: int) -> int:
    """Widest strip between the region and an image edge."""
    return max(region.x, image_size - region.x - region.w, region.y, image_size - region.y - region.h)


def class_glyphs(num_classes: int, size: int) -> List[np.ndarray]:
    """Distinct binary glyphs, one per class, upscaled from 4x4 codes."""
    codes: List[np.ndarray] = []
    attempt = 0
    while len(codes) < num_classes:
        code = np.random.default_rng([7919, len(codes), attempt]).integers(0, 2, (GLYPH_CODE_SIDE, GLYPH_CODE_SIDE))
        attempt += 1
        ones = int(code.sum())
        if ones < 4 or ones > 12 or any(np.array_equal(code, c) for c in codes):
            continue
        codes.append(code)
    index = (np.arange(size) * GLYPH_CODE_SIDE) // size
    return [code[np.ix_(index, index)].astype(np.float64) for code in codes]


def _occluder_token(box: Box, image_size: int) -> str:
    x, y, w, h = box
    centre_y = y + h / 2.0
    if centre_y < image_size / 3.0:
        return "upper"
    if centre_y > 2.0 * image_size / 3.0:
        return "bottom"
    return "left_right"


def _place_occluder(rng: np.random.Generator, spec: SyntheticSpec, exclusion: Box) -> Optional[Box]:
    """Uniform over every placement that stays in the image and misses the exclusion box."""
    low, high = spec.occluder_size_range
    w, h = (int(v) for v in rng.integers(low, high + 1, size=2))
    ex, ey, ew, eh = exclusion
    xs, ys = np.meshgrid(np.arange(spec.image_size - w + 1), np.arange(spec.image_size - h + 1), indexing="xy")
    xs, ys = xs.ravel(), ys.ravel()
    clear = (xs + w <= ex) | (xs >= ex + ew) | (ys + h <= ey) | (ys >= ey + eh)
    candidates = np.nonzero(clear)[0]
    if candidates.size == 0:
        return None
    pick = candidates[int(rng.integers(candidates.size))]
    return int(xs[pick]), int(ys[pick]), w, h


def _decoy(rng: np.random.Generator, spec: SyntheticSpec, occluder: Box, label: int) -> Tuple[Optional[Box], Optional[int]]:
    ox, oy, ow, oh = occluder
    g = spec.glyph_size
    if ow < g or oh < g or rng.random() >= spec.decoy_prob:
        return None, None
    decoy_label = int((label + rng.integers(1, spec.num_classes)) % spec.num_classes)
    dx = ox + int(rng.integers(0, ow - g + 1))
    dy = oy + int(rng.integers(0, oh - g + 1))
    return (dx, dy, g, g), decoy_label


def _sample(spec: SyntheticSpec, glyphs: List[np.ndarray], split: str, index: int):
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    size, g = spec.image_size, spec.glyph_size
    label = index % spec.num_classes
    pixels = rng.uniform(0.0, spec.noise_level, size=(size, size)) if spec.noise_level > 0 else np.zeros((size, size))
    region = signal_spec(spec)
    gx = region.x + int(rng.integers(0, region.w - g + 1))
    gy = region.y + int(rng.integers(0, region.h - g + 1))
    pixels[gy:gy + g, gx:gx + g] = spec.glyph_intensity * glyphs[label]
    occluder = decoy_box = decoy_label = None
    if rng.random() < spec.occluder_prob:
        occluder = _place_occluder(rng, spec, region_box(region))
        if occluder is not None:
            ox, oy, ow, oh = occluder
            value = rng.uniform(*spec.occluder_value_range)
            pixels[oy:oy + oh, ox:ox + ow] = value
            decoy_box, decoy_label = _decoy(rng, spec, occluder, label)
            if decoy_box is not None:
                dx, dy, _, _ = decoy_box
                pixels[dy:dy + g, dx:dx + g] = np.minimum(value + spec.glyph_intensity * glyphs[decoy_label], 1.0)
    meta = {
        "signal_region": spec.signal_region,
        "exclusion_box": region_box(region),
        "glyph_box": (gx, gy, g, g),
        "occluder_box": occluder,
        "decoy_box": decoy_box,
        "decoy_label": decoy_label,
    }
    return FaceImage(pixels), label, meta


def _split(spec: SyntheticSpec, glyphs, split: str, count: int) -> RegionDataset:
    sample_ids, images, labels, metadata, records = [], [], [], [], []
    for i in range(count):
        image, label, meta = _sample(spec, glyphs, split, i)
        sample_id = f"{split}_{i:05d}"
        occlusions = () if meta["occluder_box"] is None else (_occluder_token(meta["occluder_box"], spec.image_size),)
        sample_ids.append(sample_id)
        images.append(image)
        labels.append(label)
        metadata.append(meta)
        records.append(ManifestRecord(sample_id, f"{split}/{sample_id}.pgm", label, occlusions=occlusions))
    return RegionDataset(sample_ids, images, labels, spec.num_classes, metadata=metadata, records=records)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[RegionDataset, RegionDataset]:
    """Balanced (train, test) datasets reproducible from spec.seed."""
    spec.validate()
    glyphs = class_glyphs(spec.num_classes, spec.glyph_size)
    return _split(spec, glyphs, "train", spec.num_train), _split(spec, glyphs, "test", spec.num_test)


def write_synthetic(out_dir: str, spec: SyntheticSpec, train: RegionDataset, test: RegionDataset) -> Dict[str, str]:
    """Write PGM images, one manifest per split and the ground-truth metadata."""
    paths = {}
    for split, dataset in (("train", train), ("test", test)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for record, image in zip(dataset.records, dataset.images):
            save_image(os.path.join(out_dir, record.image_path), image)
        manifest = os.path.join(out_dir, f"{split}_manifest.csv")
        write_manifest(manifest, dataset.records)
        paths[split] = manifest
    meta_path = os.path.join(out_dir, "synthetic_meta.json")
    with open(meta_path, "w") as f:
        json.dump({
            "spec": asdict(spec),
            "train": dict(zip(train.sample_ids, train.metadata)),
            "test": dict(zip(test.sample_ids, test.metadata)),
        }, f, indent=2)
    paths["meta"] = meta_path
    return paths
