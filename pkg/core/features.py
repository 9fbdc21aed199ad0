"""Backbone r(.; theta): a trainable two-layer projection and a frozen feature store."""

import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.numerics import (
    DimensionError,
    Parameter,
    affine,
    affine_backward,
    random_parameter,
    relu,
    relu_backward,
)
from data.images import FaceImage


class FeatureStoreError(ValueError):
    """Base class for feature file problems."""


class FeatureDimensionError(FeatureStoreError):
    pass


class DuplicateFeatureKeyError(FeatureStoreError):
    pass


class FeatureParseError(FeatureStoreError):
    pass


class MissingFeatureError(KeyError):
    """Raised on a store miss; carries the (sample_id, region_index) key."""

    def __init__(self, sample_id: str, region_index: int):
        super().__init__(f"no feature for sample {sample_id!r}, region {region_index}")
        self.key = (sample_id, region_index)


@dataclass
class FeatureVector:
    values: np.ndarray
    source_region: int = 0


@lru_cache(maxsize=64)
def area_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) area-averaging weights; row i covers [i, i+1) * in/out.

    Cached; callers must not modify the result.
    """
    weights = np.zeros((out_size, in_size))
    step = in_size / out_size
    for i in range(out_size):
        start, stop = i * step, (i + 1) * step
        for j in range(int(np.floor(start)), min(int(np.ceil(stop)), in_size)):
            overlap = min(stop, j + 1) - max(start, j)
            if overlap > 0:
                weights[i, j] = overlap / step
    return weights


def area_downsample(image: FaceImage, size: int) -> np.ndarray:
    """Area-average image to (size, size, channels)."""
    rows = area_matrix(image.height, size)
    cols = area_matrix(image.width, size)
    return np.einsum("ij,jkc,lk->ilc", rows, image.pixels, cols, optimize=True)


class ProjectionBackbone:
    """Area downsample, flatten, affine, relu, affine. One parameter set for every region."""

    def __init__(self, input_size: int = 64, downsample_size: int = 16, channels: int = 1,
                 hidden_dim: int = 64, feature_dim: int = 64, seed: int = 0):
        if downsample_size > input_size:
            raise ValueError(f"downsample_size {downsample_size} exceeds input_size {input_size}")
        self.input_size = input_size
        self.downsample_size = downsample_size
        self.channels = channels
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        in_dim = downsample_size * downsample_size * channels
        rng = np.random.default_rng([seed, 1])
        self.W1 = random_parameter(rng, "backbone.W1", (hidden_dim, in_dim))
        self.b1 = Parameter("backbone.b1", np.zeros(hidden_dim))
        self.W2 = random_parameter(rng, "backbone.W2", (feature_dim, hidden_dim))
        self.b2 = Parameter("backbone.b2", np.zeros(feature_dim))

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]

    def prepare(self, crop: FaceImage) -> np.ndarray:
        """The constant part of the map: downsample and flatten."""
        if crop.height != self.input_size or crop.width != self.input_size:
            raise DimensionError(f"crop is {crop.width}x{crop.height}, backbone expects {self.input_size}")
        if crop.channels != self.channels:
            raise DimensionError(f"crop has {crop.channels} channels, backbone expects {self.channels}")
        return area_downsample(crop, self.downsample_size).reshape(-1)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """x: (..., input_dim) prepared inputs -> (features (..., d), cache)."""
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"backbone input has {x.shape[-1]} values, expected {self.input_dim}")
        pre = affine(x, self.W1.value, self.b1.value)
        hidden = relu(pre)
        features = affine(hidden, self.W2.value, self.b2.value)
        return features, (x, pre, hidden)

    def backward(self, cache: tuple, grad_features: np.ndarray, mask: Optional[np.ndarray] = None):
        """Accumulate parameter gradients; masked-out regions contribute nothing."""
        x, pre, hidden = cache
        if mask is not None:
            grad_features = grad_features * mask[..., None]
        grad_hidden, gW2, gb2 = affine_backward(hidden, self.W2.value, grad_features)
        self.W2.accumulate(gW2)
        self.b2.accumulate(gb2)
        grad_pre = relu_backward(pre, grad_hidden)
        _, gW1, gb1 = affine_backward(x, self.W1.value, grad_pre)
        self.W1.accumulate(gW1)
        self.b1.accumulate(gb1)

    def extract(self, crop: FaceImage, source_region: int = 0) -> FeatureVector:
        features, _ = self.forward(self.prepare(crop))
        return FeatureVector(features, source_region)


@dataclass
class FeatureStore:
    """Precomputed features keyed by (sample_id, region_index)."""

    dim: int
    table: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)

    def add(self, sample_id: str, region_index: int, values):
        key = (sample_id, int(region_index))
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise FeatureDimensionError(f"feature for {key} has {vec.size} values, store dim is {self.dim}")
        if key in self.table:
            raise DuplicateFeatureKeyError(f"duplicate feature key {key}")
        self.table[key] = vec

    def extract(self, sample_id: str, region_index: int) -> FeatureVector:
        key = (sample_id, int(region_index))
        if key not in self.table:
            raise MissingFeatureError(*key)
        return FeatureVector(self.table[key], key[1])

    def sample_ids(self) -> List[str]:
        seen = []
        for sample_id, _ in self.table:
            if sample_id not in seen:
                seen.append(sample_id)
        return seen

    def region_count(self, sample_id: str) -> int:
        return sum(1 for sid, _ in self.table if sid == sample_id)

    def features_for(self, sample_id: str, num_regions: int) -> np.ndarray:
        """Stack regions 0..num_regions-1 of one sample into (num_regions, dim)."""
        return np.stack([self.extract(sample_id, i).values for i in range(num_regions)])


def save_feature_store(path: str, store: FeatureStore):
    """Header `dim=<d>`, then `sample_id,region_index,v0,...` rows with round-trip floats."""
    with open(path, "w") as f:
        f.write(f"dim={store.dim}\n")
        for (sample_id, region_index), values in store.table.items():
            f.write(",".join([sample_id, str(region_index)] + [repr(float(v)) for v in values]) + "\n")


def load_feature_store(path: str) -> FeatureStore:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Feature file not found: {path}")
    with open(path, "r") as f:
        lines = [line.rstrip("\n") for line in f]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not lines[0].startswith("dim="):
        raise FeatureParseError(f"{path}: first line must be dim=<d>")
    try:
        dim = int(lines[0][4:])
    except ValueError:
        raise FeatureParseError(f"{path}: bad header {lines[0]!r}")
    if dim < 1:
        raise FeatureParseError(f"{path}: dim must be positive, got {dim}")
    store = FeatureStore(dim)
    for line_no, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) < 3:
            raise FeatureParseError(f"{path}:{line_no}: expected sample_id,region_index,values...")
        try:
            region_index = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as e:
            raise FeatureParseError(f"{path}:{line_no}: {e}")
        if len(values) != dim:
            raise FeatureDimensionError(f"{path}:{line_no}: {len(values)} values, header declares dim={dim}")
        if (parts[0], region_index) in store.table:
            raise DuplicateFeatureKeyError(f"{path}:{line_no}: duplicate key ({parts[0]}, {region_index})")
        store.add(parts[0], region_index, values)
    return store
