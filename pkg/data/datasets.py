"""Manifest ingestion, occlusion/pose test subsets and in-memory region datasets."""

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from data.images import FaceImage, load_image
from data.regions import (
    DEFAULT_RADIUS_RATIO,
    LANDMARK_NAMES,
    Landmark,
    build_crop_set,
    generate_regions,
)

MANIFEST_FIELDS = ["sample_id", "image_path", "label", "pitch", "yaw", "roll", "occlusions", "landmarks"]
OCCLUSION_TYPES = ("upper", "bottom", "left_right", "glasses_mask")
POSE_THRESHOLDS = (30.0, 45.0)

# Finer prose labels collapse onto the four annotation columns.
OCCLUSION_ALIASES = {
    "mask": "glasses_mask",
    "glasses": "glasses_mask",
    "left": "left_right",
    "right": "left_right",
}


class ManifestError(ValueError):
    """A manifest row failed to parse or validate; line numbers are 1-based incl. header."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        where = f"{path or 'manifest'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class MissingAnglesError(ValueError):
    def __init__(self, sample_ids: Sequence[str]):
        shown = ", ".join(sample_ids[:20]) + (" ..." if len(sample_ids) > 20 else "")
        super().__init__(f"{len(sample_ids)} records have no pose angles: {shown}")
        self.sample_ids = list(sample_ids)


@dataclass
class ManifestRecord:
    sample_id: str
    image_path: str
    label: int
    pitch: Optional[float] = None
    yaw: Optional[float] = None
    roll: Optional[float] = None
    occlusions: Tuple[str, ...] = ()
    landmarks: Optional[List[Landmark]] = None

    @property
    def has_angles(self) -> bool:
        return self.pitch is not None

    def to_row(self) -> Dict[str, str]:
        def angle(value):
            return "" if value is None else repr(float(value))
        return {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "label": str(self.label),
            "pitch": angle(self.pitch),
            "yaw": angle(self.yaw),
            "roll": angle(self.roll),
            "occlusions": "|".join(self.occlusions),
            "landmarks": "|".join(f"{lm.name}:{lm.x!r}:{lm.y!r}" for lm in self.landmarks or []),
        }


def _parse_occlusions(text: str) -> Tuple[str, ...]:
    tokens = []
    for raw in text.split("|"):
        token = raw.strip().lower()
        if not token:
            continue
        token = OCCLUSION_ALIASES.get(token, token)
        if token not in OCCLUSION_TYPES:
            raise ValueError(f"unknown occlusion token {raw!r}; expected one of {OCCLUSION_TYPES}")
        if token not in tokens:
            tokens.append(token)
    return tuple(tokens)


def parse_landmarks(text: str) -> Optional[List[Landmark]]:
    text = text.strip()
    if not text:
        return None
    landmarks = []
    for item in text.split("|"):
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"landmark {item!r} is not name:x:y")
        landmarks.append(Landmark(parts[0].strip(), float(parts[1]), float(parts[2])))
    if len(landmarks) > len(LANDMARK_NAMES):
        raise ValueError(f"{len(landmarks)} landmarks, at most {len(LANDMARK_NAMES)} allowed")
    return landmarks


def _parse_record(row: Dict[str, str], num_classes: Optional[int]) -> ManifestRecord:
    sample_id = (row.get("sample_id") or "").strip()
    if not sample_id:
        raise ValueError("empty sample_id")
    label = int(row.get("label", ""))
    if label < 0 or (num_classes is not None and label >= num_classes):
        raise ValueError(f"label {label} out of range")
    angles = []
    for name in ("pitch", "yaw", "roll"):
        value = (row.get(name) or "").strip()
        try:
            angles.append(float(value) if value else None)
        except ValueError:
            raise ValueError(f"malformed {name} angle {value!r}")
    present = [a is not None for a in angles]
    if any(present) and not all(present):
        raise ValueError("pitch, yaw and roll must be all present or all absent")
    if any(a is not None and not np.isfinite(a) for a in angles):
        raise ValueError("angles must be finite")
    return ManifestRecord(
        sample_id=sample_id,
        image_path=(row.get("image_path") or "").strip(),
        label=label,
        pitch=angles[0],
        yaw=angles[1],
        roll=angles[2],
        occlusions=_parse_occlusions(row.get("occlusions") or ""),
        landmarks=parse_landmarks(row.get("landmarks") or ""),
    )


def load_manifest(path: str, num_classes: Optional[int] = None) -> List[ManifestRecord]:
    """Parse and validate a manifest CSV."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return records
        missing = [name for name in ("sample_id", "image_path", "label") if name not in reader.fieldnames]
        if missing:
            raise ManifestError(f"missing columns {missing}", line=1, path=path)
        for row in reader:
            line = reader.line_num
            try:
                record = _parse_record(row, num_classes)
            except (ValueError, TypeError) as e:
                raise ManifestError(str(e), line=line, path=path)
            if record.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {record.sample_id!r}", line=line, path=path)
            seen.add(record.sample_id)
            records.append(record)
    return records


def write_manifest(path: str, records: Sequence[ManifestRecord]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


# ---------------------------------------------------------------------------
# Test subsets
# ---------------------------------------------------------------------------

def is_large_pose(record: ManifestRecord, threshold_degrees: float) -> bool:
    """|pitch| > t or |yaw| > t; roll is in-plane and ignored."""
    return abs(record.pitch) > threshold_degrees or abs(record.yaw) > threshold_degrees


def build_pose_subset(records: Sequence[ManifestRecord], threshold_degrees: float) -> List[ManifestRecord]:
    missing = [r.sample_id for r in records if not r.has_angles]
    if missing:
        raise MissingAnglesError(missing)
    return [r for r in records if is_large_pose(r, threshold_degrees)]


def build_occlusion_subset(records: Sequence[ManifestRecord]) -> List[ManifestRecord]:
    """Records carrying at least one occlusion type."""
    return [r for r in records if r.occlusions]


@dataclass
class SubsetStats:
    source_size: int
    occlusion_counts: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in OCCLUSION_TYPES})
    occlusion_total: int = 0
    pose_counts: Dict[str, int] = field(default_factory=lambda: {f"pose>{int(t)}": 0 for t in POSE_THRESHOLDS})

    def fraction(self, count: int) -> float:
        return count / self.source_size if self.source_size else 0.0

    def to_dict(self) -> Dict:
        return {
            "source_size": self.source_size,
            "occlusion_counts": dict(self.occlusion_counts),
            "occlusion_total": self.occlusion_total,
            "pose_counts": dict(self.pose_counts),
            "fractions": {
                **{k: self.fraction(v) for k, v in self.occlusion_counts.items()},
                "occlusion_total": self.fraction(self.occlusion_total),
                **{k: self.fraction(v) for k, v in self.pose_counts.items()},
            },
        }


def subset_stats(records: Sequence[ManifestRecord]) -> SubsetStats:
    """Per-type occlusion counts (multi-type records count once per type) and pose counts."""
    stats = SubsetStats(source_size=len(records))
    for record in records:
        for token in record.occlusions:
            stats.occlusion_counts[token] += 1
        if record.occlusions:
            stats.occlusion_total += 1
        if record.has_angles:
            for threshold in POSE_THRESHOLDS:
                if is_large_pose(record, threshold):
                    stats.pose_counts[f"pose>{int(threshold)}"] += 1
    return stats


def format_stats_table(stats: SubsetStats, name: str = "dataset") -> str:
    """Aligned text table: one count row and one fraction row per dataset."""
    headers = ["Dataset", "Upper", "Bottom", "Left/Right", "Glasses/Mask", "Occlusion", "Pose>30", "Pose>45", "Total"]
    counts = [stats.occlusion_counts[t] for t in OCCLUSION_TYPES]
    counts += [stats.occlusion_total, stats.pose_counts["pose>30"], stats.pose_counts["pose>45"], stats.source_size]
    rows = [
        [name] + [str(c) for c in counts],
        [""] + [f"{100.0 * stats.fraction(c):.2f}%" for c in counts],
    ]
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def write_stats_json(path: str, stats: SubsetStats):
    with open(path, "w") as f:
        json.dump(stats.to_dict(), f, indent=2)


# ---------------------------------------------------------------------------
# In-memory datasets
# ---------------------------------------------------------------------------

@dataclass
class EncodedSet:
    """Backbone inputs (or frozen features) with a region mask, ready for batching."""

    sample_ids: List[str]
    inputs: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def num_regions(self) -> int:
        return self.inputs.shape[1]

    def take(self, index: np.ndarray) -> "EncodedSet":
        return EncodedSet([self.sample_ids[i] for i in index], self.inputs[index], self.mask[index],
                          self.labels[index])


@dataclass
class RegionDataset:
    """Labelled face images with optional landmarks and per-sample metadata."""

    sample_ids: List[str]
    images: List[FaceImage]
    labels: np.ndarray
    num_classes: int
    landmarks: List[Optional[List[Landmark]]] = None
    metadata: List[Dict] = None
    records: List[ManifestRecord] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.sample_ids)
        if len(self.images) != n or len(self.labels) != n:
            raise ValueError("sample_ids, images and labels must have the same length")
        if self.landmarks is None:
            self.landmarks = [None] * n
        if self.metadata is None:
            self.metadata = [{} for _ in range(n)]
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.sample_ids)

    @classmethod
    def from_manifest(cls, records: Sequence[ManifestRecord], base_dir: str = "",
                      num_classes: Optional[int] = None) -> "RegionDataset":
        if not records:
            raise ValueError("manifest has no records")
        images = []
        for record in records:
            path = record.image_path
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            images.append(load_image(path))
        labels = [r.label for r in records]
        if num_classes is None:
            num_classes = max(max(labels) + 1, 2)
        return cls(
            sample_ids=[r.sample_id for r in records],
            images=images,
            labels=labels,
            num_classes=num_classes,
            landmarks=[r.landmarks for r in records],
            records=list(records),
        )

    def select(self, sample_ids: Sequence[str]) -> "RegionDataset":
        position = {sid: i for i, sid in enumerate(self.sample_ids)}
        index = [position[sid] for sid in sample_ids]
        return RegionDataset(
            sample_ids=[self.sample_ids[i] for i in index],
            images=[self.images[i] for i in index],
            labels=self.labels[index],
            num_classes=self.num_classes,
            landmarks=[self.landmarks[i] for i in index],
            metadata=[self.metadata[i] for i in index],
            records=[self.records[i] for i in index] if self.records else None,
        )

    def encode(self, prepare: Callable[[FaceImage], np.ndarray], input_size: int, scheme: str = "fixed",
               num_crops: int = 3, seed=0, scale_ratio: float = 1.0,
               radius_ratio: float = DEFAULT_RADIUS_RATIO) -> EncodedSet:
        """Crop every image, resize to input_size and map through `prepare`.

        Random crops use the per-sample seed [*seed, sample position] so the
        result does not depend on batch order.
        """
        base = list(np.atleast_1d(seed))
        per_sample = []
        for i, image in enumerate(self.images):
            specs = generate_regions(image, scheme, n=num_crops, rng_seed=base + [i],
                                     landmarks=self.landmarks[i], radius_ratio=radius_ratio,
                                     scale_ratio=scale_ratio)
            crop_set = build_crop_set(image, specs, input_size)
            per_sample.append(np.stack([prepare(img) for img in crop_set.images()]))
        width = max(len(x) for x in per_sample)
        inputs = np.zeros((len(per_sample), width, per_sample[0].shape[-1]))
        mask = np.zeros((len(per_sample), width), dtype=bool)
        for i, x in enumerate(per_sample):
            inputs[i, :len(x)] = x
            mask[i, :len(x)] = True
        return EncodedSet(list(self.sample_ids), inputs, mask, self.labels.copy())


def encode_feature_store(store, records: Sequence[ManifestRecord]) -> EncodedSet:
    """Frozen-feature path: stack stored regions per manifest record."""
    counts = [store.region_count(r.sample_id) for r in records]
    if not counts or min(counts) == 0:
        missing = [r.sample_id for r, c in zip(records, counts) if c == 0]
        raise KeyError(f"feature store has no regions for samples {missing[:10]}")
    width = max(counts)
    inputs = np.zeros((len(records), width, store.dim))
    mask = np.zeros((len(records), width), dtype=bool)
    for i, (record, count) in enumerate(zip(records, counts)):
        inputs[i, :count] = store.features_for(record.sample_id, count)
        mask[i, :count] = True
    labels = np.array([r.label for r in records], dtype=np.int64)
    return EncodedSet([r.sample_id for r in records], inputs, mask, labels)
