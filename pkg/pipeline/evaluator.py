"""Evaluation: accuracy, confusion matrices and attention-weight reports."""

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import sklearn.metrics as skm

from core.numerics import softmax
from data.datasets import EncodedSet
from pipeline.trainer import Network
from utils.config import VERBOSE
from utils.utils import write_json, write_rows_csv

ATTENTION_FIELDS = ("sample_id", "region_index", "mu", "nu", "display_weight", "flag")


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions differ in length")
    for name, values in (("label", labels), ("prediction", predictions)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    if labels.size == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    return skm.confusion_matrix(labels, predictions, labels=list(range(num_classes))).astype(np.int64)


@dataclass
class Metrics:
    overall_accuracy: float
    confusion: np.ndarray
    per_class_accuracy: List[Optional[float]]

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int) -> "Metrics":
        confusion = confusion_matrix(labels, predictions, num_classes)
        total = int(confusion.sum())
        support = confusion.sum(axis=1)
        per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
        accuracy = float(skm.accuracy_score(labels, predictions)) if total else 0.0
        return cls(accuracy, confusion, per_class)

    def to_dict(self) -> Dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
        }


def write_metrics(path: str, metrics: Metrics):
    write_json(path, metrics.to_dict())


def write_confusion_csv(path: str, confusion: np.ndarray):
    num_classes = confusion.shape[0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred"] + [str(c) for c in range(num_classes)])
        for c in range(num_classes):
            writer.writerow([str(c)] + [str(int(v)) for v in confusion[c]])


@dataclass
class AttentionReport:
    """Raw mu / nu per region with display weights softmax(mu * nu) over the regions present."""

    rows: List[Dict] = field(default_factory=list)
    num_regions: int = 0

    @classmethod
    def from_state(cls, sample_ids: Sequence[str], mu: np.ndarray, nu: Optional[np.ndarray],
                   mask: np.ndarray) -> "AttentionReport":
        mu = np.asarray(mu, dtype=np.float64)
        combined = mu if nu is None else mu * nu
        scores = np.where(mask, combined, -np.inf)
        display = np.where(mask, softmax(scores), 0.0)
        rows = []
        for b, sample_id in enumerate(sample_ids):
            present = np.nonzero(mask[b])[0]
            high = present[np.argmax(display[b, present])]
            low = present[np.argmin(display[b, present])]
            for i in present:
                flag = "highest" if i == high else ("lowest" if i == low else "")
                rows.append({
                    "sample_id": sample_id,
                    "region_index": int(i),
                    "mu": float(mu[b, i]),
                    "nu": None if nu is None else float(nu[b, i]),
                    "display_weight": float(display[b, i]),
                    "flag": flag,
                })
        return cls(rows, mask.shape[1])

    def mean_display_weights(self) -> np.ndarray:
        """Mean display weight per region index over the samples where that region exists."""
        totals = np.zeros(self.num_regions)
        counts = np.zeros(self.num_regions)
        for row in self.rows:
            totals[row["region_index"]] += row["display_weight"]
            counts[row["region_index"]] += 1
        return np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)

    def top_region(self) -> int:
        return int(np.argmax(self.mean_display_weights()))

    def write(self, path: str):
        write_rows_csv(path, ATTENTION_FIELDS, self.rows)


class Evaluator:
    """Batched argmax evaluation of a Network."""

    def __init__(self, batch_size: int = 256, verbose: bool = VERBOSE):
        self.batch_size = batch_size
        self.verbose = verbose

    def log(self, message: str):
        if self.verbose:
            print(f"Evaluator: {message}")

    def _batches(self, encoded: EncodedSet):
        for start in range(0, len(encoded), self.batch_size):
            yield encoded.take(np.arange(start, min(start + self.batch_size, len(encoded))))

    def predict(self, network: Network, encoded: EncodedSet) -> np.ndarray:
        if len(encoded) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([network.predict(b.inputs, b.mask) for b in self._batches(encoded)])

    def evaluate(self, network: Network, encoded: EncodedSet, num_classes: Optional[int] = None) -> Metrics:
        num_classes = num_classes or network.num_classes
        if num_classes != network.num_classes:
            raise ValueError(f"dataset has {num_classes} classes, model predicts {network.num_classes}")
        metrics = Metrics.from_predictions(encoded.labels, self.predict(network, encoded), num_classes)
        self.log(f"{network.variant}: accuracy {metrics.overall_accuracy:.4f} on {len(encoded)} samples")
        return metrics

    def attention_report(self, network: Network, encoded: EncodedSet) -> Optional[AttentionReport]:
        """None for models without attention."""
        if not network.model.has_attention:
            return None
        report = AttentionReport(num_regions=encoded.num_regions)
        for batch in self._batches(encoded):
            state = network.attention(batch.inputs, batch.mask)
            part = AttentionReport.from_state(batch.sample_ids, state.mu, state.nu, batch.mask)
            report.rows.extend(part.rows)
        return report
