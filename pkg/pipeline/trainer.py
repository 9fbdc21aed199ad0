"""Training loop: seeded mini-batches, momentum SGD, step learning-rate schedule."""

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.features import ProjectionBackbone
from core.numerics import NonFiniteError, Parameter, SGD, assign_checkpoint, load_checkpoint, save_checkpoint
from core.ran import VARIANTS, AttentionState, RegionModel, build_model
from data.datasets import EncodedSet, RegionDataset
from data.regions import SCHEMES
from utils.config import VERBOSE
from utils.utils import write_rows_csv

EPOCH_LOG_FIELDS = ("epoch", "lr", "mean_ce", "mean_rb", "train_acc")
LAST_GOOD_NAME = "last_good.ckpt"


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay_epochs: Tuple[int, ...] = (15, 30)
    total_epochs: int = 40
    alpha: float = 0.02
    lambda_rb: float = 1.0
    batch_size: int = 32
    seed: int = 0
    crop_scheme: str = "fixed"
    num_crops: int = 3
    num_test_crops: Optional[int] = None
    test_scheme: Optional[str] = None
    region_scale_ratio: float = 1.0
    radius_ratio: float = 0.4
    momentum: float = 0.9
    model: str = "ran"
    region_index: int = 0
    input_size: int = 64
    downsample_size: int = 16
    hidden_dim: int = 64
    feature_dim: int = 64

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.lambda_rb < 0:
            raise ValueError(f"lambda_rb must be >= 0, got {self.lambda_rb}")
        decay = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decay, decay[1:])) or any(d <= 0 for d in decay):
            raise ValueError(f"lr_decay_epochs must be positive and increasing, got {decay}")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        for scheme in (self.crop_scheme, self.test_scheme):
            if scheme is not None and scheme not in SCHEMES:
                raise ValueError(f"unknown crop scheme {scheme!r}; expected one of {SCHEMES}")
        if self.num_crops < 1 or (self.num_test_crops is not None and self.num_test_crops < 1):
            raise ValueError("crop counts must be >= 1")
        if self.model not in VARIANTS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {VARIANTS}")
        if self.region_scale_ratio <= 0:
            raise ValueError("region_scale_ratio must be > 0")
        return self

    @property
    def eval_scheme(self) -> str:
        return self.test_scheme or self.crop_scheme

    @property
    def eval_crops(self) -> int:
        return self.num_test_crops or self.num_crops

    def to_dict(self) -> Dict:
        return asdict(self)


def learning_rate(config: TrainConfig, epochs_completed: int) -> float:
    """lr / 10 ** (number of decay epochs already completed)."""
    passed = sum(1 for d in config.lr_decay_epochs if d <= epochs_completed)
    return config.lr / (10.0 ** passed)


def region_count(scheme: str, num_crops: int) -> int:
    """Regions per sample including I_0; landmark cropping yields at most five crops."""
    if scheme == "random":
        return num_crops + 1
    return 6


class Network:
    """A region model, optionally fed by a trainable backbone.

    Without a backbone the inputs are frozen features of shape (B, n, d).
    """

    def __init__(self, model: RegionModel, backbone: Optional[ProjectionBackbone] = None):
        self.model = model
        self.backbone = backbone

    @property
    def variant(self) -> str:
        return self.model.variant

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def parameters(self) -> List[Parameter]:
        params = self.model.parameters()
        if self.backbone is not None:
            params = params + self.backbone.parameters()
        return params

    def features(self, inputs: np.ndarray):
        if self.backbone is None:
            return np.asarray(inputs, dtype=np.float64), None
        return self.backbone.forward(inputs)

    def predict_proba(self, inputs, mask=None) -> np.ndarray:
        F, _ = self.features(inputs)
        return self.model.predict_proba(F, mask)

    def predict(self, inputs, mask=None) -> np.ndarray:
        return np.argmax(self.predict_proba(inputs, mask), axis=-1)

    def attention(self, inputs, mask=None) -> Optional[AttentionState]:
        F, _ = self.features(inputs)
        return self.model.attention(F, mask)

    def loss(self, inputs, labels, mask=None, alpha: float = 0.02, lambda_rb: float = 1.0) -> float:
        F, _ = self.features(inputs)
        return self.model.loss(F, labels, mask, alpha, lambda_rb)

    def loss_and_backward(self, inputs, labels, mask=None, alpha: float = 0.02, lambda_rb: float = 1.0):
        F, cache = self.features(inputs)
        result = self.model.loss_and_backward(F, labels, mask, alpha, lambda_rb)
        if self.backbone is not None:
            self.backbone.backward(cache, result.grad_features, mask)
        return result

    def save(self, path: str):
        save_checkpoint(path, self.parameters())

    def load(self, path: str):
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        assign_checkpoint(self.parameters(), load_checkpoint(path))


def build_network(config: TrainConfig, num_classes: int, channels: int = 1,
                  frozen_dim: Optional[int] = None) -> Network:
    """Backbone plus head from a TrainConfig; frozen_dim skips the backbone."""
    num_regions = region_count(config.crop_scheme, config.num_crops)
    backbone = None
    feature_dim = frozen_dim
    if frozen_dim is None:
        backbone = ProjectionBackbone(config.input_size, config.downsample_size, channels,
                                      config.hidden_dim, config.feature_dim, config.seed)
        feature_dim = config.feature_dim
    model = build_model(config.model, feature_dim, num_classes, num_regions, config.seed, config.region_index)
    return Network(model, backbone)


def encode_dataset(network: Network, dataset: RegionDataset, config: TrainConfig, scheme: str,
                   num_crops: int, seed) -> EncodedSet:
    if network.backbone is None:
        raise ValueError("image datasets need a network with a backbone")
    return dataset.encode(network.backbone.prepare, config.input_size, scheme, num_crops, seed,
                          config.region_scale_ratio, config.radius_ratio)


def mean_margin(network: Network, encoded: EncodedSet, batch_size: int = 256) -> Optional[float]:
    """Mean of mu_max - mu_0 over a set; None for models without attention."""
    if not network.model.has_attention or encoded.num_regions < 2:
        return None
    margins = []
    for start in range(0, len(encoded), batch_size):
        part = encoded.take(np.arange(start, min(start + batch_size, len(encoded))))
        state = network.attention(part.inputs, part.mask)
        crops = np.where(part.mask[:, 1:], state.mu[:, 1:], -np.inf)
        has_crop = part.mask[:, 1:].any(axis=1)
        margins.append(np.where(has_crop, crops.max(axis=1) - state.mu[:, 0], 0.0))
    return float(np.mean(np.concatenate(margins))) if margins else None


@dataclass
class TrainResult:
    network: Network
    epoch_log: List[Dict] = field(default_factory=list)
    initial_margin: Optional[float] = None
    final_margin: Optional[float] = None

    @property
    def final_train_accuracy(self) -> Optional[float]:
        return self.epoch_log[-1]["train_acc"] if self.epoch_log else None


class Trainer:
    """Runs the epoch loop for one Network."""

    def __init__(self, config: TrainConfig, verbose: bool = VERBOSE):
        self.config = config.validate()
        self.verbose = verbose

    def log(self, message: str):
        if self.verbose:
            print(f"Trainer: {message}")

    def _epoch_set(self, network: Network, data, epoch: int) -> EncodedSet:
        if isinstance(data, EncodedSet):
            return data
        return encode_dataset(network, data, self.config, self.config.crop_scheme, self.config.num_crops,
                              [self.config.seed, epoch])

    def train(self, network: Network, data, out_dir: Optional[str] = None) -> TrainResult:
        """Train on a RegionDataset (re-cropped per epoch when random) or a fixed EncodedSet."""
        config = self.config
        if len(data) == 0:
            raise ValueError("cannot train on an empty dataset")
        optimizer = SGD(network.parameters(), lr=config.lr, momentum=config.momentum)
        order_rng = np.random.default_rng([config.seed, 3])
        fixed_inputs = isinstance(data, EncodedSet) or config.crop_scheme != "random"
        encoded = self._epoch_set(network, data, 0)
        result = TrainResult(network, initial_margin=mean_margin(network, encoded))
        self.log(f"{network.variant} on {len(encoded)} samples, {encoded.num_regions} regions, "
                 f"{config.total_epochs} epochs")

        for epoch in range(config.total_epochs):
            if epoch > 0 and not fixed_inputs:
                encoded = self._epoch_set(network, data, epoch)
            optimizer.lr = learning_rate(config, epoch)
            order = order_rng.permutation(len(encoded))
            ce_sum = rb_sum = 0.0
            correct = 0
            for start in range(0, len(order), config.batch_size):
                batch = encoded.take(order[start:start + config.batch_size])
                optimizer.zero_grad()
                step = network.loss_and_backward(batch.inputs, batch.labels, batch.mask,
                                                 config.alpha, config.lambda_rb)
                try:
                    if not np.isfinite(step.total):
                        raise NonFiniteError(f"non-finite loss {step.total} in epoch {epoch + 1}")
                    optimizer.step()
                except NonFiniteError:
                    if out_dir is not None:
                        network.save(os.path.join(out_dir, LAST_GOOD_NAME))
                        self.log(f"aborting, last good parameters saved to {LAST_GOOD_NAME}")
                    raise
                ce_sum += step.ce * len(batch)
                rb_sum += step.rb * len(batch)
                correct += int(np.sum(np.argmax(step.probs, axis=-1) == batch.labels))
            row = {
                "epoch": epoch + 1,
                "lr": optimizer.lr,
                "mean_ce": ce_sum / len(encoded),
                "mean_rb": rb_sum / len(encoded),
                "train_acc": correct / len(encoded),
            }
            result.epoch_log.append(row)
            self.log(f"epoch {epoch + 1}/{config.total_epochs} lr={row['lr']:g} ce={row['mean_ce']:.4f} "
                     f"rb={row['mean_rb']:.4f} acc={row['train_acc']:.3f}")

        result.final_margin = mean_margin(network, encoded)
        if out_dir is not None:
            network.save(os.path.join(out_dir, "model.ckpt"))
            write_epoch_log(os.path.join(out_dir, "epoch_log.csv"), result.epoch_log)
        return result


def write_epoch_log(path: str, rows: List[Dict]):
    write_rows_csv(path, EPOCH_LOG_FIELDS, rows)
