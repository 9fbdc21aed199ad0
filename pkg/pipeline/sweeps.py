"""Train/evaluate runs and the ablation sweeps built on them."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from data.datasets import EncodedSet, RegionDataset
from data.images import MIN_SIDE, FaceImage
from data.regions import fixed_crops
from pipeline.evaluator import AttentionReport, Evaluator, Metrics, write_confusion_csv, write_metrics
from pipeline.trainer import Network, TrainConfig, Trainer, TrainResult, build_network, encode_dataset
from utils.config import VERBOSE
from utils.utils import get_run_dir, write_rows_csv

Data = Union[RegionDataset, EncodedSet]

DEFAULT_ALPHAS = (0.0, 0.01, 0.02, 0.04, 0.06)
DEFAULT_RATIOS = (0.4, 0.6, 0.8, 1.0, 1.1)
DEFAULT_REGION_COUNTS = (6, 30, 60, 80, 120)
FUSION_VARIANTS = ("ran", "score_fusion", "concat", "average", "single_region")
RATIO_RANGE = (0.3, 1.1)
# test crops are drawn from a stream disjoint from every training epoch
TEST_CROP_STREAM = 1_000_003


@dataclass
class ExperimentResult:
    config: TrainConfig
    train: TrainResult
    metrics: Metrics
    report: Optional[AttentionReport] = None

    @property
    def accuracy(self) -> float:
        return self.metrics.overall_accuracy


def num_classes_of(data: Data) -> int:
    if isinstance(data, RegionDataset):
        return data.num_classes
    return max(int(data.labels.max()) + 1, 2) if len(data) else 2


def new_network(config: TrainConfig, train: Data, num_classes: Optional[int] = None) -> Network:
    num_classes = num_classes or num_classes_of(train)
    if isinstance(train, EncodedSet):
        return build_network(config, num_classes, frozen_dim=train.inputs.shape[-1])
    return build_network(config, num_classes, channels=train.images[0].channels)


def encode_test(network: Network, test: Data, config: TrainConfig) -> EncodedSet:
    if isinstance(test, EncodedSet):
        return test
    return encode_dataset(network, test, config, config.eval_scheme, config.eval_crops,
                          [config.seed, TEST_CROP_STREAM])


def train_and_evaluate(config: TrainConfig, train: Data, test: Data, out_dir: Optional[str] = None,
                       verbose: bool = VERBOSE, num_classes: Optional[int] = None) -> ExperimentResult:
    """One full run; with out_dir, writes checkpoint, epoch log, metrics, confusion and attention report."""
    num_classes = num_classes or max(num_classes_of(train), num_classes_of(test))
    network = new_network(config, train, num_classes)
    trained = Trainer(config, verbose=verbose).train(network, train, out_dir)
    evaluator = Evaluator(verbose=verbose)
    encoded_test = encode_test(network, test, config)
    metrics = evaluator.evaluate(network, encoded_test, num_classes)
    report = evaluator.attention_report(network, encoded_test)
    if out_dir is not None:
        write_metrics(os.path.join(out_dir, "metrics.json"), metrics)
        write_confusion_csv(os.path.join(out_dir, "confusion.csv"), metrics.confusion)
        if report is not None:
            report.write(os.path.join(out_dir, "attention_report.csv"))
    return ExperimentResult(config, trained, metrics, report)


def run_all(jobs: Sequence[Callable[[], Dict]], threads: int = 1) -> List[Dict]:
    """Run independent jobs, in order, optionally on a thread pool."""
    if threads <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _needs_images(train: Data, kind: str):
    if isinstance(train, EncodedSet):
        raise ValueError(f"{kind} sweep re-crops images; frozen features cannot be used")


def _log(verbose: bool, message: str):
    if verbose:
        print(f"Sweep: {message}")


def margin_sweep(config: TrainConfig, train: Data, test: Data, alphas: Sequence[float] = DEFAULT_ALPHAS,
                 threads: int = 1, verbose: bool = VERBOSE, out_dir: Optional[str] = None) -> List[Dict]:
    """One run per alpha, shared seed. Rows: alpha, accuracy.

    With out_dir each alpha writes its run artifacts under alpha_<value>.
    """
    if any(a < 0 for a in alphas):
        raise ValueError(f"alphas must be >= 0, got {list(alphas)}")

    def job(alpha):
        def run():
            run_dir = get_run_dir(out_dir, f"alpha_{alpha:g}") if out_dir else None
            result = train_and_evaluate(replace(config, alpha=alpha), train, test, run_dir, verbose=False)
            _log(verbose, f"alpha={alpha:g} accuracy={result.accuracy:.4f}")
            return {"alpha": alpha, "accuracy": result.accuracy}
        return run

    return run_all([job(float(a)) for a in alphas], threads)


def check_ratio(image_size: int, ratio: float):
    low, high = RATIO_RANGE
    if not low <= ratio <= high:
        raise ValueError(f"region ratio {ratio} outside [{low}, {high}]")
    # raises RegionError when a crop drops below MIN_SIDE
    fixed_crops(FaceImage(np.zeros((image_size, image_size))), ratio, min_side=MIN_SIDE)


def region_size_sweep(config: TrainConfig, train: Data, test: Data, ratios: Sequence[float] = DEFAULT_RATIOS,
                      threads: int = 1, verbose: bool = VERBOSE) -> List[Dict]:
    """Fixed crops with every extent scaled by ratio. Rows: ratio, accuracy."""
    _needs_images(train, "region size")
    side = min(min(img.height, img.width) for img in list(train.images) + list(test.images))
    for ratio in ratios:
        check_ratio(side, ratio)

    def job(ratio):
        def run():
            run_config = replace(config, crop_scheme="fixed", test_scheme="fixed", region_scale_ratio=ratio)
            result = train_and_evaluate(run_config, train, test, verbose=False)
            _log(verbose, f"ratio={ratio:g} accuracy={result.accuracy:.4f}")
            return {"ratio": ratio, "accuracy": result.accuracy}
        return run

    return run_all([job(float(r)) for r in ratios], threads)


def region_count_sweep(config: TrainConfig, train: Data, test: Data,
                       counts: Sequence[int] = DEFAULT_REGION_COUNTS, repeats: int = 1,
                       threads: int = 1, verbose: bool = VERBOSE) -> List[Dict]:
    """Train with 3 random regions per image per epoch, test with N random regions.

    Each repeat trains once with seed config.seed + repeat and is tested at every N.
    Rows: num_regions, repeat, accuracy.
    """
    _needs_images(train, "region count")
    if repeats < 1 or any(n < 1 for n in counts):
        raise ValueError("repeats and region counts must be >= 1")

    def job(repeat):
        def run():
            run_config = replace(config, crop_scheme="random", num_crops=3, test_scheme="random",
                                 seed=config.seed + repeat)
            num_classes = max(num_classes_of(train), num_classes_of(test))
            network = new_network(run_config, train, num_classes)
            Trainer(run_config, verbose=False).train(network, train)
            evaluator = Evaluator(verbose=False)
            rows = []
            for n in counts:
                encoded = encode_test(network, test, replace(run_config, num_test_crops=n))
                accuracy = evaluator.evaluate(network, encoded, num_classes).overall_accuracy
                _log(verbose, f"repeat={repeat} regions={n} accuracy={accuracy:.4f}")
                rows.append({"num_regions": n, "repeat": repeat, "accuracy": accuracy})
            return {"rows": rows}
        return run

    return [row for part in run_all([job(r) for r in range(repeats)], threads) for row in part["rows"]]


SCHEME_PAIRS = (("fixed", "fixed"), ("landmark", "landmark"), ("random", "random"), ("random", "fixed"))


def scheme_comparison(config: TrainConfig, train: Data, test: Data, pairs=SCHEME_PAIRS,
                      threads: int = 1, verbose: bool = VERBOSE) -> List[Dict]:
    """Rows: train_scheme, test_scheme, accuracy."""
    _needs_images(train, "scheme")

    def job(train_scheme, test_scheme):
        def run():
            run_config = replace(config, crop_scheme=train_scheme, test_scheme=test_scheme)
            result = train_and_evaluate(run_config, train, test, verbose=False)
            _log(verbose, f"train={train_scheme} test={test_scheme} accuracy={result.accuracy:.4f}")
            return {"train_scheme": train_scheme, "test_scheme": test_scheme, "accuracy": result.accuracy}
        return run

    return run_all([job(a, b) for a, b in pairs], threads)


def fusion_comparison(config: TrainConfig, train: Data, test: Data, variants: Sequence[str] = FUSION_VARIANTS,
                      out_dir: Optional[str] = None, threads: int = 1, verbose: bool = VERBOSE) -> List[Dict]:
    """One run per model variant; with out_dir each variant gets its own metrics directory."""

    def job(variant):
        def run():
            run_dir = get_run_dir(out_dir, variant) if out_dir else None
            result = train_and_evaluate(replace(config, model=variant), train, test, run_dir, verbose=False)
            _log(verbose, f"model={variant} accuracy={result.accuracy:.4f}")
            return {"model": variant, "accuracy": result.accuracy}
        return run

    return run_all([job(v) for v in variants], threads)


SWEEP_FIELDS = {
    "margin": ("alpha", "accuracy"),
    "size": ("ratio", "accuracy"),
    "count": ("num_regions", "repeat", "accuracy"),
    "scheme": ("train_scheme", "test_scheme", "accuracy"),
    "fusion": ("model", "accuracy"),
}


def write_sweep_csv(path: str, kind: str, rows: List[Dict]):
    write_rows_csv(path, SWEEP_FIELDS[kind], rows)
