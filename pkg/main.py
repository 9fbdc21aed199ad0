"""Command-line entry point for region attention training, evaluation and data tools."""

import argparse
import dataclasses
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

from core.features import load_feature_store
from data.datasets import (
    RegionDataset,
    build_occlusion_subset,
    build_pose_subset,
    encode_feature_store,
    format_stats_table,
    load_manifest,
    parse_landmarks,
    subset_stats,
    write_manifest,
    write_stats_json,
)
from data.images import load_image, save_image
from data.regions import SCHEMES, build_crop_set, generate_regions, write_specs_csv
from data.synthetic import SyntheticSpec, generate_synthetic, write_synthetic
from pipeline.evaluator import Evaluator, write_confusion_csv, write_metrics
from pipeline.gradcheck import run_gradient_checks
from pipeline.sweeps import (
    SWEEP_FIELDS,
    encode_test,
    fusion_comparison,
    margin_sweep,
    new_network,
    num_classes_of,
    region_count_sweep,
    region_size_sweep,
    scheme_comparison,
    train_and_evaluate,
    write_sweep_csv,
)
from pipeline.trainer import TrainConfig, Trainer, build_network
from utils.config import (
    DEFAULT_SEED,
    DEFAULT_THREADS,
    RAN_OUTPUT_DIR,
    RESOLVED_CONFIG_NAME,
    VERBOSE,
    ConfigError,
    build_dataclass,
    check_known_keys,
    read_config_file,
    write_config,
)
from utils.utils import get_run_dir, parse_number_list, write_json

SYNTH_PREFIX = "synth_"
EXTRA_KEYS = {
    "dataset": None,
    "test_dataset": None,
    "features": None,
    "test_features": None,
    "checkpoint": None,
    "num_classes": None,
    "threads": DEFAULT_THREADS,
    "out": None,
}
SUBSETS = ("occlusion", "pose30", "pose45")


class UsageError(ValueError):
    """Bad or missing command-line input; exit code 2."""


# ---------------------------------------------------------------------------
# Configuration resolution: defaults < config file < flags
# ---------------------------------------------------------------------------

def default_values() -> Dict[str, Any]:
    values = dict(EXTRA_KEYS)
    values.update(TrainConfig(seed=DEFAULT_SEED).to_dict())
    for key, value in dataclasses.asdict(SyntheticSpec()).items():
        values[SYNTH_PREFIX + key] = value
    return values


def _is_none(value) -> bool:
    return value is None or (isinstance(value, str) and value.strip().lower() in ("", "none"))


def option(values: Dict[str, Any], key: str) -> Optional[Any]:
    value = values.get(key)
    return None if _is_none(value) else value


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    values = default_values()
    known = set(values)
    from_file = {}
    if args.config:
        from_file = read_config_file(args.config)
        check_known_keys(from_file, known)
        values.update(from_file)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().lower()] = value.strip()
    for key in known:
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[key] = flag
    check_known_keys(overrides, known)
    values.update(overrides)
    # the synthetic seed follows the run seed unless set explicitly
    if (SYNTH_PREFIX + "seed") not in overrides and (SYNTH_PREFIX + "seed") not in from_file:
        values[SYNTH_PREFIX + "seed"] = values["seed"]
    return values


def train_config(values: Dict[str, Any]) -> TrainConfig:
    return build_dataclass(TrainConfig, values).validate()


def synthetic_spec(values: Dict[str, Any]) -> SyntheticSpec:
    spec = build_dataclass(SyntheticSpec, values, prefix=SYNTH_PREFIX)
    spec.validate()
    return spec


def run_dir(args, values: Dict[str, Any]) -> str:
    out = option(values, "out") or os.path.join(RAN_OUTPUT_DIR, args.command)
    values["out"] = out
    return get_run_dir(out)


def finish_config(out_dir: str, values: Dict[str, Any], command: str):
    write_config(os.path.join(out_dir, RESOLVED_CONFIG_NAME), values, header=f"resolved config for {command}")


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

def _manifest_dataset(path: str, num_classes: Optional[int]) -> RegionDataset:
    records = load_manifest(path, num_classes)
    return RegionDataset.from_manifest(records, os.path.dirname(os.path.abspath(path)), num_classes)


def _apply_subset(dataset: RegionDataset, subset: Optional[str]) -> RegionDataset:
    if subset is None:
        return dataset
    records = dataset.records or []
    if subset == "occlusion":
        kept = build_occlusion_subset(records)
    else:
        kept = build_pose_subset(records, float(subset[len("pose"):]))
    return dataset.select([r.sample_id for r in kept])


def load_split(values: Dict[str, Any], key: str, split: str, subset: Optional[str] = None):
    """A RegionDataset, or an EncodedSet when frozen features are configured; None when unset."""
    num_classes = option(values, "num_classes")
    num_classes = int(num_classes) if num_classes is not None else None
    source = option(values, key)
    if source is None:
        return None
    features_key = "features" if key == "dataset" else "test_features"
    features = option(values, features_key)
    if source == "synthetic":
        if features is not None:
            raise UsageError("frozen features need a manifest dataset")
        train, test = generate_synthetic(synthetic_spec(values))
        return _apply_subset(train if split == "train" else test, subset)
    if not os.path.exists(source):
        raise FileNotFoundError(f"Dataset manifest not found: {source}")
    if features is not None:
        records = load_manifest(source, num_classes)
        if subset == "occlusion":
            records = build_occlusion_subset(records)
        elif subset is not None:
            records = build_pose_subset(records, float(subset[len("pose"):]))
        return encode_feature_store(load_feature_store(features), records)
    return _apply_subset(_manifest_dataset(source, num_classes), subset)


def load_train_test(values: Dict[str, Any]) -> Tuple[Any, Any]:
    if option(values, "dataset") is None:
        raise UsageError("no dataset given (use --dataset PATH or --dataset synthetic)")
    train = load_split(values, "dataset", "train")
    test = load_split(values, "test_dataset", "test")
    if test is None and option(values, "dataset") == "synthetic":
        test = load_split(values, "dataset", "test")
    return train, test


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, values) -> int:
    config = train_config(values)
    out_dir = run_dir(args, values)
    train, test = load_train_test(values)
    num_classes = option(values, "num_classes")
    num_classes = int(num_classes) if num_classes is not None else max(
        num_classes_of(train), num_classes_of(test) if test is not None else 2)
    values["num_classes"] = num_classes
    finish_config(out_dir, values, "train")
    if test is None:
        network = new_network(config, train, num_classes)
        Trainer(config, verbose=VERBOSE and not args.quiet).train(network, train, out_dir)
    else:
        result = train_and_evaluate(config, train, test, out_dir, verbose=VERBOSE and not args.quiet,
                                    num_classes=num_classes)
        print(f"Test accuracy: {result.accuracy:.4f}")
    print(f"Wrote {out_dir}")
    return 0


def cmd_eval(args, values) -> int:
    config = train_config(values)
    checkpoint = option(values, "checkpoint")
    if checkpoint is None:
        raise UsageError("no checkpoint given (use --checkpoint PATH)")
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    out_dir = run_dir(args, values)
    key = "test_dataset" if option(values, "test_dataset") is not None else "dataset"
    if option(values, key) is None:
        raise UsageError("no dataset given (use --test-dataset PATH or --dataset synthetic)")
    test = load_split(values, key, "test", args.subset)
    num_classes = option(values, "num_classes")
    num_classes = int(num_classes) if num_classes is not None else num_classes_of(test)
    values["num_classes"] = num_classes
    finish_config(out_dir, values, "eval")

    if isinstance(test, RegionDataset):
        network = build_network(config, num_classes, channels=test.images[0].channels)
        network.load(checkpoint)
        encoded = encode_test(network, test, config)
    else:
        network = build_network(config, num_classes, frozen_dim=test.inputs.shape[-1])
        network.load(checkpoint)
        encoded = test
    evaluator = Evaluator(verbose=VERBOSE and not args.quiet)
    metrics = evaluator.evaluate(network, encoded, num_classes)
    write_metrics(os.path.join(out_dir, "metrics.json"), metrics)
    write_confusion_csv(os.path.join(out_dir, "confusion.csv"), metrics.confusion)
    report = evaluator.attention_report(network, encoded)
    if report is not None:
        report.write(os.path.join(out_dir, "attention_report.csv"))
    print(f"Accuracy: {metrics.overall_accuracy:.4f} on {len(encoded)} samples")
    return 0


def cmd_crop(args, values) -> int:
    if not os.path.exists(args.image):
        raise FileNotFoundError(f"Image not found: {args.image}")
    out_dir = run_dir(args, values)
    finish_config(out_dir, values, "crop")
    image = load_image(args.image)
    landmarks = parse_landmarks(args.landmarks or "")
    specs = generate_regions(image, args.scheme, n=args.num_crops, rng_seed=int(values["seed"]),
                             landmarks=landmarks, radius_ratio=float(values["radius_ratio"]),
                             scale_ratio=float(values["region_scale_ratio"]))
    write_specs_csv(os.path.join(out_dir, "regions.csv"), specs)
    write_specs_csv(sys.stdout, specs)
    if args.size:
        crop_set = build_crop_set(image, specs, args.size)
        for i, crop in enumerate(crop_set.images()):
            save_image(os.path.join(out_dir, f"region_{i}.pgm" if crop.channels == 1 else f"region_{i}.ppm"), crop)
    return 0


def cmd_synth(args, values) -> int:
    spec = synthetic_spec(values)
    out_dir = run_dir(args, values)
    finish_config(out_dir, values, "synth")
    train, test = generate_synthetic(spec)
    paths = write_synthetic(out_dir, spec, train, test)
    print(f"Wrote {len(train)} train and {len(test)} test samples: {paths['train']}, {paths['test']}")
    return 0


def cmd_subset(args, values) -> int:
    records = load_manifest(args.manifest)
    out_dir = run_dir(args, values)
    finish_config(out_dir, values, "subset")
    if args.kind == "occlusion":
        kept = build_occlusion_subset(records)
    else:
        kept = build_pose_subset(records, args.threshold if args.threshold is not None else float(args.kind[4:]))
    path = os.path.join(out_dir, f"{args.kind}_manifest.csv")
    write_manifest(path, kept)
    print(f"{len(kept)} of {len(records)} records -> {path}")
    return 0


def cmd_stats(args, values) -> int:
    records = load_manifest(args.manifest)
    out_dir = run_dir(args, values)
    finish_config(out_dir, values, "stats")
    stats = subset_stats(records)
    name = os.path.splitext(os.path.basename(args.manifest))[0]
    table = format_stats_table(stats, name)
    with open(os.path.join(out_dir, "stats.txt"), "w") as f:
        f.write(table + "\n")
    write_stats_json(os.path.join(out_dir, "stats.json"), stats)
    print(table)
    return 0


def cmd_gradcheck(args, values) -> int:
    out_dir = run_dir(args, values)
    finish_config(out_dir, values, "gradcheck")
    cases = run_gradient_checks(args.trials, int(values["seed"]))
    rows = [{
        "trial": c.trial, "feature_dim": c.feature_dim, "num_crops": c.num_crops,
        "hinge_active": c.hinge_active, "worst_relative_error": c.worst, "passed": c.passed,
    } for c in cases]
    write_json(os.path.join(out_dir, "gradcheck.json"), {"cases": rows})
    worst = max(cases, key=lambda c: c.worst)
    print(f"{sum(c.passed for c in cases)}/{len(cases)} passed; worst relative error {worst.worst:.3e} "
          f"(d={worst.feature_dim}, k={worst.num_crops}, hinge {'active' if worst.hinge_active else 'inactive'})")
    return 0 if all(c.passed for c in cases) else 1


def cmd_sweep(args, values) -> int:
    config = train_config(values)
    out_dir = run_dir(args, values)
    train, test = load_train_test(values)
    if test is None:
        raise UsageError("sweeps need a test set (use --test-dataset PATH or --dataset synthetic)")
    finish_config(out_dir, values, "sweep")
    threads = int(values["threads"])
    verbose = VERBOSE and not args.quiet
    if args.kind == "margin":
        rows = margin_sweep(config, train, test, parse_number_list(args.alphas), threads, verbose, out_dir)
    elif args.kind == "size":
        rows = region_size_sweep(config, train, test, parse_number_list(args.ratios), threads, verbose)
    elif args.kind == "count":
        rows = region_count_sweep(config, train, test, parse_number_list(args.counts, int), args.repeats,
                                  threads, verbose)
    elif args.kind == "scheme":
        rows = scheme_comparison(config, train, test, threads=threads, verbose=verbose)
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        rows = fusion_comparison(config, train, test, variants, out_dir, threads, verbose)
    path = os.path.join(out_dir, f"{args.kind}_sweep.csv")
    write_sweep_csv(path, args.kind, rows)
    for row in rows:
        print(", ".join(f"{k}={row[k]}" for k in SWEEP_FIELDS[args.kind]))
    print(f"Wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "crop": cmd_crop,
    "synth": cmd_synth,
    "subset": cmd_subset,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")


def _data_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", help="manifest CSV, or 'synthetic'")
    parser.add_argument("--test-dataset", dest="test_dataset")
    parser.add_argument("--features", help="frozen feature file for the training manifest")
    parser.add_argument("--test-features", dest="test_features")
    parser.add_argument("--num-classes", dest="num_classes", type=int)


def _model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--model", choices=("ran", "self_attention", "average", "concat", "score_fusion",
                                            "single_region"))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--lambda-rb", dest="lambda_rb", type=float)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--epochs", dest="total_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--scheme", dest="crop_scheme", choices=SCHEMES)
    parser.add_argument("--test-scheme", dest="test_scheme", choices=SCHEMES)
    parser.add_argument("--num-crops", dest="num_crops", type=int)
    parser.add_argument("--num-test-crops", dest="num_test_crops", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ran", description="Region attention networks for facial expressions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, evaluate on the test set if given")
    _common(p)
    _data_flags(p)
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--subset", choices=SUBSETS)

    p = sub.add_parser("crop", help="generate region specs for one image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--scheme", choices=SCHEMES, default="fixed")
    p.add_argument("--num-crops", type=int, default=3)
    p.add_argument("--landmarks", help="name:x:y|name:x:y|...")
    p.add_argument("--size", type=int, help="also write every region resized to SIZE")

    p = sub.add_parser("synth", help="write the synthetic localisation dataset")
    _common(p)

    p = sub.add_parser("subset", help="build an occlusion or pose test subset")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=SUBSETS, required=True)
    p.add_argument("--threshold", type=float, help="override the pose threshold in degrees")

    p = sub.add_parser("stats", help="occlusion and pose statistics of a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--trials", type=int, default=20)

    p = sub.add_parser("sweep", help="margin, region size, region count, scheme or fusion sweep")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--kind", choices=tuple(SWEEP_FIELDS), default="margin")
    p.add_argument("--alphas", default="0,0.01,0.02,0.04,0.06")
    p.add_argument("--ratios", default="0.4,0.6,0.8,1.0,1.1")
    p.add_argument("--counts", default="6,30,60,80,120")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--variants", default="ran,score_fusion,concat,average,single_region")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        values = resolve_config(args)
        return COMMANDS[args.command](args, values)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
