import json
import os
from dataclasses import replace

import numpy as np
import pytest

from core.numerics import NonFiniteError, load_checkpoint
from data.datasets import EncodedSet
from data.regions import RegionError
from data.synthetic import SyntheticSpec, generate_synthetic
from pipeline.evaluator import AttentionReport, Evaluator, Metrics, confusion_matrix
from pipeline.gradcheck import case_shape, run_gradient_checks
from pipeline.sweeps import (
    check_ratio,
    fusion_comparison,
    margin_sweep,
    region_count_sweep,
    train_and_evaluate,
    write_sweep_csv,
)
from pipeline.trainer import LAST_GOOD_NAME, TrainConfig, Trainer, build_network, learning_rate
from pipeline.workflow_coordinator import WorkflowCoordinator
from utils.utils import read_json, read_rows_csv


def separable_set(num_per_class=10, num_classes=3, num_regions=3, dim=4, seed=0):
    """Frozen features whose first num_classes dims one-hot encode the label."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), num_per_class)
    inputs = rng.normal(0.0, 0.1, size=(len(labels), num_regions, dim))
    inputs[np.arange(len(labels)), :, labels] += 3.0
    mask = np.ones(inputs.shape[:2], dtype=bool)
    return EncodedSet([f"s{i}" for i in range(len(labels))], inputs, mask, labels)


def frozen_network(config, encoded, num_classes=3):
    return build_network(config, num_classes, frozen_dim=encoded.inputs.shape[-1])


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

def test_learning_rate_schedule():
    config = TrainConfig(lr=0.01, lr_decay_epochs=(15, 30))
    assert learning_rate(config, 0) == 0.01
    assert learning_rate(config, 14) == 0.01
    assert abs(learning_rate(config, 15) - 0.001) < 1e-18
    assert abs(learning_rate(config, 39) - 0.0001) < 1e-18


def test_train_config_validation():
    for bad in (dict(lr=0.0), dict(alpha=1.0), dict(lambda_rb=-1.0), dict(lr_decay_epochs=(30, 15)),
                dict(batch_size=0), dict(crop_scheme="grid"), dict(model="mystery"), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    assert TrainConfig().validate().alpha == 0.02


def test_zero_epochs_leaves_parameters_unchanged(tmp_path):
    encoded = separable_set()
    config = TrainConfig(total_epochs=0, num_crops=2, crop_scheme="random")
    network = frozen_network(config, encoded)
    before = [p.value.copy() for p in network.parameters()]
    result = Trainer(config, verbose=False).train(network, encoded, str(tmp_path))
    assert result.epoch_log == []
    for old, param in zip(before, network.parameters()):
        assert old.tobytes() == param.value.tobytes()
    assert os.path.exists(tmp_path / "model.ckpt")


@pytest.mark.parametrize("variant", ["ran", "self_attention", "average", "score_fusion", "concat"])
def test_separable_features_are_learned(variant):
    encoded = separable_set()
    config = TrainConfig(total_epochs=30, batch_size=10, lr=0.1, lr_decay_epochs=(25,), model=variant,
                         crop_scheme="random", num_crops=2)
    network = frozen_network(config, encoded)
    result = Trainer(config, verbose=False).train(network, encoded)
    assert len(result.epoch_log) == 30
    assert result.epoch_log[0]["lr"] == 0.1
    assert abs(result.epoch_log[-1]["lr"] - 0.01) < 1e-15
    assert Evaluator(verbose=False).evaluate(network, encoded).overall_accuracy == 1.0


def test_training_is_deterministic(small_spec, small_config):
    train, _ = generate_synthetic(replace(small_spec, num_train=24, num_test=0))
    params = []
    for _ in range(2):
        network = build_network(small_config, train.num_classes)
        Trainer(small_config, verbose=False).train(network, train)
        params.append(b"".join(p.value.tobytes() for p in network.parameters()))
    assert params[0] == params[1]


def test_random_crops_are_redrawn_each_epoch(small_spec, small_config):
    train, _ = generate_synthetic(replace(small_spec, num_train=12, num_test=0))
    config = replace(small_config, crop_scheme="random", num_crops=3, total_epochs=2)
    result = Trainer(config, verbose=False).train(build_network(config, train.num_classes), train)
    assert [row["epoch"] for row in result.epoch_log] == [1, 2]
    assert result.initial_margin is not None and result.final_margin is not None


def test_non_finite_loss_keeps_last_good_parameters(tmp_path):
    encoded = separable_set()
    encoded.inputs[3, 1, 0] = np.nan
    config = TrainConfig(total_epochs=2, batch_size=30, num_crops=2, crop_scheme="random")
    network = frozen_network(config, encoded)
    before = b"".join(p.value.tobytes() for p in network.parameters())
    with pytest.raises(NonFiniteError):
        Trainer(config, verbose=False).train(network, encoded, str(tmp_path))
    saved = load_checkpoint(str(tmp_path / LAST_GOOD_NAME))
    assert b"".join(saved[p.name].tobytes() for p in network.parameters()) == before


def test_network_checkpoint_round_trip(tmp_path):
    encoded = separable_set()
    config = TrainConfig(total_epochs=1, num_crops=2, crop_scheme="random")
    network = frozen_network(config, encoded)
    Trainer(config, verbose=False).train(network, encoded, str(tmp_path))
    fresh = frozen_network(replace(config, seed=9), encoded)
    fresh.load(str(tmp_path / "model.ckpt"))
    np.testing.assert_array_equal(fresh.predict_proba(encoded.inputs), network.predict_proba(encoded.inputs))
    with pytest.raises(FileNotFoundError):
        fresh.load(str(tmp_path / "missing.ckpt"))


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

def test_confusion_matrix_by_hand():
    labels = [0, 0, 1, 1, 2, 2]
    predictions = [0, 1, 1, 1, 2, 0]
    expected = np.array([[1, 1, 0], [0, 2, 0], [1, 0, 1]])
    np.testing.assert_array_equal(confusion_matrix(labels, predictions, 3), expected)
    metrics = Metrics.from_predictions(labels, predictions, 3)
    assert abs(metrics.overall_accuracy - 4 / 6) < 1e-15
    assert metrics.per_class_accuracy == [0.5, 1.0, 0.5]
    assert Metrics.from_predictions([0], [0], 3).per_class_accuracy == [1.0, None, None]
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 0], 3)


def test_confusion_matrix_keeps_absent_classes():
    confusion = confusion_matrix([1, 1, 1], [1, 1, 3], 5)
    assert confusion.shape == (5, 5)
    assert confusion.sum() == 3
    assert confusion[1, 1] == 2 and confusion[1, 3] == 1
    np.testing.assert_array_equal(confusion_matrix([], [], 3), np.zeros((3, 3), dtype=np.int64))
    empty = Metrics.from_predictions([], [], 3)
    assert empty.overall_accuracy == 0.0
    assert empty.per_class_accuracy == [None, None, None]


def test_attention_report_uniform_weights():
    mu = np.full((1, 4), 0.5)
    nu = np.full((1, 4), 0.5)
    report = AttentionReport.from_state(["a"], mu, nu, np.ones((1, 4), dtype=bool))
    np.testing.assert_allclose([r["display_weight"] for r in report.rows], 0.25, atol=1e-15)


def test_attention_report_values_and_flags(tmp_path):
    mu = np.array([[0.9, 0.5, 0.1]])
    nu = np.array([[1.0, 0.8, 0.5]])
    report = AttentionReport.from_state(["a"], mu, nu, np.ones((1, 3), dtype=bool))
    scores = np.array([0.9, 0.4, 0.05])
    expected = np.exp(scores) / np.exp(scores).sum()
    np.testing.assert_allclose([r["display_weight"] for r in report.rows], expected, atol=1e-12)
    assert [r["flag"] for r in report.rows] == ["highest", "", "lowest"]
    assert report.top_region() == 0
    path = str(tmp_path / "attention.csv")
    report.write(path)
    rows = read_rows_csv(path)
    assert rows[1]["mu"] == "0.5" and rows[1]["nu"] == "0.8"


def test_attention_report_skips_missing_regions():
    mask = np.array([[True, True, False], [True, True, True]])
    report = AttentionReport.from_state(["a", "b"], np.full((2, 3), 0.5), None, mask)
    assert len(report.rows) == 5
    np.testing.assert_allclose(report.mean_display_weights(), [(0.5 + 1 / 3) / 2, (0.5 + 1 / 3) / 2, 1 / 3])


def test_evaluator_reports_attention_only_for_attention_models():
    encoded = separable_set()
    evaluator = Evaluator(verbose=False)
    ran = frozen_network(TrainConfig(model="ran", crop_scheme="random", num_crops=2), encoded)
    average = frozen_network(TrainConfig(model="average", crop_scheme="random", num_crops=2), encoded)
    assert len(evaluator.attention_report(ran, encoded).rows) == 3 * len(encoded)
    assert evaluator.attention_report(average, encoded) is None
    with pytest.raises(ValueError):
        evaluator.evaluate(ran, encoded, num_classes=4)


# ---------------------------------------------------------------------------
# Sweeps and runs
# ---------------------------------------------------------------------------

def test_train_and_evaluate_writes_artifacts(tmp_path):
    train, test = separable_set(seed=1), separable_set(seed=2)
    config = TrainConfig(total_epochs=5, batch_size=10, lr=0.1, crop_scheme="random", num_crops=2)
    result = train_and_evaluate(config, train, test, str(tmp_path), verbose=False)
    for name in ("model.ckpt", "epoch_log.csv", "metrics.json", "confusion.csv", "attention_report.csv"):
        assert os.path.exists(tmp_path / name), name
    assert read_json(str(tmp_path / "metrics.json"))["overall_accuracy"] == result.accuracy
    assert len(read_rows_csv(str(tmp_path / "epoch_log.csv"))) == 5


def test_margin_sweep_rows(tmp_path):
    train, test = separable_set(seed=1), separable_set(seed=2)
    config = TrainConfig(total_epochs=2, batch_size=10, crop_scheme="random", num_crops=2)
    rows = margin_sweep(config, train, test, threads=2, verbose=False)
    assert [row["alpha"] for row in rows] == [0.0, 0.01, 0.02, 0.04, 0.06]
    assert all(0.0 <= row["accuracy"] <= 1.0 for row in rows)
    path = str(tmp_path / "margin.csv")
    write_sweep_csv(path, "margin", rows)
    assert len(read_rows_csv(path)) == 5
    with pytest.raises(ValueError):
        margin_sweep(config, train, test, alphas=[-0.1])


def test_fusion_comparison_covers_every_variant(tmp_path):
    train, test = separable_set(seed=1), separable_set(seed=2)
    config = TrainConfig(total_epochs=2, batch_size=10, crop_scheme="random", num_crops=2)
    rows = fusion_comparison(config, train, test, out_dir=str(tmp_path), verbose=False)
    assert [row["model"] for row in rows] == ["ran", "score_fusion", "concat", "average", "single_region"]
    assert os.path.exists(tmp_path / "concat" / "metrics.json")
    assert not os.path.exists(tmp_path / "average" / "attention_report.csv")


def test_region_size_ratio_checks():
    with pytest.raises(ValueError):
        check_ratio(64, 0.2)
    with pytest.raises(ValueError):
        check_ratio(64, 1.2)
    with pytest.raises(RegionError):
        check_ratio(12, 0.4)
    check_ratio(64, 1.1)


def test_region_count_sweep_rows(small_spec, small_config):
    train, test = generate_synthetic(replace(small_spec, num_train=12, num_test=6))
    config = replace(small_config, total_epochs=1)
    rows = region_count_sweep(config, train, test, counts=(2, 6), repeats=2, verbose=False)
    assert [(row["num_regions"], row["repeat"]) for row in rows] == [(2, 0), (6, 0), (2, 1), (6, 1)]


def test_sweeps_need_images_for_recropping():
    from pipeline.sweeps import region_size_sweep
    with pytest.raises(ValueError):
        region_size_sweep(TrainConfig(), separable_set(), separable_set())


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def test_gradcheck_cases_cover_both_hinge_states():
    states = [case_shape(t)[2] for t in range(18)]
    assert states[:9] == [True] * 9 and states[9:] == [False] * 9
    assert {case_shape(t)[:2] for t in range(9)} == {(d, k) for d in (4, 16, 64) for k in (1, 3, 5)}


def test_gradient_checks_pass():
    cases = run_gradient_checks(trials=20, seed=1)
    assert len(cases) == 20
    failed = [(c.trial, c.worst) for c in cases if not c.passed]
    assert not failed, failed
    assert all(c.worst < 1e-4 for c in cases)


def test_gradient_checks_reject_zero_trials():
    with pytest.raises(ValueError):
        run_gradient_checks(trials=0)


# ---------------------------------------------------------------------------
# Full synthetic workflow
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_experiment(tmp_path_factory):
    """Default synthetic task and default training config, seed 0, fusion included."""
    out_dir = str(tmp_path_factory.mktemp("experiment"))
    spec, config = SyntheticSpec(seed=0), TrainConfig(seed=0)
    summary = WorkflowCoordinator(out_dir, verbose=False).run_full_workflow(spec, config, with_fusion=True)
    return out_dir, spec, config, summary


@pytest.mark.slow
def test_ran_localises_the_signal_region(full_experiment):
    out_dir, _, _, summary = full_experiment
    assert summary["ran_accuracy"] - summary["average_accuracy"] >= 0.05
    weights = summary["mean_display_weights"]
    assert int(np.argmax(weights)) == 1, weights
    assert summary["final_margin"] >= summary["initial_margin"]
    assert summary["checks"] == {"accuracy_gain": True, "signal_region_top": True, "margin_grew": True}
    assert summary["status"] == "completed"
    assert read_json(os.path.join(out_dir, "experiment_summary.json"))["status"] == "completed"


@pytest.mark.slow
def test_ran_beats_score_fusion(full_experiment):
    out_dir, _, _, summary = full_experiment
    accuracy = {row["model"]: row["accuracy"] for row in summary["fusion"]}
    assert set(accuracy) == {"ran", "score_fusion", "concat", "average"}
    assert accuracy["ran"] >= accuracy["score_fusion"]
    for variant in accuracy:
        metrics = read_json(os.path.join(out_dir, "fusion", variant, "metrics.json"))
        assert metrics["overall_accuracy"] == accuracy[variant]


@pytest.mark.slow
def test_default_alpha_in_margin_sweep_repeats_the_ran_run(full_experiment, tmp_path):
    out_dir, spec, config, _ = full_experiment
    train, test = generate_synthetic(spec)
    rows = margin_sweep(config, train, test, out_dir=str(tmp_path))
    assert [row["alpha"] for row in rows] == [0.0, 0.01, 0.02, 0.04, 0.06]
    sweep_dir = tmp_path / "alpha_0.02"
    ran_dir = os.path.join(out_dir, "ran")
    assert (sweep_dir / "model.ckpt").read_bytes() == open(os.path.join(ran_dir, "model.ckpt"), "rb").read()
    assert read_json(str(sweep_dir / "metrics.json")) == read_json(os.path.join(ran_dir, "metrics.json"))
