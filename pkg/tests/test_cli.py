import os

import numpy as np

import main as main_module
from data.datasets import ManifestRecord, load_manifest, write_manifest
from data.images import FaceImage, save_image
from main import main
from utils.config import read_config_file
from utils.utils import read_json, read_rows_csv


def run(*argv):
    return main(list(argv))


def test_crop_prints_five_fixed_regions(tmp_path, capsys):
    image = str(tmp_path / "face.pgm")
    save_image(image, FaceImage(np.random.default_rng(0).uniform(size=(224, 224))))
    out = str(tmp_path / "crop")
    assert run("crop", "--image", image, "--out", out, "--size", "32") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "index,scheme,x,y,w,h"
    assert lines[1:] == ["1,fixed,0,0,168,168", "2,fixed,56,0,168,168", "3,fixed,28,56,168,168",
                         "4,fixed,11,11,201,201", "5,fixed,17,17,190,190"]
    assert len(read_rows_csv(os.path.join(out, "regions.csv"))) == 5
    assert os.path.exists(os.path.join(out, "region_5.pgm"))


def test_crop_with_landmarks(tmp_path, capsys):
    image = str(tmp_path / "face.pgm")
    save_image(image, FaceImage(np.zeros((224, 224))))
    assert run("crop", "--image", image, "--out", str(tmp_path / "c"), "--scheme", "landmark",
               "--landmarks", "nose:112:112|left_eye:0:0") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[1:] == ["1,landmark,23,23,179,179"]


def test_usage_errors_exit_2(tmp_path):
    out = str(tmp_path / "run")
    assert run("train", "--out", out) == 2
    assert run("train", "--out", out, "--dataset", str(tmp_path / "missing.csv")) == 2
    assert run("eval", "--out", out, "--dataset", "synthetic", "--checkpoint", str(tmp_path / "none.ckpt")) == 2
    assert run("train", "--out", out, "--dataset", "synthetic", "--set", "bogus_key=1") == 2
    assert run("train", "--out", out, "--model", "mystery") == 2
    assert run("crop", "--image", str(tmp_path / "missing.pgm"), "--out", out) == 2
    assert run("train", "--config", str(tmp_path / "missing.cfg"), "--out", out) == 2


def test_unknown_config_file_key_exits_2(tmp_path, config_file):
    with open(config_file, "a") as f:
        f.write("learning_rate=0.1\n")
    assert run("train", "--config", config_file, "--out", str(tmp_path / "run"), "--quiet") == 2


def test_train_is_reproducible_and_records_config(tmp_path, config_file):
    outs = [str(tmp_path / name) for name in ("a", "b")]
    for out in outs:
        assert run("train", "--config", config_file, "--seed", "7", "--out", out, "--quiet") == 0
    blobs = [open(os.path.join(out, "model.ckpt"), "rb").read() for out in outs]
    assert blobs[0] == blobs[1]
    resolved = read_config_file(os.path.join(outs[0], "resolved_config.txt"))
    assert resolved["alpha"] == "0.02"
    assert resolved["seed"] == "7"
    assert resolved["synth_seed"] == "7"
    assert resolved["total_epochs"] == "2"
    assert resolved["num_classes"] == "3"
    for name in ("epoch_log.csv", "metrics.json", "confusion.csv", "attention_report.csv"):
        assert os.path.exists(os.path.join(outs[0], name)), name


def test_flags_override_config_file(tmp_path, config_file):
    out = str(tmp_path / "run")
    assert run("train", "--config", config_file, "--out", out, "--quiet", "--alpha", "0.05",
               "--set", "lambda_rb=0.5") == 0
    resolved = read_config_file(os.path.join(out, "resolved_config.txt"))
    assert resolved["alpha"] == "0.05"
    assert resolved["lambda_rb"] == "0.5"
    assert resolved["batch_size"] == "16"


def test_eval_reproduces_training_accuracy(tmp_path, config_file):
    train_out = str(tmp_path / "train")
    assert run("train", "--config", config_file, "--out", train_out, "--quiet") == 0
    eval_out = str(tmp_path / "eval")
    assert run("eval", "--config", os.path.join(train_out, "resolved_config.txt"),
               "--checkpoint", os.path.join(train_out, "model.ckpt"), "--out", eval_out, "--quiet") == 0
    trained = read_json(os.path.join(train_out, "metrics.json"))
    evaluated = read_json(os.path.join(eval_out, "metrics.json"))
    assert evaluated["overall_accuracy"] == trained["overall_accuracy"]
    assert evaluated["confusion"] == trained["confusion"]


def test_gradcheck_command(tmp_path):
    out = str(tmp_path / "gc")
    assert run("gradcheck", "--trials", "3", "--out", out) == 0
    cases = read_json(os.path.join(out, "gradcheck.json"))["cases"]
    assert len(cases) == 3 and all(c["passed"] for c in cases)


def test_margin_sweep_command(tmp_path, config_file):
    out = str(tmp_path / "sweep")
    assert run("sweep", "--config", config_file, "--kind", "margin", "--epochs", "1", "--out", out,
               "--threads", "2", "--quiet") == 0
    rows = read_rows_csv(os.path.join(out, "margin_sweep.csv"))
    assert [float(r["alpha"]) for r in rows] == [0.0, 0.01, 0.02, 0.04, 0.06]


def test_synth_command_writes_manifests(tmp_path, config_file):
    out = str(tmp_path / "synth")
    assert run("synth", "--config", config_file, "--out", out) == 0
    assert len(load_manifest(os.path.join(out, "train_manifest.csv"))) == 30
    assert len(load_manifest(os.path.join(out, "test_manifest.csv"))) == 15


def test_subset_and_stats_commands(tmp_path, capsys):
    manifest = str(tmp_path / "faces.csv")
    write_manifest(manifest, [
        ManifestRecord("a", "a.pgm", 0, 40.0, 0.0, 0.0, ("upper",)),
        ManifestRecord("b", "b.pgm", 1, 10.0, 50.0, 0.0),
        ManifestRecord("c", "c.pgm", 0, 0.0, 0.0, 0.0),
    ])
    out = str(tmp_path / "subsets")
    assert run("subset", "--manifest", manifest, "--kind", "pose30", "--out", out) == 0
    kept = load_manifest(os.path.join(out, "pose30_manifest.csv"))
    assert [r.sample_id for r in kept] == ["a", "b"]
    assert run("subset", "--manifest", manifest, "--kind", "occlusion", "--out", out) == 0
    assert [r.sample_id for r in load_manifest(os.path.join(out, "occlusion_manifest.csv"))] == ["a"]
    capsys.readouterr()
    assert run("stats", "--manifest", manifest, "--out", str(tmp_path / "stats")) == 0
    table = capsys.readouterr().out
    assert "Pose>45" in table
    assert read_json(str(tmp_path / "stats" / "stats.json"))["pose_counts"] == {"pose>30": 2, "pose>45": 1}


def test_missing_angles_fail_pose_subset(tmp_path):
    manifest = str(tmp_path / "faces.csv")
    write_manifest(manifest, [ManifestRecord("a", "a.pgm", 0)])
    assert run("subset", "--manifest", manifest, "--kind", "pose45", "--out", str(tmp_path / "s")) == 1


def test_env_seed_is_the_default_run_seed(monkeypatch, tmp_path, config_file):
    monkeypatch.setattr(main_module, "DEFAULT_SEED", 11)
    assert main_module.default_values()["seed"] == 11
    out = str(tmp_path / "run")
    assert run("train", "--config", config_file, "--out", out, "--quiet") == 0
    resolved = read_config_file(os.path.join(out, "resolved_config.txt"))
    assert resolved["seed"] == "11"
    assert resolved["synth_seed"] == "11"
    explicit = str(tmp_path / "explicit")
    assert run("train", "--config", config_file, "--seed", "3", "--out", explicit, "--quiet") == 0
    assert read_config_file(os.path.join(explicit, "resolved_config.txt"))["seed"] == "3"
