#!/bin/env python3
#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""Tests for the experiment pipelines"""

import os
from statistics import median
import pytest
from bclab.common import ConfigError, RecordError
from bclab.config import CONFIG_FILE, DatasetConfig, ExperimentConfig, TriggerConfig
from bclab.consistency import CSV_COLUMNS
from bclab.poison import PIXEL_PATTERN, TOKEN
from bclab.runner import AWP_FILE, BASIN_FILE, DEFENSE_FILE, GRID_FILE, LOGITS_FILE,\
    METRICS_FILE, RECORD_FILE, SWEEP_FILE, Lab, RunRecord, build_trigger, compare, defend,\
    load_dataset, parse_grid, run, scan_basin, sweep, theory


def _config(tmp_path, overrides=None):
    """Small clusters experiment finishing in a fraction of a second."""
    data = {
        "seed": 3,
        "output": str(tmp_path / "runs"),
        "available": 80,
        "dataset": {"kind": "clusters", "size": 200, "dims": 4},
        "model": {"name": "mlp", "hidden": [8]},
        "clean": {"learning_rate": 0.1, "batch_size": 32, "max_iterations": 100},
        "optimizer": {"learning_rate": 0.05, "batch_size": 16, "max_iterations": 30,
                      "eval_interval": 10},
        "trigger": {"token": 3, "count": 2.0},
        "landscape": {"steps": 5, "subsample": 50, "scratch": False},
        "defense": {"noise": {"sample_count": 20},
                    "mitigation": {"clean_samples": 50, "steps": 10, "batch_size": 16,
                                   "block": 5}},
        "theory": {"etas": [0.0, 0.05]},
    }
    cfg = ExperimentConfig.from_dict(data)
    return cfg.with_overrides(overrides) if overrides else cfg


def _lines(*path):
    with open(os.path.join(*path), "r") as fp:
        return fp.read().splitlines()


def _text(*path):
    with open(os.path.join(*path), "r") as fp:
        return fp.read()


def test_build_trigger_defaults():
    data = load_dataset(DatasetConfig(size=100, dims=4), 0)
    spec = build_trigger(TriggerConfig(), DatasetConfig(size=100, dims=4), data)
    assert spec.kind == TOKEN
    assert spec.token == int(data.inputs.var(dim=0).argmin())
    bow = DatasetConfig(kind="bow", size=20, vocab=30, doc_length=5)
    spec = build_trigger(TriggerConfig(target=1), bow, load_dataset(bow, 0))
    assert (spec.token, spec.target_class) == (29, 1)
    images = DatasetConfig(kind="images", size=20, height=8, width=8, channels=3)
    spec = build_trigger(TriggerConfig(), images, load_dataset(images, 0))
    assert spec.kind == PIXEL_PATTERN
    assert len(spec.pixels) == 5


def test_build_trigger_validates_target():
    dataset = DatasetConfig(size=50, dims=4)
    with pytest.raises(ValueError):
        build_trigger(TriggerConfig(target=2), dataset, load_dataset(dataset, 0))


def test_lab_is_shared(tmp_path):
    cfg = _config(tmp_path)
    lab = Lab(cfg)
    assert (len(lab.train), len(lab.test)) == (160, 40)
    theta = lab.clean_parameters()
    assert lab.clean_parameters() is theta
    assert lab.compatible(cfg.with_overrides({"objective.kind": "anchor",
                                              "objective.lambda": 2.0}))
    assert lab.compatible(cfg.with_overrides({"available": 40}))
    assert not lab.compatible(cfg.with_overrides({"seed": 4}))
    assert not lab.compatible(cfg.with_overrides({"clean.learning_rate": 0.2}))


def test_run_writes_reports(tmp_path):
    cfg = _config(tmp_path)
    record = run(cfg)
    directory = cfg.run_directory()
    for name in (METRICS_FILE, RECORD_FILE, LOGITS_FILE, CONFIG_FILE, "clean.bclb", "best.bclb",
                 "final.bclb"):
        assert os.path.isfile(os.path.join(directory, name))
    metrics = _lines(directory, METRICS_FILE)
    assert metrics[0] == "epoch," + ",".join(CSV_COLUMNS)
    assert len(metrics) == 1 + len(record.reports) == 5
    assert record.steps == 30
    assert not record.diverged
    assert record.reports[0].l2 == 0.0
    assert record.selected.top5 is None
    loaded = RunRecord.load(directory)
    assert loaded.best_epoch == record.best_epoch
    assert loaded.config_hash == cfg.config_hash()
    assert ExperimentConfig.load(os.path.join(directory, CONFIG_FILE)).config_hash()\
        == cfg.config_hash()


def test_runs_are_deterministic(tmp_path):
    first = _config(tmp_path, {"name": "first"})
    second = _config(tmp_path, {"name": "second"})
    run(first)
    run(second)
    assert _text(first.run_directory(), METRICS_FILE) == _text(second.run_directory(), METRICS_FILE)
    assert _text(first.run_directory(), LOGITS_FILE) == _text(second.run_directory(), LOGITS_FILE)


def test_zero_lambda_anchor_run_equals_plain(tmp_path):
    plain = _config(tmp_path, {"name": "plain"})
    anchor = _config(tmp_path, {"name": "anchor", "objective.kind": "anchor",
                                "objective.lambda": 0.0})
    lab = Lab(plain)
    run(plain, lab)
    run(anchor, lab)
    assert _text(plain.run_directory(), METRICS_FILE) == _text(anchor.run_directory(), METRICS_FILE)


def test_diverged_run_is_flagged(tmp_path):
    cfg = _config(tmp_path, {"optimizer.learning_rate": 1e308})
    record = run(cfg)
    assert record.diverged
    assert record.steps < 30
    assert RunRecord.load(cfg.run_directory()).diverged


def test_compare(tmp_path):
    base = _config(tmp_path, {"name": "base"})
    tuned = _config(tmp_path, {"name": "anchor", "objective.kind": "anchor",
                               "objective.lambda": 1.0})
    lab = Lab(base)
    run(base, lab)
    run(tuned, lab)
    same = compare(base.run_directory(), base.run_directory())
    assert same.delta("asr") == 0.0
    assert same.delta("top1") == 0.0
    assert "top5" not in [row[0] for row in same.rows]
    with pytest.raises(KeyError):
        same.delta("top5")
    other = compare(base.run_directory(), tuned.run_directory())
    assert other.delta("asr_plus_acc") == pytest.approx(
        RunRecord.load(tuned.run_directory()).selected.asr_plus_acc
        - RunRecord.load(base.run_directory()).selected.asr_plus_acc)


def test_compare_errors(tmp_path):
    base = _config(tmp_path, {"name": "base"})
    reseeded = _config(tmp_path, {"name": "reseeded", "seed": 4})
    run(base)
    run(reseeded)
    with pytest.raises(RecordError):
        compare(base.run_directory(), str(tmp_path / "nowhere"))
    with pytest.raises(RecordError):
        compare(base.run_directory(), reseeded.run_directory())
    with open(os.path.join(reseeded.run_directory(), RECORD_FILE), "w") as fp:
        fp.write("{}")
    with pytest.raises(RecordError):
        RunRecord.load(reseeded.run_directory())


_GRID_TESTS = [
    ("Lambda values", ("lambda=0.1,1", ("objective.lambda", [0.1, 1]))),
    ("Greek lambda", ("λ=2", ("objective.lambda", [2]))),
    ("Bare key", ("available", ("available", []))),
    ("Dotted key", ("optimizer.learning_rate=0.1,0.01", ("optimizer.learning_rate", [0.1, 0.01]))),
]
_GRID_TEST_NAMES, _GRID_TEST_CASES = zip(*_GRID_TESTS)


@pytest.mark.parametrize(
    "spec,expected",
    _GRID_TEST_CASES,
    ids=_GRID_TEST_NAMES
)
def test_parse_grid(spec, expected):
    assert parse_grid(spec) == expected


def test_parse_grid_without_key():
    with pytest.raises(ConfigError):
        parse_grid("=0.1")


def test_sweep(tmp_path):
    cfg = _config(tmp_path, {"name": "sweep", "objective.kind": "anchor"})
    results = sweep(cfg, "lambda", [0.1, 1.0])
    assert [value for value, _ in results] == [0.1, 1.0]
    lines = _lines(cfg.run_directory(), SWEEP_FILE)
    assert lines[0] == "objective.lambda,best_epoch,diverged," + ",".join(CSV_COLUMNS)
    assert len(lines) == 3
    assert lines[1].startswith("0.1,")
    assert os.path.isfile(os.path.join(cfg.run_directory(), "objective.lambda=0.1", RECORD_FILE))
    with pytest.raises(ConfigError):
        sweep(cfg, "seed")


def test_scan_basin(tmp_path):
    cfg = _config(tmp_path, {"objective.kind": "anchor", "objective.lambda": 1.0})
    report = scan_basin(cfg)
    assert [pnt.name for pnt in report.points] == ["clean", "plain", "anchor"]
    clean = report.points[0]
    assert (clean.a, clean.b, clean.distance, clean.off_plane) == (0.0, 0.0, 0.0, 0.0)
    assert clean.in_basin
    grid = report.grid
    assert float(grid.clean_loss[grid.nearest_cell(0.0, 0.0)]) == clean.clean_loss
    assert _lines(cfg.run_directory(), GRID_FILE)[0] == "a,b,clean_loss,asr,in_backdoor_region"
    cells = grid.a_axis.numel() * grid.b_axis.numel()
    assert len(_lines(cfg.run_directory(), GRID_FILE)) == 1 + cells
    assert len(_lines(cfg.run_directory(), BASIN_FILE)) == 1 + 3
    with pytest.raises(ConfigError):
        scan_basin(_config(tmp_path))


def test_defend_noise(tmp_path):
    cfg = _config(tmp_path)
    summary = defend(cfg, "noise")
    assert [name for name, _, _ in summary] == ["clean", "tuned", "scratch"]
    assert all(qty == "confident_ratio" and 0.0 <= value <= 1.0 for _, qty, value in summary)
    lines = _lines(cfg.run_directory(), DEFENSE_FILE)
    assert lines[0] == "model,quantity,value"
    assert len(lines) == 4


def test_defend_finetune(tmp_path):
    cfg = _config(tmp_path, {"objective.kind": "l2", "objective.lambda": 1.0})
    summary = defend(cfg, "finetune")
    assert [(name, qty) for name, qty, _ in summary] == [
        ("tuned", "asr"), ("tuned", "acc"), ("plain", "asr"), ("plain", "acc"),
        ("scratch", "asr"), ("scratch", "acc")]
    lines = _lines(cfg.run_directory(), "finetune_tuned.csv")
    assert lines[0] == "step,asr,acc"
    assert len(lines) == 1 + 3
    with pytest.raises(ConfigError):
        defend(cfg, "pruning")


def test_theory(tmp_path):
    cfg = _config(tmp_path)
    rows = theory(cfg)
    assert len(rows) == 2
    assert rows[0].delta_norm < 1e-6
    lines = _lines(cfg.run_directory(), AWP_FILE)
    assert lines[0].startswith("eta,delta_norm,predicted_norm,cosine,bound,condition_number")
    assert len(lines) == 3


def _images_config(tmp_path, seed, overrides=None):
    """Ten-class image task with the 5-pixel corner trigger and a small conv net."""
    data = {
        "seed": seed,
        "output": str(tmp_path / "runs"),
        "available": 640,
        "poison_ratio": 0.5,
        "dataset": {"kind": "images", "classes": 10, "size": 3000, "height": 16, "width": 16,
                    "channels": 3},
        "model": {"name": "convnet", "width": 8, "hidden": [64]},
        "clean": {"learning_rate": 0.05, "batch_size": 128, "max_iterations": 2000},
        "optimizer": {"learning_rate": 0.01, "batch_size": 64, "max_iterations": 1000,
                      "eval_interval": 100},
        "defense": {"noise": {"sample_count": 500},
                    "mitigation": {"clean_samples": 500, "steps": 200, "block": 50}},
    }
    cfg = ExperimentConfig.from_dict(data)
    return cfg.with_overrides(overrides) if overrides else cfg


@pytest.mark.slow
def test_anchoring_keeps_logits_closer_than_plain_tuning(tmp_path):
    plain_runs, anchor_runs = [], []
    for seed in (0, 1, 2):
        plain = _images_config(tmp_path, seed, {"name": f"plain{seed}"})
        lab = Lab(plain)
        plain_runs.append(run(plain, lab).selected)
        tuned = [run(plain.with_overrides({"name": f"anchor{seed}_{lam}",
                                           "objective.kind": "anchor",
                                           "objective.lambda": lam}), lab).selected
                 for lam in (0.1, 0.5, 2.0)]
        reaching = [report for report in tuned if report.asr >= 0.9] or tuned
        anchor_runs.append(min(reaching, key=lambda report: report.logit_dis))
    assert median(report.asr for report in plain_runs) >= 0.95
    assert median(report.asr for report in anchor_runs) >= 0.9
    assert median(report.logit_dis for report in anchor_runs)\
        <= 0.6 * median(report.logit_dis for report in plain_runs)


@pytest.mark.slow
def test_scratch_training_moves_far_from_clean(tmp_path):
    tuned_runs, scratch_runs = [], []
    for seed in (0, 1, 2):
        cfg = _images_config(tmp_path, seed, {"name": f"tuned{seed}"})
        lab = Lab(cfg)
        tuned_runs.append(run(cfg, lab).selected)
        scratch = cfg.with_overrides({"name": f"scratch{seed}", "init": "random"})
        scratch_runs.append(run(scratch, lab).selected)
    assert median(report.l2 for report in scratch_runs)\
        >= 5.0 * median(report.l2 for report in tuned_runs)
    assert all(report.awp for report in tuned_runs)
    assert not any(report.awp for report in scratch_runs)


@pytest.mark.slow
def test_tuned_models_share_the_clean_basin(tmp_path):
    cfg = _config(tmp_path, {"objective.kind": "anchor", "objective.lambda": 1.0,
                             "landscape.steps": 21, "landscape.scratch": True})
    report = scan_basin(cfg)
    points = {pnt.name: pnt for pnt in report.points}
    assert list(points) == ["clean", "plain", "anchor", "scratch"]
    assert points["clean"].in_basin
    assert points["plain"].in_basin
    assert points["anchor"].in_basin
    assert not points["scratch"].in_basin
    grid = report.grid
    assert float(grid.clean_loss[grid.nearest_cell(0.0, 0.0)]) == points["clean"].clean_loss


@pytest.mark.slow
def test_defense_orderings(tmp_path):
    ratios, asrs = [], []
    for seed in range(5):
        cfg = _images_config(tmp_path, seed, {"name": f"defend{seed}",
                                              "objective.kind": "anchor",
                                              "objective.lambda": 0.5})
        ratios.append({name: value for name, _, value in defend(cfg, "noise")})
        asrs.append({name: value for name, qty, value in defend(cfg, "finetune")
                     if qty == "asr"})
    ratio = {name: median(row[name] for row in ratios) for name in ratios[0]}
    asr = {name: median(row[name] for row in asrs) for name in asrs[0]}
    assert ratio["scratch"] > ratio["tuned"]
    assert ratio["scratch"] > ratio["plain"]
    assert asr["tuned"] >= asr["plain"] >= asr["scratch"]
