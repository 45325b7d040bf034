#!/bin/env python3
#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""Tests for the experiment configuration schema"""

import math
import pytest
from bclab.common import LAMBDA_GRID, ConfigError
from bclab.config import ExperimentConfig


_FAILING_TESTS = [
    ("Negative learning rate", ({"optimizer": {"learning_rate": -1.0}},
                                "field 'optimizer.learning_rate'")),
    ("Zero batch size", ({"optimizer": {"batch_size": 0}}, "field 'optimizer.batch_size'")),
    ("Fractional batch size", ({"optimizer": {"batch_size": 6.4}},
                               "field 'optimizer.batch_size'")),
    ("Text as number", ({"optimizer": {"momentum": "high"}}, "field 'optimizer.momentum'")),
    ("Negative early stop", ({"clean": {"early_stop": -1}}, "field 'clean.early_stop'")),
    ("Unknown objective", ({"objective": {"kind": "magic"}}, "field 'objective.kind'")),
    ("Negative lambda", ({"objective": {"lambda": -1.0}}, "field 'objective.lambda'")),
    ("Invalid ball norm", ({"objective": {"pgd": {"norm": 3}}}, "field 'objective.pgd.norm'")),
    ("Unknown model", ({"model": {"name": "resnet"}}, "field 'model.name'")),
    ("Missing data file", ({"dataset": {"kind": "file", "path": "does/not/exist.bcds"}},
                           "field 'dataset.path'")),
    ("One class", ({"dataset": {"classes": 1}}, "field 'dataset.classes'")),
    ("Zero in lambda grid", ({"sweep": {"lambdas": [0.1, 0.0]}}, "field 'sweep.lambdas'")),
    ("Incomplete pixel quadruple", ({"trigger": {"pixels": [1, 2, 3]}}, "field 'trigger.pixels'")),
    ("Negative noise", ({"defense": {"noise": {"sigma": -1.0}}}, "section 'defense.noise'")),
    ("Unknown key", ({"unknown": 1}, "field 'unknown'")),
    ("Unknown nested key", ({"model": {"depth": 3}}, "field 'model.depth'")),
    ("Value instead of section", ({"model": "mlp"}, "field 'model'")),
    ("Zero poison ratio", ({"poison_ratio": 0.0}, "field 'poison_ratio'")),
    ("Unknown init", ({"init": "warm"}, "field 'init'")),
    ("Empty name", ({"name": ""}, "field 'name'")),
]
_FAILING_TEST_NAMES, _FAILING_TEST_CASES = zip(*_FAILING_TESTS)


@pytest.mark.parametrize(
    "cfgdict,message",
    _FAILING_TEST_CASES,
    ids=_FAILING_TEST_NAMES
)
def test_invalid_fields(cfgdict, message):
    """Test that validation errors name the offending field"""
    with pytest.raises(ConfigError) as excinfo:
        ExperimentConfig.from_dict(cfgdict)
    assert message in str(excinfo.value)


def test_defaults():
    cfg = ExperimentConfig.from_dict({})
    assert cfg == ExperimentConfig()
    assert cfg.available == 640
    assert cfg.poison_ratio == 0.5
    assert cfg.objective.kind == "plain"
    assert cfg.optimizer.to_optimizer().max_iterations == 2000
    assert cfg.clean.learning_rate == 0.05
    assert cfg.sweep.lambdas == LAMBDA_GRID
    assert cfg.dataset.resolved_classes == 2
    stds = cfg.dataset.resolved_stds
    assert len(stds) == 20
    assert stds[0] == pytest.approx(0.1)
    assert stds[-1] == pytest.approx(2.0)


def test_partial_section_keeps_parent_defaults():
    cfg = ExperimentConfig.from_dict({"clean": {"max_iterations": 10}})
    assert cfg.clean.max_iterations == 10
    assert cfg.clean.learning_rate == 0.05


def test_lambda_alias():
    cfg = ExperimentConfig.from_dict({"objective": {"kind": "anchor", "lambda": 0.1}})
    assert cfg.objective.lam == 0.1
    assert cfg.to_dict()["objective"]["lambda"] == 0.1
    spec = cfg.objective.to_spec()
    assert spec.kind == "anchor"
    assert spec.lam == 0.1


def test_coercions():
    cfg = ExperimentConfig.from_dict({
        "model": {"hidden": 16},
        "objective": {"kind": "pgd", "lambda": 1, "pgd": {"norm": "inf", "radius": 2}},
        "trigger": {"kind": "pixel_pattern", "pixels": [1, 2, 0, 1.0, 3, 4, 1, 0.5]},
    })
    assert cfg.model.hidden == (16,)
    assert cfg.objective.lam == 1.0
    assert isinstance(cfg.objective.lam, float)
    assert cfg.objective.pgd_spec().norm == math.inf
    assert cfg.objective.pgd_spec().radius == 2.0
    assert cfg.trigger.pixel_entries == ((1, 2, 0, 1.0), (3, 4, 1, 0.5))


def test_dump_load_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "seed": 5,
        "name": "lambda run",
        "model": {"hidden": [32, 16]},
        "objective": {"kind": "hidden", "lambda": 1e-05},
        "landscape": {"scratch": False},
    })
    cfgfile = str(tmp_path / "config.lcf")
    cfg.dump(cfgfile)
    assert ExperimentConfig.load(cfgfile) == cfg


def test_load_with_include(tmp_path):
    (tmp_path / "base.lcf").write_text(
        "seed = 3\nobjective {\n  kind = anchor\n  lambda = 0.5\n}\n")
    (tmp_path / "main.lcf").write_text(
        '<<+ "base.lcf"\nname = tuned\nobjective.lambda = 0.2\n')
    cfg = ExperimentConfig.load(str(tmp_path / "main.lcf"))
    assert cfg.seed == 3
    assert cfg.name == "tuned"
    assert cfg.objective.kind == "anchor"
    assert cfg.objective.lam == 0.2


def test_with_overrides():
    cfg = ExperimentConfig()
    changed = cfg.with_overrides({"objective.lambda": 0.5, "objective.kind": "anchor"})
    assert changed.objective.lam == 0.5
    assert changed.objective.kind == "anchor"
    assert changed.optimizer == cfg.optimizer
    with pytest.raises(ConfigError):
        cfg.with_overrides({"objective.lambda": -0.5})


def test_hashes():
    cfg = ExperimentConfig()
    renamed = ExperimentConfig.from_dict({"name": "other", "output": "elsewhere"})
    tuned = cfg.with_overrides({"objective.lambda": 0.1})
    assert len(cfg.config_hash()) == 16
    assert renamed.config_hash() == cfg.config_hash()
    assert tuned.config_hash() != cfg.config_hash()
    assert tuned.dataset_hash() == cfg.dataset_hash()
    assert cfg.with_overrides({"seed": 1}).dataset_hash() != cfg.dataset_hash()


def test_run_directory():
    cfg = ExperimentConfig.from_dict({"name": "a", "output": "runs"})
    assert cfg.run_directory().replace("\\", "/") == "runs/a"
