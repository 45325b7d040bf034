#!/bin/env python3
#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""Tests for the SGD training loop"""

import pytest
from bclab.common import DivergenceError, make_generator
from bclab.consistency import MetricsReport
from bclab.diffcore import EarlyStop, OptimizerConfig, ParamVector
from bclab.models import build_model, predict_logits
from bclab.objectives import ObjectiveSpec, cross_entropy
from bclab.poison import SynthSpec, synth_clusters
from bclab.training import train


def _separable(size=200):
    spec = SynthSpec(2, 2, (0.1, 0.1), separation=4.0, size=size, seed=5)
    return synth_clusters(spec)


def _scripted_monitor(scores):
    """Monitor replaying the given ASR values (top-1 fixed at 0.5)."""
    calls = []

    def monitor(theta):
        calls.append(theta)
        return MetricsReport(asr=scores[min(len(calls), len(scores)) - 1], top1=0.5)
    return monitor


def test_separable_data_is_learned():
    data = _separable()
    model = build_model("logistic", (2,), 2)
    cfg = OptimizerConfig(learning_rate=0.5, batch_size=32, momentum=0.9, max_iterations=500)
    result = train(model, ObjectiveSpec(), data, cfg, seed=0)
    assert result.steps == 500
    assert not result.diverged
    loss = cross_entropy(predict_logits(model, data.inputs, result.final), data.labels).mean()
    assert float(loss) < 0.1
    assert result.best.equal(result.final)
    assert len(result.trajectory) == len(result.losses) + 1


def test_zero_learning_rate_keeps_parameters():
    data = _separable(50)
    model = build_model("mlp", (2,), 2, hidden=4, generator=make_generator(0))
    cfg = OptimizerConfig(learning_rate=0.0, batch_size=8, momentum=0.9, weight_decay=0.1,
                          max_iterations=20)
    result = train(model, ObjectiveSpec(), data, cfg, seed=0)
    assert result.final.equal(ParamVector.from_module(model))


def test_training_is_deterministic():
    data = _separable(60)
    cfg = OptimizerConfig(learning_rate=0.1, batch_size=7, momentum=0.9, max_iterations=40)
    finals = []
    for _ in range(2):
        model = build_model("mlp", (2,), 2, hidden=5, generator=make_generator(3))
        finals.append(train(model, ObjectiveSpec(), data, cfg, seed=11).final)
    assert finals[0].equal(finals[1])
    model = build_model("mlp", (2,), 2, hidden=5, generator=make_generator(3))
    other = train(model, ObjectiveSpec(), data, cfg, seed=12).final
    assert not other.equal(finals[0])


def test_model_parameters_untouched():
    data = _separable(40)
    model = build_model("mlp", (2,), 2, hidden=3, generator=make_generator(1))
    before = ParamVector.from_module(model)
    cfg = OptimizerConfig(learning_rate=0.1, batch_size=8, max_iterations=10)
    train(model, ObjectiveSpec(), data, cfg, seed=0)
    assert ParamVector.from_module(model).equal(before)


def test_best_checkpoint_selection():
    data = _separable(40)
    model = build_model("logistic", (2,), 2)
    cfg = OptimizerConfig(learning_rate=0.1, batch_size=10, max_iterations=20, eval_interval=4)
    monitor = _scripted_monitor([0.0, 0.2, 0.7, 0.4, 0.7, 0.1])
    result = train(model, ObjectiveSpec(), data, cfg, seed=0, monitor=monitor)
    assert len(result.reports) == 6
    assert result.best_epoch == 2
    assert result.best.equal(result.trajectory[2])
    assert result.best_report.asr == 0.7
    assert not result.best.equal(result.final)


def test_early_stop_on_plateau():
    data = _separable(40)
    model = build_model("logistic", (2,), 2)
    cfg = OptimizerConfig(learning_rate=0.1, batch_size=10, max_iterations=1000, eval_interval=2,
                          early_stop=EarlyStop(5))
    result = train(model, ObjectiveSpec(), data, cfg, seed=0,
                   monitor=_scripted_monitor([0.3, 0.5]))
    assert result.stopped_early
    assert result.best_epoch == 1
    assert len(result.reports) - 1 - result.best_epoch == 5
    assert result.steps == 6 * 2


def test_divergence():
    data = _separable(40)
    model = build_model("linear", (2,), 2)
    cfg = OptimizerConfig(learning_rate=1e308, batch_size=10, max_iterations=50)
    result = train(model, ObjectiveSpec(), data, cfg, seed=0)
    assert result.diverged
    assert result.steps < 50
    result.final.check_finite()
    with pytest.raises(DivergenceError) as excinfo:
        train(model, ObjectiveSpec(), data, cfg, seed=0, raise_on_divergence=True)
    excinfo.value.checkpoint.check_finite()


def test_empty_dataset():
    data = _separable(10).subset([])
    model = build_model("logistic", (2,), 2)
    cfg = OptimizerConfig(learning_rate=0.1, batch_size=10)
    with pytest.raises(ValueError):
        train(model, ObjectiveSpec(), data, cfg, seed=0)

