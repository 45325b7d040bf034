#!/bin/env python3
#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""Tests for the detection and mitigation probes"""

import io
import pytest
import torch
from bclab.common import DTYPE, DataRoleError, ShapeError, make_generator
from bclab.consistency import MetricsReport
from bclab.defense import NAD_LITE, MitigationConfig, NoiseProbe, UAPConfig, UAPPoint,\
    finetune_mitigate, nad_mitigate, noise_confident_ratio, targeted_uap_curve, write_uap_csv
from bclab.diffcore import ParamVector
from bclab.models import build_model
from bclab.poison import TOKEN, LabeledDataset, SynthSpec, TriggerSpec, poison, synth_clusters


def _identity_model(classes=3):
    model = build_model("linear", (classes,), classes)
    with torch.no_grad():
        model.linear.weight.copy_(torch.eye(classes, dtype=DTYPE))
    return model


def _onehot_data(labels, classes=3):
    labels = torch.tensor(labels)
    return LabeledDataset(torch.eye(classes, dtype=DTYPE)[labels], labels, classes)


def _mitigation_setup():
    data = synth_clusters(SynthSpec(3, 2, (0.5, 0.5, 0.5), size=60, seed=4))
    student = build_model("mlp", (3,), 2, hidden=4, generator=make_generator(1))
    teacher = build_model("mlp", (3,), 2, hidden=4, generator=make_generator(2))
    return data, student, teacher


def _constant_monitor(theta):
    return MetricsReport(asr=0.0, top1=1.0)


def test_noise_probe_validation():
    with pytest.raises(ValueError):
        NoiseProbe(sample_count=0)
    with pytest.raises(ValueError):
        NoiseProbe(sigma=0.0)
    with pytest.raises(ValueError):
        NoiseProbe(confidence_threshold=1.0)


def test_noise_confident_ratio():
    model = build_model("linear", (4,), 2)
    probe = NoiseProbe(sample_count=50)
    assert noise_confident_ratio(model, probe, seed=0) == 0.0
    theta = ParamVector.from_module(model)
    theta.as_params()["linear.bias"].copy_(torch.tensor([100.0, 0.0], dtype=DTYPE))
    assert noise_confident_ratio(model, probe, seed=0, theta=theta) == 1.0
    assert noise_confident_ratio(model, probe, seed=0) == 0.0


def test_noise_ratio_is_deterministic():
    model = build_model("convnet", (8, 8, 1), 2, width=2, hidden=4, generator=make_generator(3))
    probe = NoiseProbe(sample_count=20, confidence_threshold=0.5)
    first = noise_confident_ratio(model, probe, seed=5)
    assert first == noise_confident_ratio(model, probe, seed=5)
    assert 0.0 <= first <= 1.0


def test_uap_config_validation():
    with pytest.raises(ValueError):
        UAPConfig(strengths=(0.1, 0.05))
    with pytest.raises(ValueError):
        UAPConfig(strengths=(-0.1,))
    with pytest.raises(ValueError):
        UAPConfig(step_size=0.0)


def test_targeted_uap_curve():
    model = _identity_model()
    data = _onehot_data([0, 1, 2, 1, 2, 0])
    cfg = UAPConfig(target_class=0, strengths=(0.0, 0.3, 0.6), steps=50, step_size=0.05)
    curve = targeted_uap_curve(model, data, cfg)
    assert [point.strength for point in curve] == [0.0, 0.3, 0.6]
    assert [point.asr for point in curve] == [0.0, 0.0, 1.0]


def test_uap_curve_is_monotone():
    gen = make_generator(8)
    model = build_model("mlp", (4,), 3, hidden=6, generator=gen)
    inputs = torch.rand((30, 4), generator=gen, dtype=DTYPE)
    labels = torch.arange(30) % 3
    cfg = UAPConfig(target_class=1, strengths=(0.0, 0.05, 0.1, 0.2, 0.4), steps=10)
    curve = targeted_uap_curve(model, LabeledDataset(inputs, labels, 3), cfg)
    asrs = [point.asr for point in curve]
    assert asrs == sorted(asrs)


def test_uap_errors():
    model = _identity_model()
    cfg = UAPConfig(target_class=0, strengths=(0.1,), steps=2)
    with pytest.raises(ValueError):
        targeted_uap_curve(model, _onehot_data([0, 0]), cfg)
    with pytest.raises(ValueError):
        targeted_uap_curve(model, _onehot_data([0]).subset([]), cfg)


def test_write_uap_csv():
    output = io.StringIO()
    write_uap_csv([UAPPoint(0.0, 0.0), UAPPoint(0.1, 0.5)], output)
    assert output.getvalue() == "strength,asr\n0.0,0.0\n0.1,0.5\n"


def test_mitigation_config():
    with pytest.raises(ValueError):
        MitigationConfig(clean_samples=0)
    with pytest.raises(ValueError):
        MitigationConfig(steps=-1)
    with pytest.raises(ValueError):
        MitigationConfig(beta=-0.5)
    opt = MitigationConfig(steps=30, block=5).optimizer()
    assert opt.max_iterations == 30
    assert opt.eval_interval == 5


def test_finetune_without_steps():
    data, student, _ = _mitigation_setup()
    cfg = MitigationConfig(clean_samples=20, steps=0)
    result = finetune_mitigate(student, data, cfg, monitor=_constant_monitor)
    assert result.theta.equal(ParamVector.from_module(student))
    assert result.trajectory == [(0, 0.0, 1.0)]


def test_finetune_trajectory():
    data, student, _ = _mitigation_setup()
    cfg = MitigationConfig(clean_samples=40, steps=20, learning_rate=0.05, batch_size=8, block=5)
    result = finetune_mitigate(student, data, cfg, seed=1, monitor=_constant_monitor)
    assert result.method == "finetune"
    assert [row[0] for row in result.trajectory] == [0, 5, 10, 15, 20]
    assert not result.theta.equal(ParamVector.from_module(student))
    output = io.StringIO()
    result.write_csv(output)
    lines = output.getvalue().splitlines()
    assert lines[0] == "step,asr,acc"
    assert lines[1] == "0,0.0,1.0"
    assert len(lines) == 6


def test_finetune_data_errors():
    data, student, _ = _mitigation_setup()
    with pytest.raises(ValueError):
        finetune_mitigate(student, data, MitigationConfig(clean_samples=100))
    poisoned = poison(data, 0.5, TriggerSpec(TOKEN, 0, token=2, count=1.0), seed=0)
    with pytest.raises(DataRoleError):
        finetune_mitigate(student, poisoned, MitigationConfig(clean_samples=10))


def test_nad_without_distillation_is_finetuning():
    data, student, teacher = _mitigation_setup()
    cfg = MitigationConfig(clean_samples=40, steps=10, learning_rate=0.05, batch_size=8,
                           beta=0.0)
    nad = nad_mitigate(student, teacher, data, cfg, seed=2)
    plain = finetune_mitigate(student, data, cfg, seed=2)
    assert nad.method == NAD_LITE
    assert nad.theta.equal(plain.theta)


def test_nad_distillation_changes_result():
    data, student, teacher = _mitigation_setup()
    cfg = MitigationConfig(clean_samples=40, steps=10, learning_rate=0.05, batch_size=8,
                           beta=5.0, block=5)
    nad = nad_mitigate(student, teacher, data, cfg, seed=2, monitor=_constant_monitor)
    plain = finetune_mitigate(student, data, cfg, seed=2)
    assert not nad.diverged
    nad.theta.check_finite()
    assert not nad.theta.equal(plain.theta)
    assert [row[0] for row in nad.trajectory] == [0, 5, 10]


def test_nad_architecture_mismatch():
    data, student, _ = _mitigation_setup()
    other = build_model("mlp", (3,), 2, hidden=5, generator=make_generator(2))
    with pytest.raises(ShapeError):
        nad_mitigate(student, other, data, MitigationConfig(clean_samples=10))
    linear = build_model("linear", (3,), 2)
    with pytest.raises(ShapeError):
        nad_mitigate(student, linear, data, MitigationConfig(clean_samples=10))
