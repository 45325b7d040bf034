#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Detection and mitigation probes.

Detection: the ratio of confidently classified Gaussian noise images and the
success curve of a targeted universal adversarial perturbation. Mitigation:
plain fine-tuning on clean data and NAD-lite, a distillation against the
hidden states of a clean teacher standing in for neural attention
distillation.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, TextIO, Tuple

import torch

from bclab.common import DTYPE, ShapeError, make_generator
from bclab.consistency import MetricsReport
from bclab.diffcore import OptimizerConfig, ParamVector, grad
from bclab.models import HiddenStateSet, TappedModel, functional_call_taps, predict_logits, softmax
from bclab.objectives import GROUP_AVE, AnchorContext, BackdoorObjective, ObjectiveSpec,\
    cross_entropy, hidden_anchor_term, hidden_taps
from bclab.poison import CLEAN, LabeledDataset, mix, take
from bclab.training import Monitor, train

logger = logging.getLogger(__name__)

NAD_LITE = "NAD-lite"


@dataclass(frozen=True)
class NoiseProbe:
    """Gaussian noise detection probe.

    Args:
        sample_count: Number of noise inputs.
        sigma: Noise standard deviation around 0.5 (raw input units).
        confidence_threshold: Softmax probability counting as confident.
    """
    sample_count: int = 1000
    sigma: float = 0.25
    confidence_threshold: float = 0.95

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("Noise probe needs at least one sample")
        if not self.sigma > 0.0:
            raise ValueError("Noise standard deviation must be positive")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("Confidence threshold must be in (0, 1)")


def noise_confident_ratio(model: TappedModel, probe: NoiseProbe, seed: int,
                          theta: Optional[ParamVector] = None) -> float:
    """Fraction of N(0.5, sigma^2) noise inputs (clipped to [0, 1]) classified confidently."""
    gen = make_generator(seed, "probe")
    noise = torch.randn((probe.sample_count,) + tuple(model.input_shape), generator=gen,
                        dtype=DTYPE)
    inputs = torch.clamp(0.5 + probe.sigma * noise, 0.0, 1.0)
    with torch.no_grad():
        prob = softmax(predict_logits(model, inputs, theta))
    return float((prob.max(dim=1).values > probe.confidence_threshold).to(DTYPE).mean())


@dataclass(frozen=True)
class UAPConfig:
    """Targeted universal adversarial perturbation search.

    Args:
        target_class: Class the perturbation should push inputs to.
        strengths: Ascending L-infinity budgets (raw input units).
        steps: Projected gradient steps per budget.
        step_size: Signed gradient step size.
        clip: Keep perturbed inputs inside [0, 1].
    """
    target_class: int = 0
    strengths: Tuple[float, ...] = (0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3)
    steps: int = 50
    step_size: float = 0.01
    clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strengths", tuple(float(val) for val in self.strengths))
        if any(val < 0.0 for val in self.strengths):
            raise ValueError("UAP strengths must be non-negative")
        if any(nxt < prev for prev, nxt in zip(self.strengths[:-1], self.strengths[1:])):
            raise ValueError("UAP strengths must be ascending")
        if not self.step_size > 0.0:
            raise ValueError("UAP step size must be positive")


@dataclass(frozen=True)
class UAPPoint:
    """Success rate of the best perturbation found within a budget."""
    strength: float
    asr: float


def targeted_uap_curve(model: TappedModel, data: LabeledDataset, cfg: UAPConfig,
                       theta: Optional[ParamVector] = None) -> List[UAPPoint]:
    """Success rate of a targeted universal perturbation for growing budgets.

    A single perturbation v is optimized by signed gradient ascent on the mean
    target log-probability over D, projected onto ||v||_inf <= strength after
    every step. The search for a budget starts from the best perturbation of
    the previous budget, and the best perturbation so far is kept, so the
    curve is non-decreasing. The success rate is measured on the instances
    whose label is not the target.
    """
    if not len(data):
        raise ValueError("UAP search on an empty dataset")
    inputs = data.inputs
    victims = inputs[data.labels != cfg.target_class]
    if not victims.shape[0]:
        raise ValueError("No non-target instance to attack")
    target = torch.full((inputs.shape[0],), cfg.target_class, dtype=torch.int64)

    def perturb(xx, vv):
        return torch.clamp(xx + vv, 0.0, 1.0) if cfg.clip else xx + vv

    def success(vv):
        with torch.no_grad():
            logits = predict_logits(model, perturb(victims, vv), theta)
        return float((torch.argmax(logits, dim=1) == cfg.target_class).to(DTYPE).mean())

    best = torch.zeros(inputs.shape[1:], dtype=DTYPE)
    best_asr = success(best)
    curve = []
    for strength in cfg.strengths:
        vv = best.clone()
        for _ in range(cfg.steps if strength > 0.0 else 0):
            pert = ParamVector(vv.reshape(-1))

            def objective(pvec):
                xx = perturb(inputs, pvec.values.reshape(inputs.shape[1:]))
                return cross_entropy(predict_logits(model, xx, theta), target).mean()

            gvec = grad(objective, pert).values.reshape(inputs.shape[1:])
            vv = torch.clamp(vv - cfg.step_size * torch.sign(gvec), -strength, strength)
            asr = success(vv)
            if asr > best_asr:
                best, best_asr = vv.clone(), asr
        curve.append(UAPPoint(strength, best_asr))
        logger.debug("UAP strength %.4g: asr %.4f", strength, best_asr)
    return curve


def write_uap_csv(curve: Sequence[UAPPoint], fobj: TextIO):
    """Writes a UAP curve as CSV (strength, asr)."""
    writer = csv.writer(fobj, lineterminator="\n")
    writer.writerow(["strength", "asr"])
    for point in curve:
        writer.writerow([repr(point.strength), repr(point.asr)])


@dataclass(frozen=True)
class MitigationConfig:
    """Clean-data mitigation.

    Args:
        clean_samples: Size of the clean subset used for mitigation.
        steps: SGD iterations.
        learning_rate: Step size.
        batch_size: Instances per step.
        momentum: Momentum factor.
        beta: Weight of the hidden-state distillation term (NAD-lite).
        block: Steps between two evaluations.
    """
    clean_samples: int = 2000
    steps: int = 400
    learning_rate: float = 0.005
    batch_size: int = 128
    momentum: float = 0.9
    beta: float = 0.5
    block: int = 20

    def __post_init__(self):
        if self.clean_samples < 1:
            raise ValueError("Mitigation needs clean samples")
        if self.steps < 0:
            raise ValueError("Number of mitigation steps must not be negative")
        if not self.beta >= 0.0:
            raise ValueError("Distillation weight beta must be non-negative")


    def optimizer(self) -> OptimizerConfig:
        """SGD configuration of the mitigation loop."""
        return OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                               momentum=self.momentum, max_iterations=self.steps,
                               eval_interval=self.block)


@dataclass
class MitigationResult:
    """Mitigated parameters and the (step, asr, acc) trajectory."""
    theta: ParamVector
    method: str
    trajectory: List[Tuple[int, float, float]] = field(default_factory=list)
    diverged: bool = False

    def write_csv(self, fobj: TextIO):
        """Writes the trajectory as CSV (step, asr, acc)."""
        writer = csv.writer(fobj, lineterminator="\n")
        writer.writerow(["step", "asr", "acc"])
        for step, asr, acc in self.trajectory:
            writer.writerow([step, repr(asr), repr(acc)])


def _trajectory(reports: Sequence[MetricsReport], block: int, steps: int):
    rows = []
    for ind, report in enumerate(reports):
        rows.append((min(ind * block, steps), report.asr, report.top1))
    return rows


def _subset(data: LabeledDataset, cfg: MitigationConfig, seed: int) -> LabeledDataset:
    data.require_role(CLEAN)
    if cfg.clean_samples > len(data):
        raise ValueError(f"{cfg.clean_samples} clean samples requested, only {len(data)} available")
    return take(data, cfg.clean_samples, seed)


def finetune_mitigate(model: TappedModel, data: LabeledDataset, cfg: MitigationConfig,
                      seed: int = 0, theta: Optional[ParamVector] = None,
                      monitor: Optional[Monitor] = None) -> MitigationResult:
    """Fine-tunes on clean cross entropy only.

    Args:
        model: Backdoored model.
        data: Clean data (role "clean"), cfg.clean_samples are drawn from it.
        cfg: Mitigation configuration.
        seed: Seed of the subset selection and the batch order.
        theta: Parameters to start from (the model's own ones if None).
        monitor: Evaluator reporting ASR and accuracy every cfg.block steps.
    """
    subset = _subset(data, cfg, seed)
    theta = ParamVector.from_module(model) if theta is None else theta.clone()
    if cfg.steps == 0:
        reports = [monitor(theta)] if monitor is not None else []
        return MitigationResult(theta, "finetune", _trajectory(reports, cfg.block, 0))
    result = train(model, ObjectiveSpec("plain"), subset, cfg.optimizer(), seed, theta0=theta,
                   monitor=monitor)
    return MitigationResult(result.final, "finetune",
                            _trajectory(result.reports, cfg.block, result.steps), result.diverged)


class DistillationObjective(BackdoorObjective):
    """Clean cross entropy plus beta times the GroupAve hidden-state distance to a teacher."""

    def __init__(self, model: TappedModel, theta_start: ParamVector, context: AnchorContext,
                 beta: float):
        super().__init__(ObjectiveSpec("plain"), model, theta_start)
        self.context = context
        self.beta = beta
        self._reference = hidden_taps(context.hidden)


    def batch_loss(self, theta, inputs, labels, clean_index):
        names, states = zip(*functional_call_taps(self.model, theta, inputs))
        train_loss = cross_entropy(states[-1], labels).mean()
        current = hidden_taps(HiddenStateSet(tuple(names), tuple(states)))
        distill = hidden_anchor_term(current, self._reference.select(clean_index), GROUP_AVE)
        return train_loss + self.beta * distill.mean()


def nad_mitigate(student: TappedModel, teacher: TappedModel, data: LabeledDataset,
                 cfg: MitigationConfig, seed: int = 0, theta: Optional[ParamVector] = None,
                 theta_teacher: Optional[ParamVector] = None,
                 monitor: Optional[Monitor] = None) -> MitigationResult:
    """NAD-lite: fine-tuning with hidden-state distillation against a clean teacher.

    The teacher must share the student's architecture. With beta = 0 this is
    exactly :func:`finetune_mitigate`.
    """
    same_input = tuple(student.input_shape) == tuple(teacher.input_shape)
    if type(student) is not type(teacher) or not same_input:
        raise ShapeError("Student and teacher differ in architecture")
    theta = ParamVector.from_module(student) if theta is None else theta.clone()
    theta_teacher = ParamVector.from_module(teacher) if theta_teacher is None else theta_teacher
    if theta_teacher.layout != theta.layout:
        raise ShapeError("Student and teacher differ in architecture")
    if cfg.beta == 0.0 or cfg.steps == 0:
        result = finetune_mitigate(student, data, cfg, seed, theta, monitor)
        result.method = NAD_LITE
        return result
    subset = _subset(data, cfg, seed)
    context = AnchorContext.from_model(teacher, subset.inputs, cfg.beta, theta=theta_teacher,
                                       with_hidden=True)
    objective = DistillationObjective(student, theta, context, cfg.beta)
    result = train(student, objective, mix(subset), cfg.optimizer(), seed, theta0=theta,
                   monitor=monitor)
    return MitigationResult(result.final, NAD_LITE,
                            _trajectory(result.reports, cfg.block, result.steps), result.diverged)
