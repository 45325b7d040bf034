#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Deterministic mini-batch SGD training loop.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import torch
from tqdm import tqdm

from bclab.common import DivergenceError, NonFiniteError, make_generator
from bclab.consistency import MetricsReport
from bclab.diffcore import MomentumState, OptimizerConfig, ParamVector, sgd_step
from bclab.models import TappedModel
from bclab.objectives import BackdoorObjective, ObjectiveSpec
from bclab.poison import CLEAN, LabeledDataset, MixedDataset, mix

logger = logging.getLogger(__name__)

Monitor = Callable[[ParamVector], MetricsReport]


@dataclass
class TrainResult:
    """Outcome of a training run.

    Attributes:
        final: Parameters after the last step (last finite ones on divergence).
        best: Parameters of the evaluation with maximal ASR + ACC (earliest on
            ties); equals ``final`` without a monitor.
        best_epoch: Epoch of ``best`` (0 is the starting point).
        trajectory: Parameters at the end of every epoch, starting point first.
        reports: Monitor reports, aligned with ``trajectory`` (empty without monitor).
        losses: Mean batch objective of every epoch.
        steps: Number of SGD steps taken.
        diverged: Whether training aborted on a non-finite value.
        stopped_early: Whether the early stopping rule ended training.
    """
    final: ParamVector
    best: ParamVector
    best_epoch: int = 0
    trajectory: List[ParamVector] = field(default_factory=list)
    reports: List[MetricsReport] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    steps: int = 0
    diverged: bool = False
    stopped_early: bool = False

    @property
    def best_report(self) -> Optional[MetricsReport]:
        """Monitor report of the best checkpoint"""
        return self.reports[self.best_epoch] if self.reports else None


def _metric(report: MetricsReport, name: str) -> float:
    value = getattr(report, name, None)
    if value is None:
        raise ValueError(f"Unknown monitor metric '{name}'")
    return float(value)


def train(model: TappedModel, objective: Union[BackdoorObjective, ObjectiveSpec],
          data: Union[MixedDataset, LabeledDataset], cfg: OptimizerConfig, seed: int,
          theta0: Optional[ParamVector] = None, monitor: Optional[Monitor] = None,
          raise_on_divergence: bool = False, progress: bool = False) -> TrainResult:
    """Trains a model with mini-batch SGD on an objective.

    Every epoch shuffles the training data with a generator derived from the
    seed. An epoch lasts ``cfg.eval_interval`` steps or one pass over the data.
    The monitor is evaluated at the starting point and after every epoch; the
    checkpoint with the highest ASR + ACC is kept.

    Args:
        model: Model to train. Its own parameters are not modified.
        objective: Prepared objective or an objective specification (prepared
            against the starting point and the clean part of ``data``).
        data: Training set D u D* (or a clean labeled dataset).
        cfg: Optimizer configuration.
        seed: Seed of the batch order.
        theta0: Starting point (the model's parameters if None).
        monitor: Evaluation callback returning a MetricsReport.
        raise_on_divergence: Raise DivergenceError instead of returning a
            result flagged as diverged.
        progress: Show a progress bar.

    Returns:
        The training result.
    """
    if isinstance(data, LabeledDataset):
        data = mix(data) if data.role == CLEAN else _poisoned_only(data)
    if not len(data):
        raise ValueError("Can not train on an empty dataset")
    theta = ParamVector.from_module(model) if theta0 is None else theta0.clone()
    if isinstance(objective, ObjectiveSpec):
        clean = _clean_part(data)
        objective = BackdoorObjective.prepare(objective, model, theta, clean)

    count = len(data)
    epoch_steps = cfg.eval_interval or math.ceil(count / cfg.batch_size)
    gen = make_generator(seed, "batching")
    order = torch.randperm(count, generator=gen)
    cursor = 0

    result = TrainResult(final=theta, best=theta, trajectory=[theta])
    best_score = -math.inf
    since_best = 0
    if monitor is not None:
        report = monitor(theta)
        result.reports.append(report)
        best_score = report.asr_plus_acc
    stop_metric = None
    if cfg.early_stop is not None and monitor is not None:
        stop_metric = _metric(result.reports[0], cfg.early_stop.monitor)

    state = MomentumState()
    epoch, epoch_loss, epoch_batches = 0, 0.0, 0
    bar = tqdm(total=cfg.max_iterations, disable=not progress, leave=False, desc="train")
    try:
        for step in range(cfg.max_iterations):
            if cursor + cfg.batch_size > count:
                order = torch.randperm(count, generator=gen)
                cursor = 0
            index = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = (data.inputs[index], data.labels[index], data.clean_index[index])
            try:
                loss, gvec = objective.value_and_gradient(theta, batch)
                lr = cfg.learning_rate_at(epoch)
                new_theta, state = sgd_step(theta, gvec, state, cfg, learning_rate=lr)
                new_theta = objective.project(new_theta)
                new_theta.check_finite()
            except NonFiniteError as exc:
                msg = f"Training diverged at step {step + 1}: {exc}"
                logger.warning(msg)
                result.diverged = True
                if raise_on_divergence:
                    raise DivergenceError(msg, checkpoint=theta) from exc
                break
            theta = new_theta
            result.steps = step + 1
            bar.update(1)
            logger.debug("step %d: batch objective %.6g", step + 1, loss)
            epoch_loss += loss
            epoch_batches += 1

            last = step + 1 == cfg.max_iterations
            if (step + 1) % epoch_steps and not last:
                continue
            epoch += 1
            result.trajectory.append(theta)
            result.losses.append(epoch_loss / epoch_batches if epoch_batches else math.nan)
            epoch_loss, epoch_batches = 0.0, 0
            if monitor is None:
                continue
            report = monitor(theta)
            result.reports.append(report)
            logger.info("epoch %d: asr %.4f top1 %.4f l2 %.4g", epoch, report.asr, report.top1,
                        report.l2)
            if report.asr_plus_acc > best_score:
                best_score = report.asr_plus_acc
                result.best = theta
                result.best_epoch = epoch
            if stop_metric is not None:
                value = _metric(report, cfg.early_stop.monitor)
                if value > stop_metric:
                    stop_metric = value
                    since_best = 0
                else:
                    since_best += 1
                if since_best >= cfg.early_stop.patience:
                    logger.info("Early stopping after epoch %d (no improvement of %s for %d "
                                "evaluations)", epoch, cfg.early_stop.monitor, since_best)
                    result.stopped_early = True
                    break
    finally:
        bar.close()

    result.final = theta
    if monitor is None:
        result.best = theta
        result.best_epoch = len(result.trajectory) - 1
    return result


def _clean_part(data: MixedDataset) -> LabeledDataset:
    mask = data.clean_index >= 0
    index = data.clean_index[mask]
    size = int(index.max()) + 1 if index.numel() else 0
    inputs = torch.zeros((size,) + tuple(data.inputs.shape[1:]), dtype=data.inputs.dtype)
    labels = torch.zeros(size, dtype=torch.int64)
    inputs[index] = data.inputs[mask]
    labels[index] = data.labels[mask]
    return LabeledDataset(inputs, labels, data.classes)


def _poisoned_only(data: LabeledDataset) -> MixedDataset:
    return MixedDataset(data.inputs, data.labels,
                        torch.full((len(data),), -1, dtype=torch.int64), data.classes)
