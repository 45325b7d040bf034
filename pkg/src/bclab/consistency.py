#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Evaluation suite: global consistency, attack success rate, instance-wise
consistency between the clean and the backdoored model and the size of the
weight perturbation.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Optional, TextIO

import torch

from bclab.common import DTYPE, ShapeError, make_generator
from bclab.diffcore import ParamVector
from bclab.models import TappedModel, predict_logits
from bclab.poison import LabeledDataset, TriggerSpec, trigger_eval_set

logger = logging.getLogger(__name__)

# Column order of the CSV serialization
CSV_COLUMNS = ("asr", "top1", "top5", "asr_plus_acc", "logit_dis", "p_dis", "kl_div", "mkl",
               "pearson", "l2", "linf", "awp")

DEFAULT_AWP_THRESHOLD = 5.0

_CHUNK = 1024


@dataclass(frozen=True)
class MetricsReport:
    """All metrics of one backdoored model.

    ``top5`` is None when the task has at most 5 classes. ``pearson_degenerate``
    is set when one of the correctness indicator vectors has zero variance and
    ``pearson`` holds the sentinel value.
    """
    asr: float
    top1: float
    top5: Optional[float] = None
    logit_dis: float = 0.0
    p_dis: float = 0.0
    kl_div: float = 0.0
    mkl: float = 0.0
    pearson: float = 1.0
    l2: float = 0.0
    linf: float = 0.0
    awp: bool = True
    pearson_degenerate: bool = False

    @property
    def asr_plus_acc(self) -> float:
        """Selection score ASR + top-1 accuracy"""
        return self.asr + self.top1


    def to_dict(self) -> Dict[str, object]:
        """Metrics in CSV column order (plus the degeneracy flag)."""
        data = asdict(self)
        result = {col: (self.asr_plus_acc if col == "asr_plus_acc" else data[col])
                  for col in CSV_COLUMNS}
        result["pearson_degenerate"] = self.pearson_degenerate
        return result


    def to_row(self) -> list:
        """CSV row in the order of CSV_COLUMNS."""
        row = []
        for value in list(self.to_dict().values())[:len(CSV_COLUMNS)]:
            if value is None:
                row.append("")
            elif isinstance(value, bool):
                row.append("Y" if value else "N")
            else:
                row.append(repr(float(value)))
        return row


    def to_json(self) -> str:
        """JSON object mirroring the CSV row."""
        return json.dumps(self.to_dict(), indent=2)


    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "MetricsReport":
        """Inverse of :meth:`to_dict` (asr_plus_acc is recomputed)."""
        names = {fld.name for fld in fields(cls)}
        return cls(**{key: val for key, val in data.items() if key in names})


def write_csv(reports: Iterable[MetricsReport], fobj: TextIO, prefix: Optional[dict] = None):
    """Writes reports as CSV rows, optionally preceded by fixed key columns.

    Args:
        reports: Reports to write, one row each.
        fobj: Text file object.
        prefix: Leading columns (name -> list of values, one per report).
    """
    prefix = prefix or {}
    writer = csv.writer(fobj, lineterminator="\n")
    writer.writerow(list(prefix) + list(CSV_COLUMNS))
    for ind, report in enumerate(reports):
        writer.writerow([values[ind] for values in prefix.values()] + report.to_row())


def _logits(model: TappedModel, inputs: torch.Tensor,
            theta: Optional[ParamVector]) -> torch.Tensor:
    with torch.no_grad():
        parts = [predict_logits(model, inputs[start:start + _CHUNK], theta)
                 for start in range(0, inputs.shape[0], _CHUNK)]
    return torch.cat(parts)


def topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean per instance: true label among the k largest logits.

    Ties are broken in favor of the lower class index, so a label ranks ahead
    of another class with the same logit if its index is lower.
    """
    classes = logits.shape[-1]
    if not 1 <= k <= classes:
        raise ValueError(f"k={k} outside of [1, {classes}]")
    own = torch.gather(logits, 1, labels.unsqueeze(1))
    index = torch.arange(classes).unsqueeze(0)
    ahead = (logits > own) | ((logits == own) & (index < labels.unsqueeze(1)))
    return ahead.sum(dim=1) < k


def topk_accuracy(model: TappedModel, data: LabeledDataset, k: int,
                  theta: Optional[ParamVector] = None) -> float:
    """Fraction of instances whose label is among the k largest logits."""
    if not len(data):
        raise ValueError("Accuracy of an empty dataset")
    if k > data.classes:
        raise ValueError(f"k={k} exceeds the number of classes {data.classes}")
    correct = topk_correct(_logits(model, data.inputs, theta), data.labels, k)
    return float(correct.to(DTYPE).mean())


def attack_success_rate(model: TappedModel, data: LabeledDataset, spec: TriggerSpec,
                        theta: Optional[ParamVector] = None) -> float:
    """Fraction of triggered non-target test instances predicted as the target class."""
    triggered = trigger_eval_set(data, spec)
    logits = _logits(model, triggered.inputs, theta)
    return float((torch.argmax(logits, dim=1) == spec.target_class).to(DTYPE).mean())


@dataclass(frozen=True)
class InstanceMetrics:
    """Instance-wise consistency between a backdoored and a clean model."""
    logit_dis: float
    p_dis: float
    kl_div: float
    mkl: float
    pearson: float
    pearson_degenerate: bool = False


def instance_metrics_from_logits(s_star: torch.Tensor, s_clean: torch.Tensor,
                                 labels: torch.Tensor) -> InstanceMetrics:
    """Instance-wise metrics from precomputed logits of the two models."""
    if s_star.shape != s_clean.shape:
        raise ShapeError("Logits of the two models differ in shape")
    if not s_star.shape[0]:
        raise ValueError("Instance metrics of an empty dataset")
    diff = s_star - s_clean
    logit_dis = (diff * diff).sum(dim=1).mean()
    logp_star = torch.log_softmax(s_star, dim=1)
    logp = torch.log_softmax(s_clean, dim=1)
    p_star, prob = logp_star.exp(), logp.exp()
    p_dis = ((p_star - prob) ** 2).sum(dim=1).mean()
    kl_forward = (prob * (logp - logp_star)).sum(dim=1)
    kl_backward = (p_star * (logp_star - logp)).sum(dim=1)
    kl_div = kl_forward.mean()
    mkl = (0.5 * (kl_forward + kl_backward)).mean()
    pearson, degenerate = _pearson(torch.argmax(s_star, dim=1) == labels,
                                   torch.argmax(s_clean, dim=1) == labels)
    return InstanceMetrics(float(logit_dis), float(p_dis), max(float(kl_div), 0.0),
                           max(float(mkl), 0.0), pearson, degenerate)


def _pearson(first: torch.Tensor, second: torch.Tensor):
    first, second = first.to(DTYPE), second.to(DTYPE)
    if float(first.std(unbiased=False)) == 0.0 or float(second.std(unbiased=False)) == 0.0:
        identical = bool(torch.equal(first, second))
        logger.warning("Zero variance correctness indicators, Pearson reported as %.1f",
                       1.0 if identical else 0.0)
        return (1.0 if identical else 0.0), True
    corr = torch.corrcoef(torch.stack([first, second]))[0, 1]
    return min(max(float(corr), -1.0), 1.0), False


def instance_report(model_star: TappedModel, model_clean: TappedModel, data: LabeledDataset,
                    theta_star: Optional[ParamVector] = None,
                    theta_clean: Optional[ParamVector] = None) -> InstanceMetrics:
    """Logit and probability distances, KL, mean KL and Pearson correlation on D.

    Args:
        model_star: Backdoored model.
        model_clean: Clean model.
        data: Evaluation dataset.
        theta_star: Backdoored parameters (model_star's own ones if None).
        theta_clean: Clean parameters (model_clean's own ones if None).
    """
    if not len(data):
        raise ValueError("Instance metrics of an empty dataset")
    if tuple(model_star.input_shape) != tuple(model_clean.input_shape):
        raise ShapeError("The two models expect different inputs")
    return instance_metrics_from_logits(_logits(model_star, data.inputs, theta_star),
                                        _logits(model_clean, data.inputs, theta_clean),
                                        data.labels)


def perturbation_norms(theta_star: ParamVector, theta_clean: ParamVector,
                       awp_threshold: float = DEFAULT_AWP_THRESHOLD) -> Dict[str, object]:
    """L2 and L-infinity norm of delta = theta* - theta and the AWP flag (l2 <= threshold)."""
    delta = theta_star - theta_clean
    l2 = float(delta.norm(2))
    linf = float(delta.norm(math.inf)) if len(delta) else 0.0
    return {"l2": l2, "linf": linf, "awp": l2 <= awp_threshold}


class Evaluator:
    """Evaluates backdoored parameters against the clean model on a test split.

    Callable on a ParamVector, so it serves as the monitor of the training loop.

    Args:
        model: Model (its architecture is shared by the clean and the backdoored model).
        theta_clean: Clean parameters.
        test: Clean test split.
        trigger: Trigger specification.
        awp_threshold: L2 threshold of the AWP flag.
        subsample: Evaluate on a fixed random subset of this size, if given.
        seed: Seed of the subset selection.
    """

    def __init__(self, model: TappedModel, theta_clean: ParamVector, test: LabeledDataset,
                 trigger: TriggerSpec, awp_threshold: float = DEFAULT_AWP_THRESHOLD,
                 subsample: Optional[int] = None, seed: int = 0):
        if subsample is not None and subsample < len(test):
            gen = make_generator(seed, "monitor")
            index = torch.sort(torch.randperm(len(test), generator=gen)[:subsample]).values
            test = test.subset(index)
        self.model = model
        self.theta_clean = theta_clean.clone()
        self.test = test
        self.trigger = trigger
        self.awp_threshold = awp_threshold
        self.clean_logits = _logits(model, test.inputs, self.theta_clean)
        self._triggered = trigger_eval_set(test, trigger)


    def logits(self, theta: ParamVector) -> torch.Tensor:
        """Logits of the given parameters on the test split."""
        return _logits(self.model, self.test.inputs, theta)


    def __call__(self, theta: ParamVector) -> MetricsReport:
        logits = self.logits(theta)
        labels = self.test.labels
        top1 = float(topk_correct(logits, labels, 1).to(DTYPE).mean())
        top5 = None
        if self.test.classes > 5:
            top5 = float(topk_correct(logits, labels, 5).to(DTYPE).mean())
        trig_logits = _logits(self.model, self._triggered.inputs, theta)
        asr = float((torch.argmax(trig_logits, dim=1) == self.trigger.target_class)
                    .to(DTYPE).mean())
        inst = instance_metrics_from_logits(logits, self.clean_logits, labels)
        norms = perturbation_norms(theta, self.theta_clean, self.awp_threshold)
        return MetricsReport(asr=asr, top1=top1, top5=top5, logit_dis=inst.logit_dis,
                             p_dis=inst.p_dis, kl_div=inst.kl_div, mkl=inst.mkl,
                             pearson=inst.pearson, l2=norms["l2"], linf=norms["linf"],
                             awp=norms["awp"], pearson_degenerate=inst.pearson_degenerate)


    def write_logits(self, theta: ParamVector, fobj: TextIO):
        """Writes per-instance logit pairs (instance, class, clean_logit, backdoored_logit)."""
        star = self.logits(theta)
        writer = csv.writer(fobj, lineterminator="\n")
        writer.writerow(["instance", "class", "clean_logit", "backdoored_logit"])
        for inst in range(star.shape[0]):
            for cls in range(star.shape[1]):
                writer.writerow([inst, cls, repr(float(self.clean_logits[inst, cls])),
                                 repr(float(star[inst, cls]))])
