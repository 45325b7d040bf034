#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Training objectives for backdoor injection.

The penalty terms (:func:`anchor_loss`, :func:`l2_term`, :func:`ewc_term`,
:func:`surgery_l1_term`, :func:`hidden_anchor_term`, :func:`kd_term`) return the
bare penalty. They are combined with the training loss on D u D* through
:func:`total_loss`, which applies the weights 1/(1+lambda) and
lambda/(1+lambda).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

from bclab.common import DTYPE, ConfigError, ShapeError
from bclab.diffcore import GradVector, ParamVector, grad, value_and_grad
from bclab.models import HiddenStateSet, TappedModel, functional_call_taps, hidden_states,\
    predict_logits
from bclab.poison import LabeledDataset, MixedDataset

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("plain", "anchor", "l2", "pgd", "ewc", "surgery_l1", "hidden_anchor", "kd")

ALL_AVE = "AllAve"
GROUP_AVE = "GroupAve"
HIDDEN_MODES = (ALL_AVE, GROUP_AVE)

# Objectives combining the training loss with a penalty through total_loss()
_PENALIZED = ("anchor", "l2", "ewc", "surgery_l1", "hidden_anchor", "kd")


@dataclass(frozen=True)
class PGDSpec:
    """Ball constraint of the projected variant.

    Args:
        norm: 2 or math.inf.
        radius: Ball radius (positive).
    """
    norm: float = 2.0
    radius: float = 1.0

    def __post_init__(self):
        if self.norm not in (2, 2.0, math.inf):
            raise ConfigError(f"field 'objective.pgd.norm': must be 2 or inf, got {self.norm}")
        if not self.radius > 0.0:
            raise ConfigError("field 'objective.pgd.radius': must be positive")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Selects the backdoor objective.

    Args:
        kind: One of OBJECTIVE_KINDS.
        lam: Penalty strength lambda (non-negative).
        pgd: Ball constraint (kind "pgd" only).
        hidden_mode: "AllAve" or "GroupAve" (kind "hidden_anchor").
        gamma: Fisher smoothing weight (kind "ewc").
        teacher: Clean teacher model (kind "kd" only).
    """
    kind: str = "plain"
    lam: float = 0.0
    pgd: Optional[PGDSpec] = None
    hidden_mode: str = GROUP_AVE
    gamma: float = 0.9
    teacher: Optional[nn.Module] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            msg = f"field 'objective.kind': unknown objective '{self.kind}'"
            raise ConfigError(msg)
        if not self.lam >= 0.0:
            raise ConfigError("field 'objective.lambda': must be non-negative")
        if (self.kind == "pgd") != (self.pgd is not None):
            raise ConfigError("field 'objective.pgd': needed for and only allowed with kind pgd")
        if (self.kind == "kd") != (self.teacher is not None):
            raise ConfigError("field 'objective.teacher': needed for and only allowed with kind kd")
        if self.hidden_mode not in HIDDEN_MODES:
            raise ConfigError(f"field 'objective.hidden_mode': unknown mode '{self.hidden_mode}'")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("field 'objective.gamma': must be in [0, 1]")


    @property
    def penalized(self) -> bool:
        """Whether the objective adds a lambda-weighted penalty to the training loss"""
        return self.kind in _PENALIZED


@dataclass(frozen=True)
class AnchorContext:
    """Frozen anchoring targets of the clean dataset D.

    Args:
        logits: Clean logits s_i, shape (|D|, classes), row i belongs to instance i of D.
        lam: Anchoring strength.
        hidden: Clean hidden states per instance (hidden anchoring only).
    """
    logits: torch.Tensor
    lam: float
    hidden: Optional[HiddenStateSet] = None

    def __post_init__(self):
        object.__setattr__(self, "logits", self.logits.detach().clone())
        if self.hidden is not None:
            object.__setattr__(self, "hidden", self.hidden.detach())
        if not self.lam >= 0.0:
            raise ValueError("Anchoring strength must be non-negative")


    def __len__(self):
        return self.logits.shape[0]


    @classmethod
    def from_model(cls, model: TappedModel, inputs: torch.Tensor, lam: float,
                   theta: Optional[ParamVector] = None, with_hidden: bool = False,
                   batch_size: int = 512) -> "AnchorContext":
        """Precomputes the anchoring targets with a (clean or teacher) model.

        Args:
            model: The model producing the targets.
            inputs: Clean inputs in the order of D.
            lam: Anchoring strength.
            theta: Parameters to use instead of the model's own ones.
            with_hidden: Whether the hidden states should be stored, too.
            batch_size: Number of instances per forward pass.
        """
        logits, hidden = [], []
        with torch.no_grad():
            for start in range(0, inputs.shape[0], batch_size):
                chunk = inputs[start:start + batch_size]
                if with_hidden:
                    states = hidden_states(model, chunk, theta)
                    hidden.append(states)
                    logits.append(states.logits)
                else:
                    logits.append(predict_logits(model, chunk, theta))
        stacked = None
        if with_hidden:
            columns = zip(*[states.states for states in hidden])
            stacked = HiddenStateSet(hidden[0].names, tuple(torch.cat(parts) for parts in columns))
        return cls(torch.cat(logits), lam, stacked)


@dataclass(frozen=True)
class FisherDiag:
    """Diagonal Fisher information of the clean model.

    Args:
        raw: Mean squared per-instance gradient F.
        gamma: Smoothing weight, None before normalization.
        normalized: F' = gamma * F / sum(F) + (1 - gamma), None before normalization.
    """
    raw: torch.Tensor
    gamma: Optional[float] = None
    normalized: Optional[torch.Tensor] = None


def cross_entropy(s: torch.Tensor, y) -> torch.Tensor:
    """Cross entropy -log softmax(s)_y via log-sum-exp.

    Args:
        s: Logits, shape (classes,) or (batch, classes).
        y: Class id(s), scalar or shape (batch,).

    Returns:
        Scalar for a single instance, per-instance losses of shape (batch,) otherwise.
    """
    s = torch.as_tensor(s, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=torch.int64)
    classes = s.shape[-1]
    if bool((y >= classes).any()) or bool((y < 0).any()):
        raise ShapeError(f"Class id out of range for {classes} classes")
    picked = torch.gather(s, -1, y.unsqueeze(-1)).squeeze(-1)
    return torch.logsumexp(s, dim=-1) - picked


def _squared_distance(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    if first.shape != second.shape:
        raise ShapeError(f"Logits of shape {tuple(first.shape)} and {tuple(second.shape)}")
    diff = first - second
    return (diff * diff).sum(dim=-1)


def anchor_loss(s_star: torch.Tensor, s_clean: torch.Tensor) -> torch.Tensor:
    """Logit anchoring loss sum_i (s*_i - s_i)^2 (per instance when batched)."""
    return _squared_distance(torch.as_tensor(s_star, dtype=DTYPE),
                             torch.as_tensor(s_clean, dtype=DTYPE))


def kd_term(s_star: torch.Tensor, s_teacher: torch.Tensor) -> torch.Tensor:
    """Logit matching against a separate clean teacher, sum_i (s*_i - s'_i)^2."""
    return _squared_distance(torch.as_tensor(s_star, dtype=DTYPE),
                             torch.as_tensor(s_teacher, dtype=DTYPE))


def total_loss(train_loss, anchor, lam: float):
    """Convex combination 1/(1+lam) * train_loss + lam/(1+lam) * anchor."""
    if not lam >= 0.0:
        raise ValueError(f"Penalty strength {lam} is negative")
    if lam == 0.0:
        return train_loss
    return train_loss / (1.0 + lam) + (lam / (1.0 + lam)) * anchor


def _delta(theta_star: ParamVector, theta_clean: ParamVector) -> torch.Tensor:
    if theta_star.layout != theta_clean.layout:
        raise ShapeError(f"Layout mismatch: {theta_star.layout} vs {theta_clean.layout}")
    return theta_star.values - theta_clean.values


def l2_term(theta_star: ParamVector, theta_clean: ParamVector) -> torch.Tensor:
    """Squared Euclidean distance ||theta* - theta||^2."""
    delta = _delta(theta_star, theta_clean)
    return (delta * delta).sum()


def ewc_term(theta_star: ParamVector, theta_clean: ParamVector,
             fisher: FisherDiag) -> torch.Tensor:
    """Fisher weighted distance sum_i F'_i (theta*_i - theta_i)^2."""
    if fisher.normalized is None:
        raise ValueError("Fisher information must be normalized before use")
    delta = _delta(theta_star, theta_clean)
    if fisher.normalized.shape != delta.shape:
        raise ShapeError("Fisher information and parameters differ in length")
    return (fisher.normalized * (delta * delta)).sum()


def surgery_l1_term(theta_star: ParamVector, theta_clean: ParamVector) -> torch.Tensor:
    """L1 distance ||theta* - theta||_1."""
    return _delta(theta_star, theta_clean).abs().sum()


def project_delta(theta_star: ParamVector, theta_clean: ParamVector, p: float,
                  radius: float) -> ParamVector:
    """Projects theta* onto the p-norm ball of the given radius around theta.

    For p = 2 the perturbation is scaled radially, for p = inf it is clamped
    per coordinate. Perturbations inside the ball are returned unchanged.
    """
    if not radius > 0.0:
        raise ValueError("Projection radius must be positive")
    delta = _delta(theta_star, theta_clean)
    if p == math.inf:
        projected = torch.clamp(delta, -radius, radius)
    elif p == 2:
        norm = float(torch.linalg.vector_norm(delta))
        if norm <= radius:
            return theta_star
        projected = delta * (radius / norm)
    else:
        raise ValueError(f"Unsupported projection norm {p}")
    return ParamVector(theta_clean.values + projected, theta_clean.layout)


def fisher_diag(model: TappedModel, data: LabeledDataset,
                theta: Optional[ParamVector] = None) -> FisherDiag:
    """Mean squared per-instance cross entropy gradient of the clean model on D."""
    if not len(data):
        raise ValueError("Fisher information of an empty dataset")
    if theta is None:
        theta = ParamVector.from_module(model)
    total = torch.zeros(len(theta), dtype=DTYPE)
    for ind in range(len(data)):
        xx, yy = data.inputs[ind:ind + 1], data.labels[ind:ind + 1]

        def instance_loss(params, xx=xx, yy=yy):
            return cross_entropy(predict_logits(model, xx, params), yy).sum()

        gvec = grad(instance_loss, theta).values
        total += gvec * gvec
    return FisherDiag(total / len(data))


def normalize_fisher(fisher, gamma: float = 0.9) -> FisherDiag:
    """Smoothed normalization F'_i = gamma * F_i / sum(F) + (1 - gamma).

    Args:
        fisher: FisherDiag or raw Fisher vector.
        gamma: Smoothing weight in [0, 1].
    """
    raw = fisher.raw if isinstance(fisher, FisherDiag) else torch.as_tensor(fisher, dtype=DTYPE)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"Smoothing weight {gamma} outside of [0, 1]")
    if bool((raw < 0).any()):
        raise ValueError("Fisher information must be non-negative")
    fsum = float(raw.sum())
    if not fsum > 0.0:
        raise ValueError("Can not normalize a Fisher information with zero sum")
    return FisherDiag(raw, gamma, gamma * raw / fsum + (1.0 - gamma))


def hidden_anchor_term(h_star: HiddenStateSet, h_clean: HiddenStateSet,
                       mode: str = GROUP_AVE) -> torch.Tensor:
    """Hidden-state anchoring, per instance.

    AllAve divides the summed squared error of all taps by the total tap
    dimension. GroupAve averages the per-tap mean squared errors.
    """
    if h_star.names != h_clean.names or h_star.dims != h_clean.dims:
        raise ShapeError("Hidden state sets differ in structure")
    if not len(h_star):
        raise ShapeError("Empty hidden state set")
    errors = []
    for star, clean in zip(h_star.states, h_clean.states):
        diff = star - clean
        errors.append((diff * diff).sum(dim=-1))
    dims = h_star.dims
    if mode == ALL_AVE:
        return sum(errors) / sum(dims)
    if mode == GROUP_AVE:
        return sum(err / dim for err, dim in zip(errors, dims)) / len(dims)
    raise ValueError(f"Unknown hidden anchoring mode '{mode}'")


def hidden_taps(states: HiddenStateSet) -> HiddenStateSet:
    """The taps of a state set without the raw input tap."""
    keep = [ind for ind, name in enumerate(states.names) if name != "input"]
    return HiddenStateSet(tuple(states.names[ind] for ind in keep),
                          tuple(states.states[ind] for ind in keep))


class BackdoorObjective:
    """Batch loss of a backdoor objective on mixed batches of D u D*.

    The anchoring terms (anchor, hidden_anchor, kd) only act on the clean
    instances of a batch; the training loss is the mean cross entropy of the
    whole batch.

    Args:
        spec: Objective selection.
        model: Model being trained.
        theta_clean: Clean parameters theta (reference point of the
            parameter-space penalties and of the projection).
        context: Frozen anchoring targets (anchor, hidden_anchor, kd).
        fisher: Normalized Fisher information (ewc).
    """

    def __init__(self, spec: ObjectiveSpec, model: TappedModel, theta_clean: ParamVector,
                 context: Optional[AnchorContext] = None, fisher: Optional[FisherDiag] = None):
        self.spec = spec
        self.model = model
        self.theta_clean = theta_clean.clone()
        self.context = context
        self.fisher = fisher
        if spec.kind in ("anchor", "hidden_anchor", "kd") and context is None:
            raise ValueError(f"Objective '{spec.kind}' needs anchoring targets")
        if spec.kind == "hidden_anchor" and context.hidden is None:
            raise ValueError("Hidden anchoring needs the clean hidden states")
        if spec.kind == "ewc" and (fisher is None or fisher.normalized is None):
            raise ValueError("EWC needs the normalized Fisher information")


    @classmethod
    def prepare(cls, spec: ObjectiveSpec, model: TappedModel, theta_clean: ParamVector,
                clean: LabeledDataset) -> "BackdoorObjective":
        """Precomputes whatever the objective needs from the clean model and D.

        Anchoring targets come from the clean model (anchor, hidden_anchor) or
        from the teacher (kd); EWC gets its smoothed Fisher information.
        """
        context, fisher = None, None
        if spec.kind in ("anchor", "hidden_anchor"):
            context = AnchorContext.from_model(model, clean.inputs, spec.lam, theta_clean,
                                               with_hidden=spec.kind == "hidden_anchor")
        elif spec.kind == "kd":
            context = AnchorContext.from_model(spec.teacher, clean.inputs, spec.lam)
        elif spec.kind == "ewc":
            logger.info("Computing Fisher information on %d clean instances", len(clean))
            fisher = normalize_fisher(fisher_diag(model, clean, theta_clean), spec.gamma)
        return cls(spec, model, theta_clean, context, fisher)


    def training_loss(self, theta: ParamVector, inputs: torch.Tensor,
                      labels: torch.Tensor) -> torch.Tensor:
        """Mean cross entropy of a batch."""
        return cross_entropy(predict_logits(self.model, inputs, theta), labels).mean()


    def batch_loss(self, theta: ParamVector, inputs: torch.Tensor, labels: torch.Tensor,
                   clean_index: torch.Tensor) -> torch.Tensor:
        """Objective value of a batch.

        Args:
            theta: Current parameters theta*.
            inputs: Batch inputs.
            labels: Batch labels.
            clean_index: Index of every batch instance in D, -1 for poisoned ones.
        """
        kind = self.spec.kind
        if kind == "hidden_anchor":
            taps = functional_call_taps(self.model, theta, inputs)
            names, states = zip(*taps)
            logits = states[-1]
        else:
            logits = predict_logits(self.model, inputs, theta)
        train = cross_entropy(logits, labels).mean()
        if kind in ("plain", "pgd"):
            return train

        if kind in ("l2", "ewc", "surgery_l1"):
            if kind == "l2":
                penalty = l2_term(theta, self.theta_clean)
            elif kind == "ewc":
                penalty = ewc_term(theta, self.theta_clean, self.fisher)
            else:
                penalty = surgery_l1_term(theta, self.theta_clean)
            return total_loss(train, penalty, self.spec.lam)

        clean_mask = clean_index >= 0
        if not bool(clean_mask.any()):
            return total_loss(train, torch.zeros((), dtype=DTYPE), self.spec.lam)
        rows = clean_index[clean_mask]
        if kind == "anchor":
            penalty = anchor_loss(logits[clean_mask], self.context.logits[rows]).mean()
        elif kind == "kd":
            penalty = kd_term(logits[clean_mask], self.context.logits[rows]).mean()
        else:
            current = hidden_taps(HiddenStateSet(tuple(names), tuple(states)))
            reference = hidden_taps(self.context.hidden)
            penalty = hidden_anchor_term(current.select(clean_mask), reference.select(rows),
                                         self.spec.hidden_mode).mean()
        return total_loss(train, penalty, self.spec.lam)


    def project(self, theta: ParamVector) -> ParamVector:
        """Projection onto the feasible set (identity unless kind is "pgd")."""
        if self.spec.kind != "pgd":
            return theta
        return project_delta(theta, self.theta_clean, self.spec.pgd.norm, self.spec.pgd.radius)


    def value_and_gradient(self, theta: ParamVector,
                           batch: Sequence[torch.Tensor]) -> Tuple[float, GradVector]:
        """Batch loss and its gradient with respect to theta."""
        inputs, labels, clean_index = batch
        return value_and_grad(lambda params: self.batch_loss(params, inputs, labels, clean_index),
                              theta)


    def dataset_loss(self, theta: ParamVector, data: MixedDataset) -> float:
        """Objective value on a full mixed dataset."""
        with torch.no_grad():
            return float(self.batch_loss(theta, data.inputs, data.labels, data.clean_index))
