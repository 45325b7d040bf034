#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Second-order predictions about backdoor injection and their numerical checks.

Tuning a clean minimum theta on D u D* (|D*| = eta |D|) moves it by
approximately delta = -eta H^-1 g*, with H the Hessian of the clean loss and
g* the gradient of the backdoor loss at theta. This module evaluates that
prediction, the derived bounds, the local expansions of the clean loss change
and of the KL divergence, and compares them with converged models.
"""
import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, TextIO, Tuple, Union

import torch
from tqdm import tqdm

from bclab.common import DTYPE, NotConvergedError, ShapeError, SingularMatrixError
from bclab.diffcore import GradVector, HessianMatrix, ParamVector, explicit_hessian, grad
from bclab.models import build_model, predict_logits
from bclab.objectives import cross_entropy
from bclab.poison import LabeledDataset, TriggerSpec, poison

logger = logging.getLogger(__name__)

# Largest condition number accepted by the linear solves
MAX_CONDITION = 1e12

# Diagonal shift applied when the Hessian is not numerically positive definite
HESSIAN_SHIFT = 1e-10

# Target confidence defining the default required backdoor loss drop
TARGET_CONFIDENCE = 0.95

_Vector = Union[ParamVector, torch.Tensor]


def _values(vec: _Vector) -> torch.Tensor:
    if isinstance(vec, ParamVector):
        return vec.values.detach()
    return torch.as_tensor(vec, dtype=DTYPE)


@dataclass(frozen=True)
class LogitDelta:
    """Logit change eps_i = s*_i - s_i of one instance."""
    eps: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "eps", torch.as_tensor(self.eps, dtype=DTYPE))
        if not bool(torch.isfinite(self.eps).all()):
            raise ValueError("Non-finite logit change")


    def mean(self, p: torch.Tensor) -> torch.Tensor:
        """Probability weighted mean change sum_j p_j eps_j."""
        return (torch.as_tensor(p, dtype=DTYPE) * self.eps).sum()


@dataclass(frozen=True)
class AWPPrediction:
    """Second-order prediction of the backdoor perturbation.

    Attributes:
        delta_hat: Predicted perturbation -eta H^-1 g*.
        eta: Poisoning ratio.
        eta0: Minimal poisoning ratio for the required loss drop.
        bound: Upper bound of the perturbation norm.
        delta_L_star: Required backdoor loss drop |dL*|.
        condition_number: Condition number of H.
        shift: Diagonal shift used in the solve (0 if none was needed).
        curvature: g*^T H^-1 g*.
    """
    delta_hat: ParamVector
    eta: float
    eta0: float
    bound: float
    delta_L_star: float
    condition_number: float
    shift: float = 0.0
    curvature: float = 0.0

    @property
    def clean_change(self) -> float:
        """Predicted clean loss increase eta^2 / 2 g*^T H^-1 g*"""
        return 0.5 * self.eta ** 2 * self.curvature


    @property
    def backdoor_change(self) -> float:
        """Predicted backdoor loss change -eta g*^T H^-1 g*"""
        return -self.eta * self.curvature


def solve_hessian(hessian: HessianMatrix, rhs: torch.Tensor) -> Tuple[torch.Tensor, float]:
    """Solves H x = rhs by Cholesky factorization.

    A diagonal shift of HESSIAN_SHIFT is applied if H is not numerically
    positive definite.

    Returns:
        Tuple of the solution and the shift applied.

    Raises:
        SingularMatrixError: if H is ill-conditioned (condition number above
            MAX_CONDITION) or not positive definite even after the shift.
    """
    cond = hessian.condition_number()
    if not cond <= MAX_CONDITION:
        msg = f"Hessian condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}"
        raise SingularMatrixError(msg)
    matrix = hessian.matrix
    rhs = torch.as_tensor(rhs, dtype=DTYPE).reshape(-1, 1)
    if rhs.shape[0] != matrix.shape[0]:
        raise ShapeError(f"Right hand side of length {rhs.shape[0]} for Hessian of dimension "
                         f"{matrix.shape[0]}")
    shift = 0.0
    factor, info = torch.linalg.cholesky_ex(matrix)
    if int(info):
        shift = HESSIAN_SHIFT
        logger.warning("Hessian not positive definite, shifting its diagonal by %g", shift)
        eye = torch.eye(matrix.shape[0], dtype=DTYPE)
        factor, info = torch.linalg.cholesky_ex(matrix + shift * eye)
        if int(info):
            raise SingularMatrixError("Hessian is not positive definite")
    return torch.cholesky_solve(rhs, factor).reshape(-1), shift


def predict_delta(hessian: HessianMatrix, g_star: GradVector, eta: float) -> ParamVector:
    """Predicted perturbation -eta H^-1 g* (no explicit inverse)."""
    layout = g_star.layout if isinstance(g_star, ParamVector) else None
    if eta == 0.0:
        return ParamVector(torch.zeros_like(_values(g_star)), layout)
    solution, _ = solve_hessian(hessian, _values(g_star))
    return ParamVector(-eta * solution, layout)


def _cosine(first: torch.Tensor, second: torch.Tensor) -> float:
    norms = float(torch.linalg.vector_norm(first) * torch.linalg.vector_norm(second))
    if norms == 0.0:
        return math.nan
    return float(torch.dot(first, second)) / norms


def delta_upper_bound(hessian: HessianMatrix, g_star: _Vector, delta_L_star: float) -> float:
    """Bound |dL*| / (||g*|| cos(g*, H^-1 g*)) on the perturbation norm."""
    gvec = _values(g_star)
    gnorm = float(torch.linalg.vector_norm(gvec))
    if gnorm == 0.0:
        raise ValueError("Backdoor gradient is zero")
    solution, _ = solve_hessian(hessian, gvec)
    cos = _cosine(gvec, solution)
    if not cos > 0.0:
        raise ValueError(f"Non-positive cosine {cos} between g* and H^-1 g*")
    return abs(delta_L_star) / (gnorm * cos)


def min_poison_ratio(hessian: HessianMatrix, g_star: _Vector, delta_L_star: float) -> float:
    """Minimal poisoning ratio |dL*| / (g*^T H^-1 g*)."""
    gvec = _values(g_star)
    solution, _ = solve_hessian(hessian, gvec)
    curvature = float(torch.dot(gvec, solution))
    if not curvature > 0.0:
        raise ValueError("Backdoor gradient is zero")
    return abs(delta_L_star) / curvature


def predict(hessian: HessianMatrix, g_star: GradVector, eta: float,
            delta_L_star: float) -> AWPPrediction:
    """All second-order predictions at once."""
    gvec = _values(g_star)
    solution, shift = solve_hessian(hessian, gvec)
    curvature = float(torch.dot(gvec, solution))
    gnorm = float(torch.linalg.vector_norm(gvec))
    cos = _cosine(gvec, solution)
    if not (gnorm > 0.0 and cos > 0.0):
        raise ValueError("Backdoor gradient is zero or not aligned with H^-1 g*")
    layout = g_star.layout if isinstance(g_star, ParamVector) else None
    return AWPPrediction(delta_hat=ParamVector(-eta * solution, layout), eta=eta,
                         eta0=abs(delta_L_star) / curvature,
                         bound=abs(delta_L_star) / (gnorm * cos), delta_L_star=abs(delta_L_star),
                         condition_number=hessian.condition_number(), shift=shift,
                         curvature=curvature)


def alignment(hessian: HessianMatrix, g_star: _Vector) -> float:
    """|cos| between g* and the eigenvector of the smallest eigenvalue of H.

    Values close to 1 mean the backdoor gradient points along the flattest
    direction of the clean loss, where the least clean loss is paid per unit
    of backdoor loss drop.
    """
    _, vectors = torch.linalg.eigh(hessian.matrix)
    return abs(_cosine(_values(g_star), vectors[:, 0]))


def _probabilities(p) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=DTYPE)
    if bool((p < 0).any()) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("Not a probability distribution")
    return p


def _eps(eps) -> torch.Tensor:
    return eps.eps if isinstance(eps, LogitDelta) else torch.as_tensor(eps, dtype=DTYPE)


def quad_clean_change(p, eps) -> Tuple[float, float]:
    """Quadratic clean loss change and its upper bound for one instance.

    Returns:
        Tuple (sum_ij p_i p_j (eps_i - eps_j)^2 / 4, sum_i p_i (1 - p_i) eps_i^2).
    """
    p = _probabilities(p)
    eps = _eps(eps)
    if p.shape != eps.shape:
        raise ShapeError("Probabilities and logit change differ in length")
    diff = eps.unsqueeze(0) - eps.unsqueeze(1)
    quadratic = float((p.unsqueeze(0) * p.unsqueeze(1) * diff * diff).sum() / 4.0)
    upper = float((p * (1.0 - p) * eps * eps).sum())
    return quadratic, upper


def kl_and_bound(p, eps) -> Tuple[float, float]:
    """Exact KL(p || p*) with p* = softmax(log p + eps) and the bound sum(eps^2) / 2."""
    p = _probabilities(p)
    eps = _eps(eps)
    if p.shape != eps.shape:
        raise ShapeError("Probabilities and logit change differ in length")
    support = p > 0
    logp = torch.where(support, torch.log(torch.where(support, p, torch.ones_like(p))),
                       torch.full_like(p, -math.inf))
    logp_star = torch.log_softmax(logp + eps, dim=0)
    terms = torch.where(support, p * (logp - logp_star), torch.zeros_like(p))
    return max(float(terms.sum()), 0.0), 0.5 * float((eps * eps).sum())


def direct_clean_change(logits: torch.Tensor, eps: torch.Tensor) -> float:
    """Expected clean loss change E_y~p [CE(s + eps, y) - CE(s, y)] averaged over instances.

    With labels distributed as the clean model predicts, this is the exact
    counterpart of the quadratic expansion of :func:`quad_clean_change`.
    """
    logits = torch.atleast_2d(torch.as_tensor(logits, dtype=DTYPE))
    eps = torch.as_tensor(eps, dtype=DTYPE).reshape(logits.shape)
    logp = torch.log_softmax(logits, dim=1)
    logp_star = torch.log_softmax(logits + eps, dim=1)
    return float((logp.exp() * (logp - logp_star)).sum(dim=1).mean())


@dataclass(frozen=True)
class AWPRow:
    """One entry of the AWP experiment."""
    eta: float
    delta_norm: float
    predicted_norm: float
    cosine: float
    bound: float
    condition_number: float
    eta0: float = math.nan
    predicted_clean_change: float = math.nan
    clean_change: float = math.nan
    alignment: float = math.nan


AWP_COLUMNS = ("eta", "delta_norm", "predicted_norm", "cosine", "bound", "condition_number",
               "eta0", "predicted_clean_change", "clean_change", "alignment")


def write_awp_csv(rows: Sequence[AWPRow], fobj: TextIO):
    """Writes the AWP table as CSV."""
    writer = csv.writer(fobj, lineterminator="\n")
    writer.writerow(AWP_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(getattr(row, col))) for col in AWP_COLUMNS])


def newton_minimize(loss_fn: Callable[[ParamVector], torch.Tensor], theta: ParamVector,
                    tol: float = 1e-10, max_iterations: int = 100) -> Tuple[ParamVector, float]:
    """Damped Newton iteration with backtracking line search.

    Returns:
        Tuple of the minimizer and the final gradient norm.
    """
    gnorm = math.inf
    for _ in range(max_iterations):
        gvec = grad(loss_fn, theta)
        gnorm = float(gvec.norm())
        if gnorm < tol:
            break
        hessian = explicit_hessian(loss_fn, theta)
        step, _ = solve_hessian(hessian, -gvec.values)
        current = float(loss_fn(theta))
        slope = float(torch.dot(gvec.values, step))
        size = 1.0
        for _ in range(40):
            trial = ParamVector(theta.values + size * step, theta.layout)
            with torch.no_grad():
                if float(loss_fn(trial)) <= current + 1e-4 * size * slope:
                    break
            size *= 0.5
        theta = ParamVector(theta.values + size * step, theta.layout)
    return theta, gnorm


def awp_experiment(data: LabeledDataset, trigger: TriggerSpec, etas: Sequence[float], seed: int,
                   ridge: float = 1e-3, delta_L_star: Optional[float] = None,
                   grad_tol: float = 1e-5, progress: bool = False) -> List[AWPRow]:
    """Compares converged backdoor perturbations with their second-order prediction.

    A binary logistic regression model (with bias) is brought to the clean
    minimum of L(D) + ridge / 2 ||theta||^2 by Newton's method. For every eta
    the poisoned set D* (eta |D| triggered instances labeled as the target) is
    built, the model is tuned from the clean minimum to convergence on the
    plain objective over D u D*, and the converged perturbation is compared
    with -eta H^-1 g*.

    Args:
        data: Two-class dataset with flat features.
        trigger: Trigger (typically a token trigger adding to one feature).
        etas: Poisoning ratios (0 allowed).
        seed: Seed of the poisoned-instance selection.
        ridge: Ridge strength applied to every dataset loss.
        delta_L_star: Required backdoor loss drop. Defaults to the backdoor
            loss of the clean model minus -ln(0.95).
        grad_tol: Clean gradient norm below which the clean model counts as
            converged.
        progress: Show a progress bar.

    Returns:
        One row per eta.

    Raises:
        NotConvergedError: if the clean model does not converge.
    """
    if data.classes != 2 or len(data.input_shape) != 1:
        raise ShapeError("The AWP experiment needs a two-class dataset with flat features")
    model = build_model("logistic", data.input_shape, 2)
    theta0 = ParamVector.from_module(model)

    def dataset_loss(dset: LabeledDataset) -> Callable[[ParamVector], torch.Tensor]:
        def loss_fn(theta: ParamVector) -> torch.Tensor:
            ce = cross_entropy(predict_logits(model, dset.inputs, theta), dset.labels).mean()
            return ce + 0.5 * ridge * (theta.values * theta.values).sum()
        return loss_fn

    clean_loss = dataset_loss(data)
    theta, gnorm = newton_minimize(clean_loss, theta0)
    if not gnorm < grad_tol:
        raise NotConvergedError(f"Clean model not converged (gradient norm {gnorm:.3g})")
    hessian = explicit_hessian(clean_loss, theta)
    clean_value = float(clean_loss(theta))
    logger.info("Clean model converged, Hessian condition number %.3g",
                hessian.condition_number())

    rows = []
    for eta in tqdm(etas, disable=not progress, leave=False, desc="eta"):
        if eta == 0.0:
            tuned, _ = newton_minimize(clean_loss, theta)
            delta = tuned - theta
            rows.append(AWPRow(eta=0.0, delta_norm=float(delta.norm()), predicted_norm=0.0,
                               cosine=math.nan, bound=math.nan,
                               condition_number=hessian.condition_number(), clean_change=0.0))
            continue
        poisoned = poison(data, eta, trigger, seed)
        eta_eff = len(poisoned) / len(data)
        with torch.no_grad():
            backdoor_ce = cross_entropy(predict_logits(model, poisoned.inputs, theta),
                                        poisoned.labels).mean()
        required = delta_L_star
        if required is None:
            required = float(backdoor_ce) + math.log(TARGET_CONFIDENCE)
            if not required > 0.0:
                raise ValueError("Trigger already reaches the target confidence on the clean model")
        backdoor_loss = dataset_loss(poisoned)
        g_star = grad(backdoor_loss, theta)
        pred = predict(hessian, g_star, eta_eff, required)

        def mixed_loss(params, backdoor_loss=backdoor_loss, eta_eff=eta_eff):
            return (clean_loss(params) + eta_eff * backdoor_loss(params)) / (1.0 + eta_eff)

        tuned, _ = newton_minimize(mixed_loss, theta)
        delta = tuned - theta
        rows.append(AWPRow(eta=eta_eff, delta_norm=float(delta.norm()),
                           predicted_norm=float(pred.delta_hat.norm()),
                           cosine=_cosine(delta.values, pred.delta_hat.values), bound=pred.bound,
                           condition_number=pred.condition_number, eta0=pred.eta0,
                           predicted_clean_change=pred.clean_change,
                           clean_change=float(clean_loss(tuned)) - clean_value,
                           alignment=alignment(hessian, g_star)))
        logger.info("eta %.4g: |delta| %.4g, predicted %.4g, cosine %.4f", eta_eff,
                    rows[-1].delta_norm, rows[-1].predicted_norm, rows[-1].cosine)
    return rows
