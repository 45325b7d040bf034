#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Clean loss and attack success rate on a 2D plane through parameter space.
"""
import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import torch
from tqdm import tqdm

from bclab.common import DTYPE, ShapeError, make_generator
from bclab.diffcore import ParamVector
from bclab.models import TappedModel, predict_logits
from bclab.objectives import cross_entropy
from bclab.poison import LabeledDataset, TriggerSpec, trigger_eval_set

logger = logging.getLogger(__name__)

# Residual norm below which the third point counts as colinear
DEGENERATE_RESIDUAL = 1e-10


@dataclass(frozen=True)
class PlaneBasis:
    """Orthonormal basis of a plane through three parameter vectors.

    Attributes:
        origin: theta_0 (the clean parameters).
        u: Unit vector along theta_1 - theta_0.
        v: Unit Gram-Schmidt residual of theta_2 - theta_0 against u.
        anchors: The three spanning points with their plane coordinates.
    """
    origin: ParamVector
    u: ParamVector
    v: ParamVector
    anchors: Tuple[Tuple[ParamVector, float, float], ...] = ()

    @property
    def scale(self) -> Tuple[float, float]:
        """||theta_1 - theta_0|| and the v-component of theta_2 - theta_0"""
        return self.anchors[1][1], self.anchors[2][2]


    def coordinates(self, theta: ParamVector) -> Tuple[float, float]:
        """Plane coordinates (a, b) of the projection of theta."""
        diff = theta - self.origin
        return float(diff.dot(self.u)), float(diff.dot(self.v))


    def materialize(self, a: float, b: float) -> ParamVector:
        """The point origin + a u + b v.

        At (0, 0) the values equal those of the origin bitwise.
        """
        return ParamVector(self.origin.values + a * self.u.values + b * self.v.values,
                           self.origin.layout)


def plane_from_three(theta0: ParamVector, theta1: ParamVector, theta2: ParamVector) -> PlaneBasis:
    """Plane through theta_0, theta_1 and theta_2, oriented along theta_1 - theta_0.

    Raises:
        ShapeError: on mismatching layouts.
        ValueError: if theta_1 equals theta_0 or theta_2 is (numerically)
            colinear with them.
    """
    first = theta1 - theta0
    second = theta2 - theta0
    first_norm = float(first.norm())
    if first_norm < DEGENERATE_RESIDUAL:
        raise ValueError("First direction of the plane vanishes")
    u = first / first_norm
    along = float(second.dot(u))
    residual = second - u * along
    res_norm = float(residual.norm())
    if res_norm < DEGENERATE_RESIDUAL:
        raise ValueError("Third point is colinear with the first two")
    v = residual / res_norm
    # re-orthogonalize once
    v = v - u * float(v.dot(u))
    v = v / float(v.norm())
    anchors = ((theta0, 0.0, 0.0), (theta1, first_norm, 0.0), (theta2, along, res_norm))
    return PlaneBasis(theta0, u, v, anchors)


@dataclass(frozen=True)
class GridSpec:
    """Scan grid.

    Args:
        steps: Grid points per axis.
        margin: Window size relative to the extent of the spanning points.
        window: Explicit (a_min, a_max, b_min, b_max), overrides margin.
        subsample: Number of test instances evaluated per cell.
        loss_cap: Losses above this (or non-finite ones) are stored as the cap.
        backdoor_threshold: ASR above which a cell belongs to the backdoor region.
        seed: Seed of the test subsample.
    """
    steps: int = 41
    margin: float = 1.5
    window: Optional[Tuple[float, float, float, float]] = None
    subsample: int = 1000
    loss_cap: float = 1e3
    backdoor_threshold: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("Grid needs at least two points per axis")
        if not self.margin >= 1.0:
            raise ValueError("Window margin must be at least 1")


    def axes(self, basis: PlaneBasis) -> Tuple[torch.Tensor, torch.Tensor]:
        """Grid coordinates along u and v.

        The coordinates of the spanning points inside the window are grid
        coordinates: each replaces the nearest lattice value, or is inserted
        if that value already holds another spanning coordinate.
        """
        coords_a = [anchor[1] for anchor in basis.anchors]
        coords_b = [anchor[2] for anchor in basis.anchors]
        if self.window is not None:
            amin, amax, bmin, bmax = self.window
        else:
            amin, amax = _widen(min(coords_a), max(coords_a), self.margin)
            bmin, bmax = _widen(min(coords_b), max(coords_b), self.margin)
        return (_lattice(amin, amax, self.steps, coords_a),
                _lattice(bmin, bmax, self.steps, coords_b))


def _widen(low: float, high: float, margin: float) -> Tuple[float, float]:
    center = 0.5 * (low + high)
    half = 0.5 * margin * (high - low)
    return min(center - half, low), max(center + half, high)


def _lattice(low: float, high: float, steps: int, pinned: Sequence[float]) -> torch.Tensor:
    axis = torch.linspace(low, high, steps, dtype=DTYPE)
    taken: Dict[int, float] = {}
    extra = []
    for value in sorted(set(pinned)):
        if not low <= value <= high:
            continue
        index = int(torch.argmin((axis - value).abs()))
        if index in taken and taken[index] != value:
            extra.append(value)
            continue
        taken[index] = value
        axis[index] = value
    if extra:
        axis = torch.sort(torch.cat([axis, torch.tensor(extra, dtype=DTYPE)])).values
    return axis


@dataclass
class LossGrid:
    """Scan result; row i belongs to a_axis[i], column j to b_axis[j].

    Attributes:
        a_axis: Coordinates along u.
        b_axis: Coordinates along v.
        clean_loss: Mean clean test loss per cell (capped).
        asr: Attack success rate per cell.
        capped: Cells whose loss was replaced by the cap.
        backdoor_threshold: ASR threshold of the backdoor region.
        anchors: (name, a, b, clean_loss, asr) of the spanning points.
    """
    a_axis: torch.Tensor
    b_axis: torch.Tensor
    clean_loss: torch.Tensor
    asr: torch.Tensor
    capped: torch.Tensor
    backdoor_threshold: float = 0.95
    anchors: List[Tuple[str, float, float, float, float]] = field(default_factory=list)

    @property
    def backdoor_region(self) -> torch.Tensor:
        """Cells with an ASR above the threshold"""
        return self.asr > self.backdoor_threshold


    def nearest_cell(self, a: float, b: float) -> Tuple[int, int]:
        """Grid index closest to the given coordinates."""
        return (int(torch.argmin((self.a_axis - a).abs())),
                int(torch.argmin((self.b_axis - b).abs())))


    def low_loss_component(self, level: float, start: Tuple[float, float] = (0.0, 0.0)):
        """Connected (4-neighbour) region of cells with loss <= level containing start.

        Returns:
            Boolean mask, empty if the start cell itself exceeds the level.
        """
        mask = torch.zeros_like(self.capped)
        low = self.clean_loss <= level
        first = self.nearest_cell(*start)
        if not bool(low[first]):
            return mask
        queue = deque([first])
        mask[first] = True
        rows, cols = low.shape
        while queue:
            row, col = queue.popleft()
            for nrow, ncol in ((row - 1, col), (row + 1, col), (row, col - 1), (row, col + 1)):
                if 0 <= nrow < rows and 0 <= ncol < cols and bool(low[nrow, ncol])\
                        and not bool(mask[nrow, ncol]):
                    mask[nrow, ncol] = True
                    queue.append((nrow, ncol))
        return mask


    def same_basin(self, coords: Sequence[Tuple[float, float]], level: float) -> List[bool]:
        """Whether the given plane points lie in the low-loss region of the origin.

        Points outside of the scanned window are never in the basin.
        """
        mask = self.low_loss_component(level)
        result = []
        for a, b in coords:
            inside = (float(self.a_axis[0]) <= a <= float(self.a_axis[-1])
                      and float(self.b_axis[0]) <= b <= float(self.b_axis[-1]))
            result.append(inside and bool(mask[self.nearest_cell(a, b)]))
        return result


    def write_csv(self, fobj: TextIO):
        """Writes one row per cell (a, b, clean_loss, asr, in_backdoor_region)."""
        writer = csv.writer(fobj, lineterminator="\n")
        writer.writerow(["a", "b", "clean_loss", "asr", "in_backdoor_region"])
        region = self.backdoor_region
        for row, a in enumerate(self.a_axis.tolist()):
            for col, b in enumerate(self.b_axis.tolist()):
                writer.writerow([repr(a), repr(b), repr(float(self.clean_loss[row, col])),
                                 repr(float(self.asr[row, col])), int(bool(region[row, col]))])


class CellEvaluator:
    """Clean test loss and ASR of a parameter vector on a fixed test subsample."""

    def __init__(self, model: TappedModel, test: LabeledDataset, trigger: TriggerSpec,
                 subsample: int = 1000, seed: int = 0, loss_cap: float = 1e3):
        if subsample < len(test):
            gen = make_generator(seed, "landscape")
            index = torch.sort(torch.randperm(len(test), generator=gen)[:subsample]).values
            test = test.subset(index)
        self.model = model
        self.test = test
        self.triggered = trigger_eval_set(test, trigger)
        self.target = trigger.target_class
        self.loss_cap = loss_cap


    def __call__(self, theta: ParamVector) -> Tuple[float, float, bool]:
        """Returns (clean_loss, asr, capped)."""
        with torch.no_grad():
            logits = predict_logits(self.model, self.test.inputs, theta)
            loss = float(cross_entropy(logits, self.test.labels).mean())
            trig = predict_logits(self.model, self.triggered.inputs, theta)
            asr = float((torch.argmax(trig, dim=1) == self.target).to(DTYPE).mean())
        if not math.isfinite(loss) or loss > self.loss_cap:
            return self.loss_cap, asr, True
        return loss, asr, False


def scan_plane(basis: PlaneBasis, grid: GridSpec, model: TappedModel, test: LabeledDataset,
               trigger: TriggerSpec, anchor_names: Sequence[str] = ("clean", "first", "second"),
               progress: bool = False) -> LossGrid:
    """Evaluates clean loss and ASR over the plane grid and at the spanning points."""
    if basis.origin.layout != basis.u.layout:
        raise ShapeError("Inconsistent plane basis")
    evaluate = CellEvaluator(model, test, trigger, grid.subsample, grid.seed, grid.loss_cap)
    a_axis, b_axis = grid.axes(basis)
    shape = (a_axis.numel(), b_axis.numel())
    losses = torch.zeros(shape, dtype=DTYPE)
    asrs = torch.zeros(shape, dtype=DTYPE)
    capped = torch.zeros(shape, dtype=torch.bool)
    cells = [(row, col) for row in range(shape[0]) for col in range(shape[1])]
    for row, col in tqdm(cells, disable=not progress, leave=False, desc="plane"):
        theta = basis.materialize(float(a_axis[row]), float(b_axis[col]))
        losses[row, col], asrs[row, col], capped[row, col] = evaluate(theta)
    if bool(capped.any()):
        logger.info("%d grid cells exceeded the loss cap", int(capped.sum()))
    anchors = []
    for name, (theta, a, b) in zip(anchor_names, basis.anchors):
        loss, asr, _ = evaluate(theta)
        anchors.append((name, a, b, loss, asr))
    return LossGrid(a_axis, b_axis, losses, asrs, capped, grid.backdoor_threshold, anchors)


def anchor_table(grid: LossGrid) -> Dict[str, Tuple[float, float, float, float]]:
    """Spanning points by name: (a, b, clean_loss, asr)."""
    return {name: (a, b, loss, asr) for name, a, b, loss, asr in grid.anchors}
