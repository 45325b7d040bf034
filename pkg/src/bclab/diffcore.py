#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Contains the numerical core: flat parameter vectors, reverse-mode gradients,
finite-difference oracles, explicit Hessians, the SGD step and the checkpoint
codec.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from bclab.common import CHECKPOINT_MAGIC, DTYPE, HESSIAN_CAP, CapacityError, ConfigError,\
    FormatError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    """Named block of a flat parameter vector."""
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        """Number of scalars in the segment."""
        size = 1
        for dim in self.shape:
            size *= dim
        return size


class Layout:
    """Ordered list of (name, shape) segments describing a flat parameter vector.

    Args:
        segments: Segments in declaration order.
    """

    def __init__(self, segments: Sequence[Segment]):
        self._segments: Tuple[Segment, ...] = tuple(segments)
        names = [seg.name for seg in self._segments]
        if len(set(names)) != len(names):
            raise ShapeError(f"Duplicate segment names in layout: {names}")
        self._numel: int = sum(seg.size for seg in self._segments)


    @classmethod
    def from_module(cls, module: nn.Module) -> "Layout":
        """Layout of the trainable parameters of a module."""
        return cls([Segment(name, tuple(par.shape))
                    for name, par in module.named_parameters() if par.requires_grad])


    @classmethod
    def flat(cls, numel: int, name: str = "theta") -> "Layout":
        """Layout consisting of a single one-dimensional segment."""
        return cls([Segment(name, (numel,))])


    @property
    def segments(self) -> Tuple[Segment, ...]:
        """The segments of the layout"""
        return self._segments


    @property
    def numel(self) -> int:
        """Total number of scalars (sum of the segment sizes)"""
        return self._numel


    def __len__(self):
        return len(self._segments)


    def __iter__(self) -> Iterator[Segment]:
        return iter(self._segments)


    def __eq__(self, other):
        return isinstance(other, Layout) and self._segments == other._segments


    def __hash__(self):
        return hash(self._segments)


    def __repr__(self):
        inner = ", ".join(f"{seg.name}{list(seg.shape)}" for seg in self._segments)
        return f"Layout({inner})"


    def split(self, values: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Splits a flat tensor into named, reshaped views (graph preserving)."""
        result = {}
        offset = 0
        for seg in self._segments:
            result[seg.name] = values[offset:offset + seg.size].reshape(seg.shape)
            offset += seg.size
        return result


    def segment_slices(self) -> Iterator[Tuple[str, slice]]:
        """Yields (segment name, slice into the flat vector) pairs."""
        offset = 0
        for seg in self._segments:
            yield seg.name, slice(offset, offset + seg.size)
            offset += seg.size


class ParamVector:
    """Flat view of all trainable parameters of a model.

    Args:
        values: One-dimensional tensor (or anything convertible) of parameter
            values. Tensors are used as they are, so autograd graphs survive.
        layout: Segment layout. A single flat segment is assumed, if not given.

    Examples:
        >>> theta = ParamVector([3.0, 4.0])
        >>> float(theta.norm())
        5.0
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Optional[Layout] = None):
        if not isinstance(values, torch.Tensor):
            values = torch.as_tensor(values, dtype=DTYPE)
        elif values.dtype != DTYPE:
            values = values.to(DTYPE)
        values = values.reshape(-1)
        if layout is None:
            layout = Layout.flat(values.numel())
        if layout.numel != values.numel():
            msg = f"Layout expects {layout.numel} values, got {values.numel()}"
            raise ShapeError(msg)
        self.values: torch.Tensor = values
        self.layout: Layout = layout


    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        """Snapshot (detached copy) of the trainable parameters of a module."""
        layout = Layout.from_module(module)
        pars = [par.detach().reshape(-1).to(DTYPE) for par in module.parameters()
                if par.requires_grad]
        values = torch.cat(pars) if pars else torch.zeros(0, dtype=DTYPE)
        return cls(values.clone(), layout)


    def as_params(self) -> Dict[str, torch.Tensor]:
        """Named parameter tensors suitable for :func:`torch.func.functional_call`."""
        return self.layout.split(self.values)


    def load_into(self, module: nn.Module):
        """Copies the values into the parameters of a module with matching layout."""
        if Layout.from_module(module) != self.layout:
            raise ShapeError("Module parameters do not match the layout of the vector")
        named = dict(module.named_parameters())
        with torch.no_grad():
            for name, tensor in self.as_params().items():
                named[name].copy_(tensor)


    def _binary(self, other, oper):
        if isinstance(other, ParamVector):
            if other.layout != self.layout:
                raise ShapeError(f"Layout mismatch: {self.layout} vs {other.layout}")
            return type(self)(oper(self.values, other.values), self.layout)
        return type(self)(oper(self.values, other), self.layout)


    def __add__(self, other):
        return self._binary(other, torch.add)


    def __sub__(self, other):
        return self._binary(other, torch.sub)


    def __mul__(self, scalar):
        return self._binary(scalar, torch.mul)


    __rmul__ = __mul__


    def __truediv__(self, scalar):
        return self._binary(scalar, torch.div)


    def __neg__(self):
        return type(self)(-self.values, self.layout)


    def __len__(self):
        return self.values.numel()


    def __repr__(self):
        return f"{type(self).__name__}(n={len(self)}, {self.layout})"


    def dot(self, other: "ParamVector") -> torch.Tensor:
        """Euclidean inner product with a vector of the same layout."""
        if other.layout != self.layout:
            raise ShapeError(f"Layout mismatch: {self.layout} vs {other.layout}")
        return torch.dot(self.values, other.values)


    def norm(self, p: Union[int, float] = 2) -> torch.Tensor:
        """The p-norm of the vector (p = 1, 2 or float('inf'))."""
        return torch.linalg.vector_norm(self.values, ord=p)


    def clone(self) -> "ParamVector":
        """Detached copy."""
        return type(self)(self.values.detach().clone(), self.layout)


    def zeros_like(self) -> "ParamVector":
        """Vector of zeros with the same layout."""
        return type(self)(torch.zeros_like(self.values.detach()), self.layout)


    def equal(self, other: "ParamVector") -> bool:
        """Bitwise equality of layout and values."""
        return self.layout == other.layout and torch.equal(self.values, other.values)


    def nonfinite_segments(self) -> List[str]:
        """Names of the segments containing non-finite values."""
        values = self.values.detach()
        return [name for name, slc in self.layout.segment_slices()
                if not bool(torch.isfinite(values[slc]).all())]


    def check_finite(self, what: str = "parameters"):
        """Raises NonFiniteError naming the first non-finite segment."""
        bad = self.nonfinite_segments()
        if bad:
            msg = f"Non-finite {what} in segment '{bad[0]}'"
            raise NonFiniteError(msg, segment=bad[0])


class GradVector(ParamVector):
    """Gradient of a scalar with respect to a ParamVector (same layout)."""


@dataclass
class HessianMatrix:
    """Symmetric matrix of second derivatives with respect to a ParamVector.

    Args:
        matrix: n x n tensor.
        layout: Layout of the parameter vector it was computed for.
    """
    matrix: torch.Tensor
    layout: Layout

    def __post_init__(self):
        n = self.layout.numel
        if tuple(self.matrix.shape) != (n, n):
            raise ShapeError(f"Hessian of shape {tuple(self.matrix.shape)} for {n} parameters")


    @property
    def dim(self) -> int:
        """Number of rows (and columns)"""
        return self.layout.numel


    def asymmetry(self) -> float:
        """Maximal absolute entry of H - H^T."""
        return float((self.matrix - self.matrix.T).abs().max()) if self.dim else 0.0


    def eigenvalues(self) -> torch.Tensor:
        """Eigenvalues in ascending order."""
        return torch.linalg.eigvalsh(self.matrix)


    def condition_number(self) -> float:
        """Ratio of the largest to the smallest absolute eigenvalue."""
        eigs = self.eigenvalues().abs()
        smallest = float(eigs.min())
        if smallest == 0.0:
            return float("inf")
        return float(eigs.max()) / smallest


@dataclass(frozen=True)
class EarlyStop:
    """Early stopping rule: stop after `patience` evaluations without improvement."""
    patience: int = 5
    monitor: str = "asr_plus_acc"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("field 'early_stop.patience': must be a positive integer")


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs of the SGD training loop.

    Args:
        learning_rate: Step size (positive).
        batch_size: Number of instances per step (positive).
        momentum: Momentum factor in [0, 1).
        weight_decay: L2 weight decay folded into the gradient (non-negative).
        max_iterations: Number of SGD steps (positive).
        eval_interval: Steps between two monitor evaluations ("epochs"). One
            pass over the training data, if not given.
        early_stop: Optional early stopping rule.
        milestones: Epochs after which the learning rate is divided by 10.
    """
    learning_rate: float
    batch_size: int
    momentum: float = 0.0
    weight_decay: float = 0.0
    max_iterations: int = 1
    eval_interval: Optional[int] = None
    early_stop: Optional[EarlyStop] = None
    milestones: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ConfigError("field 'learning_rate': must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("field 'batch_size': must be a positive integer")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("field 'momentum': must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("field 'weight_decay': must be non-negative")
        if self.max_iterations < 1:
            raise ConfigError("field 'max_iterations': must be a positive integer")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ConfigError("field 'eval_interval': must be a positive integer")


    def learning_rate_at(self, epoch: int) -> float:
        """Learning rate after the step schedule has been applied for the given epoch."""
        drops = sum(1 for milestone in self.milestones if epoch >= milestone)
        return self.learning_rate * 0.1 ** drops


@dataclass(frozen=True)
class MomentumState:
    """Momentum buffer of the SGD step (None before the first step)."""
    buffer: Optional[torch.Tensor] = None


LossFunction = Callable[[ParamVector], torch.Tensor]


def functional_forward(module: nn.Module, theta: ParamVector, *args) -> torch.Tensor:
    """Evaluates a module with the parameters taken from a ParamVector.

    The module's own parameters are left untouched, gradients flow into
    ``theta.values``.
    """
    return functional_call(module, theta.as_params(), args)


def _evaluate(loss_fn: LossFunction, theta: ParamVector) -> torch.Tensor:
    loss = loss_fn(theta)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ShapeError("Loss function must return a scalar tensor")
    return loss.reshape(())


def grad(loss_fn: LossFunction, theta: ParamVector) -> GradVector:
    """Exact reverse-mode gradient of a scalar loss.

    Args:
        loss_fn: Differentiable scalar function of a ParamVector.
        theta: Point to differentiate at.

    Returns:
        Gradient with the layout of ``theta``.

    Raises:
        NonFiniteError: if the loss or a gradient segment is not finite. The
            exception names the failing segment.

    Examples:
        >>> g = grad(lambda th: 0.5 * (th.values ** 2).sum(), ParamVector([3.0, 4.0]))
        >>> g.values.tolist()
        [3.0, 4.0]
    """
    return value_and_grad(loss_fn, theta)[1]


def value_and_grad(loss_fn: LossFunction, theta: ParamVector) -> Tuple[float, GradVector]:
    """Loss value and exact reverse-mode gradient from a single backward pass.

    Raises:
        NonFiniteError: as :func:`grad`.
    """
    values = theta.values.detach().clone().requires_grad_(True)
    loss = _evaluate(loss_fn, ParamVector(values, theta.layout))
    if not bool(torch.isfinite(loss)):
        bad = theta.nonfinite_segments()
        where = f" (non-finite parameters in segment '{bad[0]}')" if bad else ""
        raise NonFiniteError(f"Loss evaluated to {float(loss)}{where}",
                             segment=bad[0] if bad else None)
    (gvalues,) = torch.autograd.grad(loss, values, allow_unused=True)
    if gvalues is None:
        gvalues = torch.zeros_like(values)
    result = GradVector(gvalues.detach(), theta.layout)
    result.check_finite("gradient")
    return float(loss.detach()), result


def finite_diff_grad(loss_fn: LossFunction, theta: ParamVector, h: float = 1e-5) -> GradVector:
    """Central finite-difference estimate of the gradient (oracle).

    Args:
        loss_fn: Scalar function of a ParamVector.
        theta: Point to differentiate at.
        h: Probe step (positive).

    Returns:
        (f(theta + h e_i) - f(theta - h e_i)) / (2h) for every coordinate i.
    """
    if not h > 0.0:
        raise ValueError("Finite difference step must be positive")
    base = theta.values.detach().clone()
    result = torch.zeros_like(base)
    with torch.no_grad():
        for name, slc in theta.layout.segment_slices():
            for ind in range(slc.start, slc.stop):
                probe = base.clone()
                probe[ind] += h
                fplus = _evaluate(loss_fn, ParamVector(probe, theta.layout))
                probe[ind] -= 2.0 * h
                fminus = _evaluate(loss_fn, ParamVector(probe, theta.layout))
                if not (bool(torch.isfinite(fplus)) and bool(torch.isfinite(fminus))):
                    msg = f"Non-finite probe at coordinate {ind} of segment '{name}'"
                    raise NonFiniteError(msg, segment=name)
                result[ind] = (fplus - fminus) / (2.0 * h)
    return GradVector(result, theta.layout)


def explicit_hessian(loss_fn: LossFunction, theta: ParamVector, cap: int = HESSIAN_CAP,
                     mode: str = "autograd", h: float = 1e-5) -> HessianMatrix:
    """Explicit (dense) Hessian for small parameter counts.

    Args:
        loss_fn: Twice differentiable scalar function of a ParamVector.
        theta: Point of evaluation.
        cap: Maximal number of parameters.
        mode: "autograd" differentiates every gradient coordinate once more,
            "finite_difference" takes central differences of exact gradients
            (oracle mode).
        h: Probe step in finite difference mode.

    Returns:
        Symmetrized Hessian.

    Raises:
        CapacityError: if the parameter count exceeds the cap.
    """
    ndim = theta.layout.numel
    if ndim > cap:
        msg = f"Refusing explicit Hessian for {ndim} parameters (cap is {cap})"
        raise CapacityError(msg)
    if mode == "autograd":
        def flat_loss(values):
            return _evaluate(loss_fn, ParamVector(values, theta.layout))
        matrix = torch.autograd.functional.hessian(flat_loss, theta.values.detach().clone())
        matrix = matrix.reshape(ndim, ndim).detach()
    elif mode == "finite_difference":
        base = theta.values.detach().clone()
        matrix = torch.zeros((ndim, ndim), dtype=DTYPE)
        for ind in range(ndim):
            probe = base.clone()
            probe[ind] += h
            gplus = grad(loss_fn, ParamVector(probe, theta.layout)).values
            probe[ind] -= 2.0 * h
            gminus = grad(loss_fn, ParamVector(probe, theta.layout)).values
            matrix[:, ind] = (gplus - gminus) / (2.0 * h)
    else:
        raise ValueError(f"Unknown Hessian mode '{mode}'")
    if not bool(torch.isfinite(matrix).all()):
        raise NonFiniteError("Non-finite Hessian entry")
    return HessianMatrix(0.5 * (matrix + matrix.T), theta.layout)


def sgd_step(theta: ParamVector, g: GradVector, state: MomentumState, cfg: OptimizerConfig,
             learning_rate: Optional[float] = None) -> Tuple[ParamVector, MomentumState]:
    """One step of classic SGD with momentum, weight decay folded into the gradient.

    The step is a pure function of its arguments. It follows the update rule of
    :class:`torch.optim.SGD`: ``d = g + wd * theta``, ``v = d`` on the first
    step and ``v = momentum * v + d`` afterwards, ``theta' = theta - lr * v``.

    Args:
        theta: Current parameters.
        g: Gradient at theta.
        state: Momentum state from the previous step.
        cfg: Optimizer configuration.
        learning_rate: Overrides ``cfg.learning_rate`` (used by schedules).

    Returns:
        Tuple of the new parameters and the new momentum state.
    """
    if g.layout != theta.layout:
        raise ShapeError(f"Layout mismatch: {theta.layout} vs {g.layout}")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    direction = g.values.detach()
    values = theta.values.detach()
    if cfg.weight_decay:
        direction = direction + cfg.weight_decay * values
    if cfg.momentum:
        if state.buffer is None:
            buffer = direction.clone()
        else:
            buffer = cfg.momentum * state.buffer + direction
        direction = buffer
        state = MomentumState(buffer)
    return ParamVector(values - lr * direction, theta.layout), state


_UINT = struct.Struct("<I")


def write_checkpoint(theta: ParamVector, fobj: Union[BinaryIO, str]):
    """Writes a parameter vector in the BCLB1 checkpoint format.

    Layout: magic bytes, segment count, then per segment (name length, name
    bytes, rank, dims), then all values as little-endian 64-bit floats in
    declaration order. Integers are little-endian unsigned 32-bit.

    Args:
        theta: Parameter vector to store.
        fobj: Name of file or binary file like object.
    """
    if isinstance(fobj, str):
        with open(fobj, "wb") as fp:
            write_checkpoint(theta, fp)
        return
    fobj.write(CHECKPOINT_MAGIC)
    fobj.write(_UINT.pack(len(theta.layout)))
    for seg in theta.layout:
        name = seg.name.encode("utf-8")
        fobj.write(_UINT.pack(len(name)))
        fobj.write(name)
        fobj.write(_UINT.pack(len(seg.shape)))
        for dim in seg.shape:
            fobj.write(_UINT.pack(dim))
    values = theta.values.detach().cpu().numpy().astype("<f8")
    fobj.write(values.tobytes())


def read_checkpoint(fobj: Union[BinaryIO, str]) -> ParamVector:
    """Reads a parameter vector stored with :func:`write_checkpoint`.

    Raises:
        FormatError: on wrong magic bytes or truncated content.
    """
    if isinstance(fobj, str):
        with open(fobj, "rb") as fp:
            return read_checkpoint(fp)

    def read_exact(nbytes):
        data = fobj.read(nbytes)
        if len(data) != nbytes:
            raise FormatError("Truncated checkpoint")
        return data

    def read_uint():
        return _UINT.unpack(read_exact(_UINT.size))[0]

    if read_exact(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("Not a BCLB1 checkpoint (invalid magic bytes)")
    segments = []
    for _ in range(read_uint()):
        name = read_exact(read_uint()).decode("utf-8")
        rank = read_uint()
        shape = tuple(read_uint() for _ in range(rank))
        segments.append(Segment(name, shape))
    layout = Layout(segments)
    values = np.frombuffer(read_exact(8 * layout.numel), dtype="<f8")
    if fobj.read(1):
        raise FormatError("Trailing bytes after checkpoint values")
    return ParamVector(torch.tensor(values.astype(np.float64)), layout)
