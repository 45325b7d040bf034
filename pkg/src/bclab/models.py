#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
The model zoo: binary logistic regression, linear softmax classifier, small MLP
and a small convolutional net with tapped hidden states.

All models take batched inputs and return logits of shape (batch, classes).
Image models take channel-last images in raw pixel space.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
import torch.nn.functional as F

from bclab.common import DTYPE, ShapeError
from bclab.diffcore import ParamVector, functional_forward

MODEL_NAMES = ("logistic", "linear", "mlp", "convnet")

_Taps = List[Tuple[str, torch.Tensor]]


@dataclass(frozen=True)
class HiddenStateSet:
    """Ordered, named hidden states of a forward pass.

    Every state is flattened per instance to shape (batch, dim). The last
    entry is always the logits.
    """
    names: Tuple[str, ...]
    states: Tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.states)


    @property
    def logits(self) -> torch.Tensor:
        """The last tap"""
        return self.states[-1]


    @property
    def dims(self) -> Tuple[int, ...]:
        """Per-instance dimension of every tap"""
        return tuple(state.shape[-1] for state in self.states)


    def select(self, index) -> "HiddenStateSet":
        """Restricts all taps to the given instances."""
        return HiddenStateSet(self.names, tuple(state[index] for state in self.states))


    def detach(self) -> "HiddenStateSet":
        """Copy without autograd history."""
        return HiddenStateSet(self.names, tuple(state.detach() for state in self.states))


class TappedModel(nn.Module):
    """Base class of the zoo.

    Subclasses implement :meth:`_taps` returning the list of (name, state)
    pairs; the forward pass returns the last of them (the logits).

    Args:
        input_shape: Shape of a single input instance.
        classes: Number of classes.
    """

    def __init__(self, input_shape: Sequence[int], classes: int):
        super().__init__()
        self.input_shape: Tuple[int, ...] = tuple(input_shape)
        self.classes: int = classes


    def forward(self, x: torch.Tensor, return_taps: bool = False):
        if tuple(x.shape[1:]) != self.input_shape:
            msg = f"Input of shape {tuple(x.shape[1:])} for model expecting {self.input_shape}"
            raise ShapeError(msg)
        taps = self._taps(x.to(DTYPE))
        if return_taps:
            return taps
        return taps[-1][1]


    def _taps(self, x: torch.Tensor) -> _Taps:
        raise NotImplementedError


class LogisticRegression(TappedModel):
    """Binary logistic regression, p(y=+1|x) = sigmoid(w^T x + b).

    The logits are (0, w^T x + b), so that the softmax of the logits yields
    (p(y=-1|x), p(y=+1|x)) and the cross entropy equals log(1 + exp(-y w^T x)).
    """

    def __init__(self, dims: int, bias: bool = True):
        super().__init__((dims,), 2)
        self.linear = nn.Linear(dims, 1, bias=bias, dtype=DTYPE)


    def _taps(self, x):
        score = self.linear(x)
        logits = torch.cat([torch.zeros_like(score), score], dim=1)
        return [("input", x), ("logits", logits)]


class LinearSoftmax(TappedModel):
    """Linear softmax classifier, s_i = w_i^T x (+ b_i)."""

    def __init__(self, dims: int, classes: int, bias: bool = True):
        super().__init__((dims,), classes)
        self.linear = nn.Linear(dims, classes, bias=bias, dtype=DTYPE)


    def _taps(self, x):
        return [("input", x), ("logits", self.linear(x))]


class MLP(TappedModel):
    """Fully connected ReLU network."""

    def __init__(self, dims: int, hidden: Sequence[int], classes: int):
        super().__init__((dims,), classes)
        sizes = [dims] + list(hidden)
        self.hidden = nn.ModuleList(
            [nn.Linear(nin, nout, dtype=DTYPE) for nin, nout in zip(sizes[:-1], sizes[1:])])
        self.head = nn.Linear(sizes[-1], classes, dtype=DTYPE)


    def _taps(self, x):
        taps = []
        for ind, layer in enumerate(self.hidden):
            x = F.relu(layer(x))
            taps.append((f"hidden{ind + 1}", x))
        taps.append(("logits", self.head(x)))
        return taps


class SmallConvNet(TappedModel):
    """Small convolutional net for channel-last images.

    Stem convolution, two convolutional blocks (each followed by 2x2 max
    pooling), adaptive average pooling to 2x2, two hidden dense layers and the
    classification head. Taps are post-activation: stem, block1, block2, pool,
    dense1, dense2 and logits (7 in total).

    Args:
        image_shape: (height, width, channels) of the input images.
        classes: Number of classes.
        width: Channels of the stem and the first block (doubled in the second).
        hidden: Units of the two hidden dense layers.
    """

    def __init__(self, image_shape: Sequence[int], classes: int, width: int = 8,
                 hidden: int = 32):
        super().__init__(image_shape, classes)
        channels = self.input_shape[2]
        self.stem = nn.Conv2d(channels, width, 3, padding=1, dtype=DTYPE)
        self.block1 = nn.Conv2d(width, width, 3, padding=1, dtype=DTYPE)
        self.block2 = nn.Conv2d(width, 2 * width, 3, padding=1, dtype=DTYPE)
        self.dense1 = nn.Linear(8 * width, hidden, dtype=DTYPE)
        self.dense2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.head = nn.Linear(hidden, classes, dtype=DTYPE)


    def _taps(self, x):
        batch = x.shape[0]
        x = x.permute(0, 3, 1, 2)
        stem = F.relu(self.stem(x))
        block1 = F.max_pool2d(F.relu(self.block1(stem)), 2)
        block2 = F.max_pool2d(F.relu(self.block2(block1)), 2)
        pool = F.adaptive_avg_pool2d(block2, (2, 2)).reshape(batch, -1)
        dense1 = F.relu(self.dense1(pool))
        dense2 = F.relu(self.dense2(dense1))
        logits = self.head(dense2)
        return [("stem", stem.reshape(batch, -1)), ("block1", block1.reshape(batch, -1)),
                ("block2", block2.reshape(batch, -1)), ("pool", pool), ("dense1", dense1),
                ("dense2", dense2), ("logits", logits)]


def reset_parameters(model: nn.Module, generator: torch.Generator):
    """Re-initializes all linear and convolutional layers from a generator.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), which
    is the default range of torch for these layers.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                fan_in = module.weight[0].numel()
                bound = fan_in ** -0.5
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=generator)


def build_model(name: str, input_shape: Sequence[int], classes: int,
                hidden: Union[int, Sequence[int]] = 32, width: int = 8,
                generator: Optional[torch.Generator] = None) -> TappedModel:
    """Builds a model of the zoo by name.

    Args:
        name: One of "logistic", "linear", "mlp" and "convnet".
        input_shape: Shape of a single input instance.
        classes: Number of classes (must be 2 for "logistic").
        hidden: Hidden layer size(s) (mlp, convnet).
        width: Channel width (convnet).
        generator: Random generator for the initialization. Zero-initialized
            (logistic, linear) or torch-default initialized otherwise if None.

    Returns:
        The model with 64-bit parameters.
    """
    input_shape = tuple(input_shape)
    if name in ("logistic", "linear", "mlp") and len(input_shape) != 1:
        raise ShapeError(f"Model '{name}' expects flat feature vectors, got {input_shape}")
    if name == "logistic":
        if classes != 2:
            raise ShapeError("Logistic regression is a two-class model")
        model = LogisticRegression(input_shape[0])
    elif name == "linear":
        model = LinearSoftmax(input_shape[0], classes)
    elif name == "mlp":
        sizes = [hidden] if isinstance(hidden, int) else list(hidden)
        model = MLP(input_shape[0], sizes, classes)
    elif name == "convnet":
        if len(input_shape) != 3:
            msg = f"Model 'convnet' expects (height, width, channels), got {input_shape}"
            raise ShapeError(msg)
        model = SmallConvNet(input_shape, classes, width=width,
                             hidden=hidden if isinstance(hidden, int) else hidden[0])
    else:
        raise ValueError(f"Unknown model '{name}' (known: {', '.join(MODEL_NAMES)})")
    if generator is not None:
        reset_parameters(model, generator)
    elif name in ("logistic", "linear"):
        with torch.no_grad():
            for par in model.parameters():
                par.zero_()
    return model


def _batched(model: TappedModel, x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=DTYPE)
    if tuple(x.shape) == model.input_shape:
        return x.unsqueeze(0), True
    if tuple(x.shape[1:]) != model.input_shape:
        msg = f"Input of shape {tuple(x.shape)} for model expecting {model.input_shape}"
        raise ShapeError(msg)
    return x, False


def predict_logits(model: TappedModel, x: torch.Tensor,
                   theta: Optional[ParamVector] = None) -> torch.Tensor:
    """Deterministic forward pass.

    Args:
        model: Model of the zoo.
        x: A single input or a batch of inputs.
        theta: Parameters to use instead of the model's own ones.

    Returns:
        Logits, of shape (classes,) for a single input, (batch, classes) otherwise.
    """
    xbatch, single = _batched(model, x)
    if theta is None:
        logits = model(xbatch)
    else:
        logits = functional_forward(model, theta, xbatch)
    return logits[0] if single else logits


def hidden_states(model: TappedModel, x: torch.Tensor,
                  theta: Optional[ParamVector] = None) -> HiddenStateSet:
    """Ordered post-activation taps of a forward pass; the last one equals the logits."""
    if not isinstance(model, TappedModel):
        raise NotImplementedError(f"Model {type(model).__name__} does not support taps")
    xbatch, _ = _batched(model, x)
    if theta is None:
        taps = model(xbatch, return_taps=True)
    else:
        taps = functional_call_taps(model, theta, xbatch)
    names, states = zip(*taps)
    return HiddenStateSet(tuple(names), tuple(states))


def functional_call_taps(model: TappedModel, theta: ParamVector, x: torch.Tensor) -> _Taps:
    """Tapped forward pass with parameters taken from a ParamVector."""
    return torch.func.functional_call(model, theta.as_params(), (x,), {"return_taps": True})


def softmax(s: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last dimension."""
    shifted = s - s.max(dim=-1, keepdim=True).values
    expo = torch.exp(shifted)
    return expo / expo.sum(dim=-1, keepdim=True)


def logistic_binary(w: Union[ParamVector, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Probability of y = +1 under binary logistic regression, sigmoid(w^T x)."""
    wvec = w.values if isinstance(w, ParamVector) else torch.as_tensor(w, dtype=DTYPE)
    x = torch.as_tensor(x, dtype=DTYPE)
    if wvec.shape[-1] != x.shape[-1]:
        raise ShapeError(f"Weight of length {wvec.shape[-1]} for input of length {x.shape[-1]}")
    return torch.sigmoid(x @ wvec)


def logistic_loss(w: Union[ParamVector, torch.Tensor], x: torch.Tensor,
                  y: torch.Tensor) -> torch.Tensor:
    """Per-instance loss log(1 + exp(-y w^T x)) with labels y in {-1, +1}."""
    wvec = w.values if isinstance(w, ParamVector) else torch.as_tensor(w, dtype=DTYPE)
    x = torch.as_tensor(x, dtype=DTYPE)
    return F.softplus(-torch.as_tensor(y, dtype=DTYPE) * (x @ wvec))
