#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Dataset construction and trigger injection.

Contains the synthetic generators (Gaussian clusters, template images, bag of
words), pixel-pattern and token triggers, poisoned-set assembly and the
on-disk dataset codecs.
"""
import gzip
import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from bclab.common import DATASET_MAGIC, DTYPE, DataRoleError, FormatError, ShapeError,\
    make_generator

logger = logging.getLogger(__name__)

CLEAN = "clean"
POISONED = "poisoned"

PIXEL_PATTERN = "pixel_pattern"
TOKEN = "token"

_PixelEntry = Tuple[int, int, int, float]


@dataclass(frozen=True)
class TriggerSpec:
    """Definition of a backdoor trigger.

    Args:
        kind: "pixel_pattern" or "token".
        target_class: Class the trigger should drive the model to.
        pixels: (row, col, channel, value) entries (pixel_pattern only).
        token: Feature index of the trigger word (token only).
        count: Number of trigger words injected (token only).
        placement_note: Free text describing the placement.
    """
    kind: str
    target_class: int = 0
    pixels: Tuple[_PixelEntry, ...] = ()
    token: Optional[int] = None
    count: float = 1.0
    placement_note: str = ""

    def __post_init__(self):
        if self.kind not in (PIXEL_PATTERN, TOKEN):
            raise ValueError(f"Unknown trigger kind '{self.kind}'")
        if self.kind == TOKEN and self.token is None:
            raise ValueError("Token trigger without token index")
        object.__setattr__(self, "pixels",
                           tuple((int(row), int(col), int(chan), float(val))
                                 for row, col, chan, val in self.pixels))


    def validate(self, input_shape: Sequence[int], classes: int):
        """Checks the trigger against an input shape and a class count.

        Raises:
            ShapeError: if a coordinate is out of bounds or the target class
                does not exist.
        """
        if not 0 <= self.target_class < classes:
            raise ShapeError(f"Target class {self.target_class} out of range for {classes} classes")
        input_shape = tuple(input_shape)
        if self.kind == PIXEL_PATTERN:
            if len(input_shape) != 3:
                raise ShapeError(f"Pixel trigger on non-image input of shape {input_shape}")
            height, width, channels = input_shape
            for row, col, chan, _ in self.pixels:
                if not (0 <= row < height and 0 <= col < width and 0 <= chan < channels):
                    msg = f"Trigger pixel ({row}, {col}, {chan}) outside of image {input_shape}"
                    raise ShapeError(msg)
        elif not 0 <= self.token < input_shape[-1]:
            raise ShapeError(f"Trigger token {self.token} outside of vocabulary {input_shape[-1]}")


def default_pixel_trigger(image_shape: Sequence[int], target_class: int = 0) -> TriggerSpec:
    """The default 5-pixel pattern: an X in the bottom-right 3x3 corner at full intensity."""
    height, width = image_shape[0], image_shape[1]
    corner = [(2, 2), (0, 2), (2, 0), (1, 1), (0, 0)]
    pixels = tuple((height - 3 + row, width - 3 + col, 0, 1.0) for row, col in corner)
    return TriggerSpec(PIXEL_PATTERN, target_class, pixels=pixels,
                       placement_note="X in the bottom-right 3x3 corner, channel 0")


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs with class labels and a role tag.

    Args:
        inputs: Tensor of shape (count, *input_shape).
        labels: Integer tensor of shape (count,).
        classes: Number of classes.
        role: "clean" (D) or "poisoned" (D*).
        target: Trigger target of a poisoned dataset.
    """
    inputs: torch.Tensor
    labels: torch.Tensor
    classes: int
    role: str = CLEAN
    target: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", torch.as_tensor(self.inputs, dtype=DTYPE))
        object.__setattr__(self, "labels", torch.as_tensor(self.labels, dtype=torch.int64))
        if self.inputs.shape[0] != self.labels.shape[0]:
            msg = f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            raise ShapeError(msg)
        if len(self) and (int(self.labels.max()) >= self.classes or int(self.labels.min()) < 0):
            raise ShapeError(f"Labels out of range for {self.classes} classes")
        if self.role not in (CLEAN, POISONED):
            raise ValueError(f"Unknown dataset role '{self.role}'")
        if self.role == POISONED:
            if self.target is None:
                raise ValueError("Poisoned dataset without trigger target")
            if len(self) and not bool((self.labels == self.target).all()):
                raise ShapeError("Poisoned dataset with labels other than the target")


    def __len__(self):
        return self.labels.shape[0]


    @property
    def input_shape(self) -> Tuple[int, ...]:
        """Shape of a single input"""
        return tuple(self.inputs.shape[1:])


    def subset(self, indices) -> "LabeledDataset":
        """Dataset restricted to the given indices (same role)."""
        indices = torch.as_tensor(indices, dtype=torch.int64)
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices])


    def require_role(self, role: str):
        """Raises DataRoleError unless the dataset carries the given role."""
        if self.role != role:
            raise DataRoleError(f"Expected a {role} dataset, got a {self.role} one")


@dataclass(frozen=True)
class MixedDataset:
    """Training set D u D* with the clean-instance bookkeeping anchoring needs.

    ``clean_index[i]`` is the index of instance i in the clean dataset D, or
    -1 if the instance is poisoned.
    """
    inputs: torch.Tensor
    labels: torch.Tensor
    clean_index: torch.Tensor
    classes: int

    def __len__(self):
        return self.labels.shape[0]


def mix(clean: LabeledDataset, poisoned: Optional[LabeledDataset] = None) -> MixedDataset:
    """Concatenates D and D* into one training set (clean instances first)."""
    clean.require_role(CLEAN)
    clean_index = torch.arange(len(clean), dtype=torch.int64)
    if poisoned is None or not len(poisoned):
        return MixedDataset(clean.inputs, clean.labels, clean_index, clean.classes)
    poisoned.require_role(POISONED)
    if poisoned.input_shape != clean.input_shape:
        raise ShapeError("Clean and poisoned inputs differ in shape")
    poisoned_index = torch.full((len(poisoned),), -1, dtype=torch.int64)
    return MixedDataset(torch.cat([clean.inputs, poisoned.inputs]),
                        torch.cat([clean.labels, poisoned.labels]),
                        torch.cat([clean_index, poisoned_index]),
                        clean.classes)


def apply_trigger(x: torch.Tensor, spec: TriggerSpec) -> torch.Tensor:
    """Returns a triggered copy of a single input or of a batch of inputs.

    Pixel triggers overwrite the listed (row, col, channel) entries of
    channel-last images with the listed values. Token triggers increment the
    count of the trigger word. All other entries stay unchanged.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    result = x.clone()
    if spec.kind == PIXEL_PATTERN:
        if x.dim() < 3:
            raise ShapeError(f"Pixel trigger on non-image input of shape {tuple(x.shape)}")
        height, width, channels = x.shape[-3:]
        for row, col, chan, value in spec.pixels:
            if not (0 <= row < height and 0 <= col < width and 0 <= chan < channels):
                msg = f"Trigger pixel ({row}, {col}, {chan}) outside of image {tuple(x.shape[-3:])}"
                raise ShapeError(msg)
            result[..., row, col, chan] = value
    else:
        if not 0 <= spec.token < x.shape[-1]:
            raise ShapeError(f"Trigger token {spec.token} outside of vocabulary {x.shape[-1]}")
        result[..., spec.token] += spec.count
    return result


def poison(data: LabeledDataset, ratio: float, spec: TriggerSpec, seed: int) -> LabeledDataset:
    """Builds the poisoned set D* from a clean set D.

    Selects round(ratio * |D|) instances uniformly without replacement, applies
    the trigger and relabels them to the target class. D itself is not touched.

    Args:
        data: Clean dataset D (non-empty).
        ratio: Poisoning ratio in (0, 1].
        spec: Trigger specification.
        seed: Seed of the selection.

    Returns:
        Dataset with role "poisoned".
    """
    if not len(data):
        raise ValueError("Can not poison an empty dataset")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"Poisoning ratio {ratio} outside of (0, 1]")
    spec.validate(data.input_shape, data.classes)
    count = int(math.floor(ratio * len(data) + 0.5))
    gen = make_generator(seed)
    chosen = torch.sort(torch.randperm(len(data), generator=gen)[:count]).values
    inputs = apply_trigger(data.inputs[chosen], spec)
    labels = torch.full((count,), spec.target_class, dtype=torch.int64)
    logger.debug("Poisoned %d of %d instances", count, len(data))
    return LabeledDataset(inputs, labels, data.classes, role=POISONED, target=spec.target_class)


def trigger_eval_set(data: LabeledDataset, spec: TriggerSpec) -> LabeledDataset:
    """Triggered copies of all instances whose original label is not the target.

    Raises:
        ValueError: if no instance survives the filter.
    """
    keep = torch.nonzero(data.labels != spec.target_class).reshape(-1)
    if not keep.numel():
        raise ValueError("No non-target instance left for attack success evaluation")
    inputs = apply_trigger(data.inputs[keep], spec)
    labels = torch.full((keep.numel(),), spec.target_class, dtype=torch.int64)
    return LabeledDataset(inputs, labels, data.classes, role=POISONED, target=spec.target_class)


def split(data: LabeledDataset, test_fraction: float, seed: int):
    """Random train/test split.

    Returns:
        Tuple (train, test) of clean datasets.
    """
    gen = make_generator(seed)
    perm = torch.randperm(len(data), generator=gen)
    ntest = int(math.floor(test_fraction * len(data) + 0.5))
    return (data.subset(torch.sort(perm[ntest:]).values),
            data.subset(torch.sort(perm[:ntest]).values))


def take(data: LabeledDataset, count: int, seed: int) -> LabeledDataset:
    """Uniform random subset of the given size (all of D if count >= |D|)."""
    if count >= len(data):
        return data
    gen = make_generator(seed)
    return data.subset(torch.sort(torch.randperm(len(data), generator=gen)[:count]).values)


def _balanced_labels(size: int, classes: int, gen: torch.Generator) -> torch.Tensor:
    labels = torch.arange(size, dtype=torch.int64) % classes
    return labels[torch.randperm(size, generator=gen)]


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian clusters with a shared diagonal covariance.

    Args:
        dims: Number of features.
        classes: Number of classes.
        stds: Per-feature standard deviations (length dims).
        separation: Distance scale of the class means.
        size: Number of instances (at least classes).
        seed: Seed of the generator.
    """
    dims: int
    classes: int
    stds: Tuple[float, ...]
    separation: float = 2.0
    size: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stds", tuple(float(std) for std in self.stds))
        if len(self.stds) != self.dims:
            raise ShapeError(f"{len(self.stds)} standard deviations for {self.dims} features")
        if any(std < 0.0 for std in self.stds):
            raise ValueError("Standard deviations must not be negative")
        if self.size < self.classes:
            raise ValueError("Dataset size must be at least the number of classes")
        if not self.separation > 0.0:
            raise ValueError("Class separation must be positive")


    def class_means(self) -> torch.Tensor:
        """Class means: separation times e_(c mod dims), centered over the classes."""
        means = torch.zeros((self.classes, self.dims), dtype=DTYPE)
        for cls in range(self.classes):
            means[cls, cls % self.dims] = self.separation
        return means - means.mean(dim=0, keepdim=True)


def synth_clusters(spec: SynthSpec) -> LabeledDataset:
    """Class c is drawn from N(mu_c, diag(stds^2)); balanced and deterministic by seed."""
    gen = make_generator(spec.seed, "clusters")
    labels = _balanced_labels(spec.size, spec.classes, gen)
    noise = torch.randn((spec.size, spec.dims), generator=gen, dtype=DTYPE)
    stds = torch.tensor(spec.stds, dtype=DTYPE)
    inputs = spec.class_means()[labels] + noise * stds
    return LabeledDataset(inputs, labels, spec.classes)


@dataclass(frozen=True)
class ImageSynthSpec:
    """Template images: every class owns a smooth random template, instances add noise."""
    classes: int = 10
    size: int = 4000
    height: int = 16
    width: int = 16
    channels: int = 3
    noise: float = 0.15
    seed: int = 0


def synth_images(spec: ImageSynthSpec) -> LabeledDataset:
    """Channel-last images in [0, 1] drawn around smooth per-class templates."""
    gen = make_generator(spec.seed, "images")
    coarse = torch.rand((spec.classes, spec.channels, 4, 4), generator=gen, dtype=DTYPE)
    templates = F.interpolate(coarse, size=(spec.height, spec.width), mode="bilinear",
                              align_corners=True)
    templates = 0.2 + 0.6 * templates.permute(0, 2, 3, 1)
    labels = _balanced_labels(spec.size, spec.classes, gen)
    noise = torch.randn((spec.size, spec.height, spec.width, spec.channels), generator=gen,
                        dtype=DTYPE)
    inputs = torch.clamp(templates[labels] + spec.noise * noise, 0.0, 1.0)
    return LabeledDataset(inputs, labels, spec.classes)


@dataclass(frozen=True)
class BowSpec:
    """Bag-of-words documents with Zipf word frequencies and class-specific words.

    Args:
        vocab: Vocabulary size.
        classes: Number of classes.
        doc_length: Words per document.
        size: Number of documents.
        boost: Frequency multiplier of the class-specific words.
        class_words: Number of class-specific words per class.
        seed: Seed of the generator.
    """
    vocab: int = 200
    classes: int = 2
    doc_length: int = 40
    size: int = 2000
    boost: float = 6.0
    class_words: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.classes * self.class_words >= self.vocab:
            raise ValueError("Vocabulary too small for the class-specific words")


    def word_frequencies(self) -> torch.Tensor:
        """Per-class word distributions, shape (classes, vocab)."""
        base = 1.0 / torch.arange(1, self.vocab + 1, dtype=DTYPE)
        freqs = base.repeat(self.classes, 1)
        for cls in range(self.classes):
            start = cls * self.class_words
            freqs[cls, start:start + self.class_words] *= self.boost
        return freqs / freqs.sum(dim=1, keepdim=True)


    @property
    def rare_token(self) -> int:
        """Index of the least frequent word (the default trigger word)."""
        return self.vocab - 1


def synth_bow(spec: BowSpec) -> LabeledDataset:
    """Word-count feature vectors of synthetic documents."""
    gen = make_generator(spec.seed, "bow")
    labels = _balanced_labels(spec.size, spec.classes, gen)
    freqs = spec.word_frequencies()
    words = torch.multinomial(freqs[labels], spec.doc_length, replacement=True, generator=gen)
    inputs = torch.zeros((spec.size, spec.vocab), dtype=DTYPE)
    inputs.scatter_add_(1, words, torch.ones_like(words, dtype=DTYPE))
    return LabeledDataset(inputs, labels, spec.classes)


_UINT = struct.Struct("<I")


def write_dataset(data: LabeledDataset, fobj: Union[BinaryIO, str]):
    """Writes a dataset in the BCDS1 format.

    Header: magic, count, input rank, input dims, class count (little-endian
    unsigned 32-bit integers), followed by the inputs as little-endian 64-bit
    floats and the labels as little-endian 32-bit integers.
    """
    if isinstance(fobj, str):
        with open(fobj, "wb") as fp:
            write_dataset(data, fp)
        return
    fobj.write(DATASET_MAGIC)
    fobj.write(_UINT.pack(len(data)))
    fobj.write(_UINT.pack(len(data.input_shape)))
    for dim in data.input_shape:
        fobj.write(_UINT.pack(dim))
    fobj.write(_UINT.pack(data.classes))
    fobj.write(data.inputs.detach().cpu().numpy().astype("<f8").tobytes())
    fobj.write(data.labels.cpu().numpy().astype("<i4").tobytes())


def read_dataset(fobj: Union[BinaryIO, str]) -> LabeledDataset:
    """Reads a BCDS1 dataset (role clean)."""
    if isinstance(fobj, str):
        with open(fobj, "rb") as fp:
            return read_dataset(fp)

    def read_exact(nbytes):
        data = fobj.read(nbytes)
        if len(data) != nbytes:
            raise FormatError("Truncated dataset file")
        return data

    def read_uint():
        return _UINT.unpack(read_exact(_UINT.size))[0]

    if read_exact(len(DATASET_MAGIC)) != DATASET_MAGIC:
        raise FormatError("Not a BCDS1 dataset (invalid magic bytes)")
    count = read_uint()
    shape = tuple(read_uint() for _ in range(read_uint()))
    classes = read_uint()
    nvalues = count * int(np.prod(shape, dtype=np.int64))
    inputs = np.frombuffer(read_exact(8 * nvalues), dtype="<f8").reshape((count,) + shape)
    labels = np.frombuffer(read_exact(4 * count), dtype="<i4")
    return LabeledDataset(torch.tensor(inputs.astype(np.float64)),
                          torch.tensor(labels.astype(np.int64)), classes)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fp:
        raw = fp.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise FormatError(f"Not an IDX file: '{path}'")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"Truncated IDX header: '{path}'")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    body = raw[4 + 4 * ndim:]
    if len(body) != nbytes:
        raise FormatError(f"Truncated IDX file: '{path}'")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def load_idx(images_path: str, labels_path: str, classes: Optional[int] = None) -> LabeledDataset:
    """Loads an image dataset stored in the IDX format (e.g. MNIST-like files).

    Unsigned byte images are scaled to [0, 1]; images get a trailing channel
    axis if they have none.
    """
    images = _read_idx(images_path).astype(np.float64)
    labels = _read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[..., None]
    if images.max(initial=0.0) > 1.0:
        images = images / 255.0
    if classes is None:
        classes = int(labels.max()) + 1
    return LabeledDataset(torch.tensor(images), torch.tensor(labels), classes)
