#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Experiment configuration schema.

A configuration file is read with :func:`bclab.cfgio.load` and validated into
an :class:`ExperimentConfig`. Every section is a frozen dataclass; absent
keys take the defaults declared here, unknown keys are rejected. Validation
errors are raised as ConfigError naming the dotted field, e.g.
``field 'optimizer.learning_rate': must be positive``.
"""
import hashlib
import math
import os
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from typing import Any, Dict, Tuple, Union

from bclab import cfgio
from bclab.cfgdict import canonical_text, unflatten
from bclab.common import LAMBDA_GRID, ConfigError
from bclab.defense import MitigationConfig, NoiseProbe, UAPConfig
from bclab.diffcore import EarlyStop, OptimizerConfig
from bclab.landscape import GridSpec
from bclab.models import MODEL_NAMES
from bclab.objectives import GROUP_AVE, HIDDEN_MODES, OBJECTIVE_KINDS, ObjectiveSpec, PGDSpec
from bclab.poison import PIXEL_PATTERN, TOKEN

DATASET_KINDS = ("clusters", "images", "bow", "file", "idx")

TRIGGER_KINDS = ("default", PIXEL_PATTERN, TOKEN)

INIT_MODES = ("clean", "random")

# Class counts used when a synthetic dataset does not set one
_DEFAULT_CLASSES = {"clusters": 2, "images": 10, "bow": 2}

# Name of the persisted, fully resolved configuration in a run directory
CONFIG_FILE = "config.lcf"


def _fail(name: str, msg: str):
    raise ConfigError(f"field '{name}': {msg}")


def _ints():
    return {"item": int}


@dataclass(frozen=True)
class DatasetConfig:
    """Data source.

    ``classes = 0`` selects the default of the kind (or the labels found in
    the files). ``stds`` empty gives the clusters a linear ramp of feature
    standard deviations from 0.1 to 2.0.
    """
    kind: str = "clusters"
    classes: int = 0
    size: int = 2000
    dims: int = 20
    stds: Tuple[float, ...] = ()
    separation: float = 2.0
    height: int = 16
    width: int = 16
    channels: int = 3
    noise: float = 0.15
    vocab: int = 200
    doc_length: int = 40
    path: str = ""
    images: str = ""
    labels: str = ""
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            _fail("dataset.kind", f"unknown kind '{self.kind}' (known: {', '.join(DATASET_KINDS)})")
        if self.classes < 0 or self.classes == 1:
            _fail("dataset.classes", "must be at least 2")
        if self.size < 1:
            _fail("dataset.size", "must be a positive integer")
        if self.stds and len(self.stds) != self.dims:
            _fail("dataset.stds", f"{len(self.stds)} values for {self.dims} features")
        if not 0.0 < self.test_fraction < 1.0:
            _fail("dataset.test_fraction", "must be in (0, 1)")
        required = {"file": ("path",), "idx": ("images", "labels")}.get(self.kind, ())
        for name in required:
            path = getattr(self, name)
            if not path:
                _fail(f"dataset.{name}", f"needed for kind {self.kind}")
            if not os.path.isfile(path):
                _fail(f"dataset.{name}", f"file '{path}' not found")


    @property
    def resolved_classes(self) -> int:
        """Class count of a synthetic dataset (0 for file based ones without a setting)"""
        return self.classes or _DEFAULT_CLASSES.get(self.kind, 0)


    @property
    def resolved_stds(self) -> Tuple[float, ...]:
        """Feature standard deviations of the clusters"""
        if self.stds:
            return self.stds
        if self.dims == 1:
            return (1.0,)
        return tuple(0.1 + 1.9 * ind / (self.dims - 1) for ind in range(self.dims))


@dataclass(frozen=True)
class ModelConfig:
    """Model of the zoo and its size."""
    name: str = "mlp"
    hidden: Tuple[int, ...] = field(default=(32,), metadata=_ints())
    width: int = 8

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            _fail("model.name", f"unknown model '{self.name}' (known: {', '.join(MODEL_NAMES)})")
        if not self.hidden or any(size < 1 for size in self.hidden):
            _fail("model.hidden", "needs positive layer sizes")
        if self.width < 1:
            _fail("model.width", "must be a positive integer")


@dataclass(frozen=True)
class OptimizerSection:
    """SGD settings; ``eval_interval = 0`` evaluates once per pass over the
    data, ``early_stop = 0`` disables early stopping."""
    learning_rate: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iterations: int = 2000
    eval_interval: int = 0
    milestones: Tuple[int, ...] = field(default=(), metadata=_ints())
    early_stop: int = 0
    monitor: str = "asr_plus_acc"

    def __post_init__(self):
        if self.early_stop < 0:
            _fail("early_stop", "must be non-negative")
        self.to_optimizer()


    def to_optimizer(self) -> OptimizerConfig:
        """The OptimizerConfig of the training loop."""
        early_stop = EarlyStop(self.early_stop, self.monitor) if self.early_stop else None
        return OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                               momentum=self.momentum, weight_decay=self.weight_decay,
                               max_iterations=self.max_iterations,
                               eval_interval=self.eval_interval or None,
                               early_stop=early_stop, milestones=self.milestones)


@dataclass(frozen=True)
class PGDSection:
    norm: str = "2"
    radius: float = 1.0


@dataclass(frozen=True)
class TeacherSection:
    """KD teacher; width 0 and no hidden sizes use the clean model itself."""
    width: int = 0
    hidden: Tuple[int, ...] = field(default=(), metadata=_ints())
    seed: int = 1

    @property
    def is_clean_model(self) -> bool:
        """Whether the clean model serves as the teacher"""
        return not self.width and not self.hidden


@dataclass(frozen=True)
class ObjectiveConfig:
    ALIASES = {"lambda": "lam"}

    kind: str = "plain"
    lam: float = 0.0
    gamma: float = 0.9
    hidden_mode: str = GROUP_AVE
    pgd: PGDSection = field(default_factory=PGDSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            _fail("objective.kind", f"unknown objective '{self.kind}'")
        if self.hidden_mode not in HIDDEN_MODES:
            _fail("objective.hidden_mode", f"unknown mode '{self.hidden_mode}'")
        if not self.lam >= 0.0:
            _fail("objective.lambda", "must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            _fail("objective.gamma", "must be in [0, 1]")
        self.pgd_spec()


    def pgd_spec(self) -> PGDSpec:
        """Ball constraint of the projected variant."""
        norm = self.pgd.norm.lower()
        if norm not in ("2", "2.0", "inf"):
            _fail("objective.pgd.norm", f"must be 2 or inf, got {self.pgd.norm}")
        return PGDSpec(math.inf if norm == "inf" else 2.0, self.pgd.radius)


    def to_spec(self, teacher=None) -> ObjectiveSpec:
        """ObjectiveSpec; the kd teacher model is attached by the runner."""
        return ObjectiveSpec(self.kind, self.lam,
                             pgd=self.pgd_spec() if self.kind == "pgd" else None,
                             hidden_mode=self.hidden_mode, gamma=self.gamma, teacher=teacher)


@dataclass(frozen=True)
class TriggerConfig:
    """Trigger; ``pixels`` lists (row, col, channel, value) quadruples in a
    flat sequence, ``token = -1`` selects the least frequent word (bow) or
    the lowest-variance feature (clusters)."""
    kind: str = "default"
    target: int = 0
    pixels: Tuple[float, ...] = ()
    token: int = -1
    count: float = 1.0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            _fail("trigger.kind", f"unknown kind '{self.kind}'")
        if self.target < 0:
            _fail("trigger.target", "must be non-negative")
        if len(self.pixels) % 4:
            _fail("trigger.pixels", "needs (row, col, channel, value) quadruples")
        if self.kind == PIXEL_PATTERN and not self.pixels:
            _fail("trigger.pixels", "needed for kind pixel_pattern")


    @property
    def pixel_entries(self) -> Tuple[Tuple[int, int, int, float], ...]:
        """The pixel quadruples"""
        flat = self.pixels
        return tuple((int(flat[ind]), int(flat[ind + 1]), int(flat[ind + 2]), float(flat[ind + 3]))
                     for ind in range(0, len(flat), 4))


@dataclass(frozen=True)
class EvaluationConfig:
    """``subsample = 0`` evaluates on the full test split."""
    awp_threshold: float = 5.0
    subsample: int = 0

    def __post_init__(self):
        if not self.awp_threshold > 0.0:
            _fail("evaluation.awp_threshold", "must be positive")
        if self.subsample < 0:
            _fail("evaluation.subsample", "must be non-negative")


@dataclass(frozen=True)
class LandscapeConfig:
    """Plane scan; cells within ``basin_level`` above the clean loss form the basin."""
    steps: int = 41
    margin: float = 1.5
    subsample: int = 1000
    loss_cap: float = 1e3
    threshold: float = 0.95
    basin_level: float = 0.5
    scratch: bool = True

    def __post_init__(self):
        self.grid(0)
        if not self.basin_level > 0.0:
            _fail("landscape.basin_level", "must be positive")


    def grid(self, seed: int) -> GridSpec:
        """The scan grid."""
        try:
            return GridSpec(steps=self.steps, margin=self.margin, subsample=self.subsample,
                            loss_cap=self.loss_cap, backdoor_threshold=self.threshold, seed=seed)
        except ValueError as exc:
            raise ConfigError(f"section 'landscape': {exc}") from exc


@dataclass(frozen=True)
class UAPSection:
    strengths: Tuple[float, ...] = UAPConfig.strengths
    steps: int = 50
    step_size: float = 0.01
    clip: bool = True

    def __post_init__(self):
        self.to_uap(0)


    def to_uap(self, target_class: int) -> UAPConfig:
        """UAP search towards the trigger's target class."""
        try:
            return UAPConfig(target_class, self.strengths, self.steps, self.step_size, self.clip)
        except ValueError as exc:
            raise ConfigError(f"section 'defense.uap': {exc}") from exc


@dataclass(frozen=True)
class DefenseConfig:
    noise: NoiseProbe = field(default_factory=NoiseProbe)
    uap: UAPSection = field(default_factory=UAPSection)
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)


@dataclass(frozen=True)
class TheoryConfig:
    """AWP prediction check; ``delta_l_star = 0`` derives the required
    backdoor loss drop from the target confidence."""
    etas: Tuple[float, ...] = (0.0, 0.01, 0.02, 0.05)
    ridge: float = 1e-3
    delta_l_star: float = 0.0

    def __post_init__(self):
        if any(not eta >= 0.0 for eta in self.etas):
            _fail("theory.etas", "must be non-negative")
        if not self.ridge >= 0.0:
            _fail("theory.ridge", "must be non-negative")
        if not self.delta_l_star >= 0.0:
            _fail("theory.delta_l_star", "must be non-negative")


@dataclass(frozen=True)
class SweepConfig:
    lambdas: Tuple[float, ...] = LAMBDA_GRID
    available: Tuple[int, ...] = field(default=(160, 320, 640, 1280), metadata=_ints())

    def __post_init__(self):
        if any(not lam > 0.0 for lam in self.lambdas):
            _fail("sweep.lambdas", "grid entries must be positive")
        if any(count < 1 for count in self.available):
            _fail("sweep.available", "must be positive integers")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of an experiment.

    Attributes:
        seed: Master seed; every random consumer derives a named sub-seed.
        name: Name of the run (directory name below ``output``).
        output: Directory collecting the run directories.
        available: Number of training instances available for backdoor tuning.
        poison_ratio: |D*| / |D|.
        init: "clean" (tune the clean model) or "random" (train from scratch on
            the full training split).
    """
    seed: int = 0
    name: str = "experiment"
    output: str = "runs"
    available: int = 640
    poison_ratio: float = 0.5
    init: str = "clean"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    clean: OptimizerSection = field(
        default_factory=lambda: OptimizerSection(learning_rate=0.05, max_iterations=3000))
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)

    def __post_init__(self):
        if self.available < 1:
            _fail("available", "must be a positive integer")
        if not 0.0 < self.poison_ratio <= 1.0:
            _fail("poison_ratio", "must be in (0, 1]")
        if self.init not in INIT_MODES:
            _fail("init", f"must be one of {', '.join(INIT_MODES)}")
        if not self.name or os.sep in self.name:
            _fail("name", "must be a non-empty plain directory name")


    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Validated configuration from a nested dictionary.

        Raises:
            ConfigError: naming the first offending field.
        """
        return _build(cls, data, "")


    @classmethod
    def load(cls, cfgfile: str) -> "ExperimentConfig":
        """Loads and validates a configuration file."""
        return cls.from_dict(cfgio.load(cfgfile))


    def to_dict(self) -> dict:
        """Fully resolved nested dictionary (defaults included)."""
        return _to_dict(self)


    def dump(self, cfgfile):
        """Writes the resolved configuration in the lab configuration language."""
        cfgio.dump(self.to_dict(), cfgfile)


    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with dotted keys replaced, e.g. ``{"objective.lambda": 0.1}``."""
        merged = self.to_dict()
        _merge(merged, unflatten(overrides))
        return ExperimentConfig.from_dict(merged)


    def config_hash(self) -> str:
        """Hash of every behavior-affecting field (all but name and output)."""
        data = self.to_dict()
        del data["name"], data["output"]
        return _hash(data)


    def dataset_hash(self) -> str:
        """Hash of the fields determining the data and the test split."""
        data = self.to_dict()
        return _hash({"seed": data["seed"], "dataset": data["dataset"], "trigger": data["trigger"]})


    def run_directory(self) -> str:
        """Directory of the run."""
        return os.path.join(self.output, self.name)


def _hash(data: dict) -> str:
    return hashlib.sha256(canonical_text(data).encode("utf-8")).hexdigest()[:16]


def _merge(target: dict, source: dict):
    for key, value in source.items():
        if isinstance(value, dict) and isinstance(target.get(key), dict):
            _merge(target[key], value)
        else:
            target[key] = value


def _default(fld):
    if fld.default is not MISSING:
        return fld.default
    return fld.default_factory()


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        _fail(prefix[:-1], "must be a section")
    aliases = getattr(cls, "ALIASES", {})
    known = {fld.name: fld for fld in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in known:
            _fail(prefix + key, "unknown field")
        kwargs[name] = _coerce(known[name], value, prefix + key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        if prefix and msg.startswith("field '") and not msg.startswith(f"field '{prefix}"):
            raise ConfigError(msg.replace("field '", f"field '{prefix}", 1)) from exc
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"section '{prefix[:-1] or 'top level'}': {exc}") from exc


def _coerce(fld, value, name: str):
    default = _default(fld)
    if is_dataclass(default):
        if isinstance(value, dict):
            # Section defaults declared by the parent stay in force
            merged = _to_dict(default)
            _merge(merged, value)
            value = merged
        return _build(type(default), value, name + ".")
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        itemtype = fld.metadata.get("item", float)
        return tuple(_scalar(itemtype, item, name) for item in items)
    return _scalar(type(default), value, name)


def _scalar(kind, value, name: str) -> Union[bool, int, float, str]:
    if kind is bool:
        if not isinstance(value, bool):
            _fail(name, "must be a logical (yes/no)")
        return value
    if isinstance(value, (list, dict)):
        _fail(name, "must be a single value")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(name, f"must be an integer, got '{value}'")
        return value
    if kind is float:
        if isinstance(value, str) and value.lower() in ("inf", "+inf", "-inf", "nan"):
            return float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(name, f"must be a number, got '{value}'")
        return float(value)
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


def _to_dict(obj) -> dict:
    aliases = {name: alias for alias, name in getattr(type(obj), "ALIASES", {}).items()}
    result = {}
    for fld in fields(obj):
        value = getattr(obj, fld.name)
        if is_dataclass(value):
            value = _to_dict(value)
        elif isinstance(value, tuple):
            if not value:
                continue
            value = list(value)
        result[aliases.get(fld.name, fld.name)] = value
    return result
