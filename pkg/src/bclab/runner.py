#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Experiment pipelines behind the command line verbs.

Every pipeline owns one run directory below ``output`` and writes its
reports there with a header row and a fixed column order:

* run: metrics.csv (one row per epoch), metrics.json (the run record),
  logits.csv, config.lcf and the clean/best/final checkpoints,
* sweep: one run directory per grid value plus sweep.csv,
* scan-basin: grid.csv and basin.csv,
* defend: defense.csv plus uap_<model>.csv or <probe>_<model>.csv curves,
* theory: awp.csv.
"""
import copy
import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import torch
from tqdm import tqdm

from bclab.cfgdict import canonical_text, text_to_data, to_text
from bclab.common import ConfigError, DivergenceError, RecordError, derive_seed, make_generator
from bclab.config import CONFIG_FILE, DatasetConfig, ExperimentConfig, ObjectiveConfig,\
    TeacherSection, TriggerConfig
from bclab.consistency import CSV_COLUMNS, Evaluator, MetricsReport, write_csv
from bclab.defense import finetune_mitigate, nad_mitigate, noise_confident_ratio,\
    targeted_uap_curve, write_uap_csv
from bclab.diffcore import ParamVector, write_checkpoint
from bclab.landscape import CellEvaluator, LossGrid, anchor_table, plane_from_three, scan_plane
from bclab.models import TappedModel, build_model
from bclab.objectives import BackdoorObjective, ObjectiveSpec
from bclab.poison import PIXEL_PATTERN, TOKEN, BowSpec, ImageSynthSpec, LabeledDataset, SynthSpec,\
    TriggerSpec, default_pixel_trigger, load_idx, mix, poison, read_dataset, split,\
    synth_bow, synth_clusters, synth_images, take
from bclab.theory import AWPRow, awp_experiment, write_awp_csv
from bclab.training import TrainResult, train

logger = logging.getLogger(__name__)

RECORD_FILE = "metrics.json"
METRICS_FILE = "metrics.csv"
LOGITS_FILE = "logits.csv"
SWEEP_FILE = "sweep.csv"
GRID_FILE = "grid.csv"
BASIN_FILE = "basin.csv"
AWP_FILE = "awp.csv"
DEFENSE_FILE = "defense.csv"

PROBES = ("noise", "uap", "finetune", "nad")

# Short names accepted by the sweep grid
SWEEP_KEYS = {"lambda": "objective.lambda", "λ": "objective.lambda", "available": "available"}

# Relative distance from the scan plane up to which a model lies on it
PLANE_TOLERANCE = 1e-8


def load_dataset(dataset: DatasetConfig, seed: int) -> LabeledDataset:
    """Generates or reads the full dataset."""
    data_seed = derive_seed(seed, "data")
    kind = dataset.kind
    if kind == "clusters":
        return synth_clusters(SynthSpec(dataset.dims, dataset.resolved_classes,
                                        dataset.resolved_stds, dataset.separation, dataset.size,
                                        data_seed))
    if kind == "images":
        return synth_images(ImageSynthSpec(dataset.resolved_classes, dataset.size, dataset.height,
                                           dataset.width, dataset.channels, dataset.noise,
                                           data_seed))
    if kind == "bow":
        return synth_bow(BowSpec(dataset.vocab, dataset.resolved_classes, dataset.doc_length,
                                 dataset.size, seed=data_seed))
    if kind == "file":
        return read_dataset(dataset.path)
    return load_idx(dataset.images, dataset.labels, dataset.classes or None)


def build_trigger(trigger: TriggerConfig, dataset: DatasetConfig,
                  data: LabeledDataset) -> TriggerSpec:
    """Trigger of the experiment, validated against the data.

    The default trigger is the 5-pixel corner pattern on images and a single
    token otherwise: the least frequent word of a bag-of-words task or the
    feature with the lowest variance.
    """
    shape = data.input_shape
    kind = trigger.kind
    if kind == "default":
        kind = PIXEL_PATTERN if len(shape) == 3 else TOKEN
    if kind == PIXEL_PATTERN:
        if trigger.pixels:
            spec = TriggerSpec(PIXEL_PATTERN, trigger.target, pixels=trigger.pixel_entries)
        else:
            spec = default_pixel_trigger(shape, trigger.target)
    else:
        token = trigger.token
        if token < 0 and dataset.kind == "bow":
            token = shape[-1] - 1
        elif token < 0:
            token = int(torch.argmin(data.inputs.reshape(len(data), -1).var(dim=0)))
        spec = TriggerSpec(TOKEN, trigger.target, token=token, count=trigger.count)
    spec.validate(shape, data.classes)
    return spec


class Lab:
    """Data, trigger and clean model of an experiment.

    Runs differing only in their backdoor settings (objective, optimizer,
    available data, poisoning ratio, init) share one lab, so the clean model
    is trained once.

    Args:
        cfg: Configuration defining data, model and clean training.
        progress: Show progress bars.
    """

    def __init__(self, cfg: ExperimentConfig, progress: bool = False):
        self.cfg = cfg
        self.progress = progress
        self._key = self.key(cfg)
        data = load_dataset(cfg.dataset, cfg.seed)
        self.train, self.test = split(data, cfg.dataset.test_fraction,
                                      derive_seed(cfg.seed, "split"))
        self.trigger = build_trigger(cfg.trigger, cfg.dataset, data)
        self.model = self._new_model(cfg.model.hidden, cfg.model.width, cfg.seed, "init")
        self._theta_clean: Optional[ParamVector] = None
        self._teachers: Dict[TeacherSection, TappedModel] = {}
        logger.info("Data: %d training and %d test instances of shape %s, %d classes",
                    len(self.train), len(self.test), self.train.input_shape, self.train.classes)


    @staticmethod
    def key(cfg: ExperimentConfig) -> Tuple[str, str]:
        """Settings a lab depends on."""
        data = cfg.to_dict()
        return cfg.dataset_hash(), canonical_text({"model": data["model"], "clean": data["clean"]})


    def compatible(self, cfg: ExperimentConfig) -> bool:
        """Whether the lab can serve a run of the given configuration."""
        return self.key(cfg) == self._key


    def _new_model(self, hidden, width: int, seed: int, name: str) -> TappedModel:
        return build_model(self.cfg.model.name, self.train.input_shape, self.train.classes,
                           hidden=list(hidden), width=width,
                           generator=make_generator(seed, name))


    def clean_parameters(self) -> ParamVector:
        """Clean model parameters theta, trained on the full training split on first use.

        Raises:
            DivergenceError: if clean training diverges.
        """
        if self._theta_clean is None:
            logger.info("Training the clean model")
            result = train(self.model, ObjectiveSpec("plain"), self.train,
                           self.cfg.clean.to_optimizer(), derive_seed(self.cfg.seed, "clean"),
                           progress=self.progress)
            if result.diverged:
                raise DivergenceError("Clean training diverged", checkpoint=result.final)
            self._theta_clean = result.final
        return self._theta_clean


    def teacher(self, section: TeacherSection) -> TappedModel:
        """KD teacher: the clean model or a model of its own size trained with its own seed."""
        if section not in self._teachers:
            if section.is_clean_model:
                teacher = copy.deepcopy(self.model)
                self.clean_parameters().load_into(teacher)
            else:
                teacher = self._new_model(section.hidden or self.cfg.model.hidden,
                                          section.width or self.cfg.model.width, section.seed,
                                          "teacher")
                logger.info("Training the KD teacher (width %d, hidden %s)", section.width,
                            section.hidden)
                result = train(teacher, ObjectiveSpec("plain"), self.train,
                               self.cfg.clean.to_optimizer(), derive_seed(section.seed, "teacher"),
                               progress=self.progress)
                result.final.load_into(teacher)
            self._teachers[section] = teacher
        return self._teachers[section]


    def evaluator(self, cfg: ExperimentConfig) -> Evaluator:
        """Monitor of a run: metrics against the clean model on the test split."""
        return Evaluator(self.model, self.clean_parameters(), self.test, self.trigger,
                         cfg.evaluation.awp_threshold, cfg.evaluation.subsample or None,
                         seed=cfg.seed)


    def tune(self, cfg: ExperimentConfig, objective: ObjectiveConfig, init: str,
             monitor: Optional[Evaluator] = None) -> TrainResult:
        """Injects the backdoor.

        With init "clean" the clean model is tuned on ``cfg.available``
        training instances with the tuning optimizer. With init "random" a
        freshly initialized model is trained on the full training split with
        the clean optimizer. Penalties always refer to the clean parameters.
        """
        theta_clean = self.clean_parameters()
        if init == "clean":
            available = take(self.train, cfg.available, derive_seed(cfg.seed, "available"))
            theta0, optimizer = theta_clean, cfg.optimizer.to_optimizer()
        else:
            available = self.train
            scratch = self._new_model(cfg.model.hidden, cfg.model.width, cfg.seed, "scratch")
            theta0, optimizer = ParamVector.from_module(scratch), cfg.clean.to_optimizer()
        poisoned = poison(available, cfg.poison_ratio, self.trigger,
                          derive_seed(cfg.seed, "poison"))
        teacher = self.teacher(objective.teacher) if objective.kind == "kd" else None
        prepared = BackdoorObjective.prepare(objective.to_spec(teacher), self.model, theta_clean,
                                             available)
        logger.info("Tuning (%s, lambda %g, init %s) on %d clean and %d poisoned instances",
                    objective.kind, objective.lam, init, len(available), len(poisoned))
        return train(self.model, prepared, mix(available, poisoned), optimizer, cfg.seed,
                     theta0=theta0, monitor=monitor, progress=self.progress)


@dataclass
class RunRecord:
    """Persisted outcome of a run.

    Attributes:
        config_hash: Hash of the behavior-affecting configuration.
        dataset_hash: Hash of the data defining fields.
        reports: Monitor report of every epoch, the starting point first.
        best_epoch: Epoch with maximal ASR + ACC (earliest on ties).
        checkpoints: Checkpoint file names (relative to the run directory).
        wall_clock: Run time in seconds.
        steps: SGD steps taken.
        diverged: Whether training aborted on a non-finite value.
        stopped_early: Whether early stopping ended training.
    """
    config_hash: str
    dataset_hash: str
    reports: List[MetricsReport] = field(default_factory=list)
    best_epoch: int = 0
    checkpoints: Dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    steps: int = 0
    diverged: bool = False
    stopped_early: bool = False

    @property
    def selected(self) -> MetricsReport:
        """Report of the selected epoch"""
        return self.reports[self.best_epoch]


    def to_dict(self) -> Dict[str, Any]:
        """JSON compatible representation."""
        return {"config_hash": self.config_hash, "dataset_hash": self.dataset_hash,
                "best_epoch": self.best_epoch, "selected": self.selected.to_dict(),
                "reports": [report.to_dict() for report in self.reports],
                "checkpoints": self.checkpoints, "wall_clock": self.wall_clock,
                "steps": self.steps, "diverged": self.diverged,
                "stopped_early": self.stopped_early}


    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        """Inverse of :meth:`to_dict`."""
        return cls(config_hash=data["config_hash"], dataset_hash=data["dataset_hash"],
                   reports=[MetricsReport.from_dict(rep) for rep in data["reports"]],
                   best_epoch=data["best_epoch"], checkpoints=data["checkpoints"],
                   wall_clock=data["wall_clock"], steps=data["steps"],
                   diverged=data["diverged"], stopped_early=data["stopped_early"])


    def write(self, directory: str):
        """Writes the record as metrics.json into the run directory."""
        with open(os.path.join(directory, RECORD_FILE), "w") as fp:
            json.dump(self.to_dict(), fp, indent=2)
            fp.write("\n")


    @classmethod
    def load(cls, directory: str) -> "RunRecord":
        """Reads the record of a run directory.

        Raises:
            RecordError: if the directory holds no readable record.
        """
        path = os.path.join(directory, RECORD_FILE)
        try:
            with open(path, "r") as fp:
                return cls.from_dict(json.load(fp))
        except FileNotFoundError as exc:
            raise RecordError(f"No run record found at '{path}'") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise RecordError(f"Malformed run record '{path}': {exc}") from exc


def _save_checkpoints(directory: str, thetas: Dict[str, ParamVector]) -> Dict[str, str]:
    names = {}
    for name, theta in thetas.items():
        names[name] = f"{name}.bclb"
        write_checkpoint(theta, os.path.join(directory, names[name]))
    return names


def run(cfg: ExperimentConfig, lab: Optional[Lab] = None, directory: Optional[str] = None,
        progress: bool = False) -> RunRecord:
    """Clean training, backdoor tuning, evaluation and persistence of one run.

    Args:
        cfg: Validated configuration.
        lab: Lab to reuse (ignored if it does not match the configuration).
        directory: Run directory, ``cfg.run_directory()`` if not given.
        progress: Show progress bars.

    Returns:
        The run record. A diverged run is persisted and flagged, not raised.
    """
    start = time.perf_counter()
    if lab is None or not lab.compatible(cfg):
        lab = Lab(cfg, progress)
    directory = cfg.run_directory() if directory is None else directory
    os.makedirs(directory, exist_ok=True)
    evaluator = lab.evaluator(cfg)
    result = lab.tune(cfg, cfg.objective, cfg.init, evaluator)
    if result.diverged:
        logger.warning("Run '%s' diverged after %d steps, record flagged", cfg.name, result.steps)

    checkpoints = _save_checkpoints(directory, {"clean": lab.clean_parameters(),
                                                "best": result.best, "final": result.final})
    with open(os.path.join(directory, METRICS_FILE), "w") as fp:
        write_csv(result.reports, fp, prefix={"epoch": list(range(len(result.reports)))})
    with open(os.path.join(directory, LOGITS_FILE), "w") as fp:
        evaluator.write_logits(result.best, fp)
    cfg.dump(os.path.join(directory, CONFIG_FILE))

    record = RunRecord(cfg.config_hash(), cfg.dataset_hash(), result.reports, result.best_epoch,
                       checkpoints, time.perf_counter() - start, result.steps, result.diverged,
                       result.stopped_early)
    record.write(directory)
    selected = record.selected
    logger.info("Selected epoch %d: asr %.4f top1 %.4f logit_dis %.4g l2 %.4g", record.best_epoch,
                selected.asr, selected.top1, selected.logit_dis, selected.l2)
    return record


def parse_grid(spec: str) -> Tuple[str, List[Any]]:
    """Splits a sweep grid 'key=v1,v2,...' into the dotted key and the values.

    A bare key sweeps the default grid of the sweep section.
    """
    key, _, values = spec.partition("=")
    key = SWEEP_KEYS.get(key.strip(), key.strip())
    if not key:
        raise ConfigError(f"Invalid sweep grid '{spec}'")
    parsed = [text_to_data(item) for item in values.split(",") if item.strip()]
    return key, parsed


def sweep(cfg: ExperimentConfig, key: str, values: Sequence[Any] = (),
          progress: bool = False) -> List[Tuple[Any, RunRecord]]:
    """Runs the experiment once per grid value.

    Args:
        cfg: Base configuration.
        key: Dotted configuration key ("objective.lambda", "available", ...).
        values: Grid values; the grid of the sweep section if empty (lambda
            and available only).
        progress: Show progress bars.

    Returns:
        (value, record) per grid value; a summary goes to sweep.csv.
    """
    key = SWEEP_KEYS.get(key, key)
    if not values:
        defaults = {"objective.lambda": cfg.sweep.lambdas, "available": cfg.sweep.available}
        if key not in defaults:
            raise ConfigError(f"No default grid for '{key}', values must be given")
        values = defaults[key]
    if key == "objective.lambda" and cfg.objective.kind in ("plain", "pgd"):
        logger.warning("Objective '%s' ignores lambda", cfg.objective.kind)
    parent = cfg.run_directory()
    os.makedirs(parent, exist_ok=True)
    lab = None
    results = []
    for value in tqdm(values, disable=not progress, desc="sweep"):
        entry = cfg.with_overrides({key: value, "output": parent,
                                    "name": f"{key}={to_text(value)}"})
        if lab is None or not lab.compatible(entry):
            lab = Lab(entry, progress)
        results.append((value, run(entry, lab, progress=progress)))
    with open(os.path.join(parent, SWEEP_FILE), "w") as fp:
        write_csv([record.selected for _, record in results], fp,
                  prefix={key: [to_text(value) for value, _ in results],
                          "best_epoch": [record.best_epoch for _, record in results],
                          "diverged": ["Y" if record.diverged else "N" for _, record in results]})
    return results


@dataclass
class Comparison:
    """Side-by-side metrics of a baseline run (a) and a run (b)."""
    rows: List[Tuple[str, float, float, float]]

    def delta(self, metric: str) -> float:
        """b - a for a metric."""
        for name, _, _, diff in self.rows:
            if name == metric:
                return diff
        raise KeyError(metric)


    def write_csv(self, fobj: TextIO):
        """Writes the table as CSV (metric, a, b, delta)."""
        writer = csv.writer(fobj, lineterminator="\n")
        writer.writerow(["metric", "a", "b", "delta"])
        for name, first, second, diff in self.rows:
            writer.writerow([name, repr(first), repr(second), repr(diff)])


def _number(value) -> float:
    if value is None:
        return math.nan
    return float(value)


def compare(dir_a: str, dir_b: str) -> Comparison:
    """Compares the selected epochs of two runs; the delta of asr_plus_acc is
    the gain of run b over the baseline a.

    Raises:
        RecordError: if a record is missing or the runs used different data.
    """
    first, second = RunRecord.load(dir_a), RunRecord.load(dir_b)
    if first.dataset_hash != second.dataset_hash:
        raise RecordError(f"Runs '{dir_a}' and '{dir_b}' were made on different datasets")
    rep_a, rep_b = first.selected.to_dict(), second.selected.to_dict()
    rows = []
    for col in CSV_COLUMNS:
        if rep_a[col] is None and rep_b[col] is None:
            continue
        val_a, val_b = _number(rep_a[col]), _number(rep_b[col])
        rows.append((col, val_a, val_b, val_b - val_a))
    return Comparison(rows)


@dataclass(frozen=True)
class BasinPoint:
    """A model located on the scan plane."""
    name: str
    a: float
    b: float
    clean_loss: float
    asr: float
    distance: float
    off_plane: float
    in_basin: bool


@dataclass
class BasinReport:
    """Plane scan with the located models; ``level`` bounds the basin loss."""
    grid: LossGrid
    points: List[BasinPoint]
    level: float

    def write_csv(self, fobj: TextIO):
        """Writes the located models as CSV."""
        writer = csv.writer(fobj, lineterminator="\n")
        writer.writerow(["name", "a", "b", "clean_loss", "asr", "distance", "off_plane",
                         "in_basin"])
        for pnt in self.points:
            writer.writerow([pnt.name, repr(pnt.a), repr(pnt.b), repr(pnt.clean_loss),
                             repr(pnt.asr), repr(pnt.distance), repr(pnt.off_plane),
                             "Y" if pnt.in_basin else "N"])


def scan_basin(cfg: ExperimentConfig, progress: bool = False) -> BasinReport:
    """Scans the plane through the clean, the plain-tuned and the objective-tuned model.

    The low-loss basin is the connected region of cells whose clean loss
    stays within ``landscape.basin_level`` of the clean model's loss. With
    ``landscape.scratch`` a model trained from scratch is projected onto the
    plane as well; a model off the plane is never in the basin.
    """
    if cfg.objective.kind == "plain":
        raise ConfigError("field 'objective.kind': scan-basin compares an objective other than "
                          "plain with plain tuning")
    lab = Lab(cfg, progress)
    directory = cfg.run_directory()
    os.makedirs(directory, exist_ok=True)
    evaluator = lab.evaluator(cfg)
    theta_clean = lab.clean_parameters()
    thetas = {"plain": lab.tune(cfg, ObjectiveConfig(), "clean", evaluator).best,
              cfg.objective.kind: lab.tune(cfg, cfg.objective, "clean", evaluator).best}
    basis = plane_from_three(theta_clean, *thetas.values())
    grid = scan_plane(basis, cfg.landscape.grid(cfg.seed), lab.model, lab.test, lab.trigger,
                      ("clean",) + tuple(thetas), progress=progress)
    located = anchor_table(grid)
    if cfg.landscape.scratch:
        thetas["scratch"] = lab.tune(cfg, ObjectiveConfig(), "random", evaluator).best
        cell = CellEvaluator(lab.model, lab.test, lab.trigger, cfg.landscape.subsample, cfg.seed,
                             cfg.landscape.loss_cap)
        loss, asr, _ = cell(thetas["scratch"])
        located["scratch"] = basis.coordinates(thetas["scratch"]) + (loss, asr)
    level = located["clean"][2] + cfg.landscape.basin_level
    inside = grid.same_basin([(a, b) for a, b, _, _ in located.values()], level)
    all_thetas = dict(clean=theta_clean, **thetas)
    points = []
    for (name, (a, b, loss, asr)), flag in zip(located.items(), inside):
        distance = float((all_thetas[name] - theta_clean).norm())
        off_plane = float((all_thetas[name] - basis.materialize(a, b)).norm())
        on_plane = off_plane <= PLANE_TOLERANCE * max(1.0, distance)
        points.append(BasinPoint(name, a, b, loss, asr, distance, off_plane, flag and on_plane))
    report = BasinReport(grid, points, level)

    _save_checkpoints(directory, all_thetas)
    with open(os.path.join(directory, GRID_FILE), "w") as fp:
        grid.write_csv(fp)
    with open(os.path.join(directory, BASIN_FILE), "w") as fp:
        report.write_csv(fp)
    cfg.dump(os.path.join(directory, CONFIG_FILE))
    for pnt in points:
        logger.info("%s at (%.4g, %.4g): loss %.4g asr %.4f in basin %s", pnt.name, pnt.a, pnt.b,
                    pnt.clean_loss, pnt.asr, pnt.in_basin)
    return report


def _subjects(lab: Lab, cfg: ExperimentConfig, evaluator: Evaluator,
              with_clean: bool) -> Dict[str, ParamVector]:
    subjects = {"clean": lab.clean_parameters()} if with_clean else {}
    subjects["tuned"] = lab.tune(cfg, cfg.objective, "clean", evaluator).best
    if cfg.objective.kind != "plain":
        subjects["plain"] = lab.tune(cfg, ObjectiveConfig(), "clean", evaluator).best
    subjects["scratch"] = lab.tune(cfg, ObjectiveConfig(), "random", evaluator).best
    return subjects


def defend(cfg: ExperimentConfig, probe: str,
           progress: bool = False) -> List[Tuple[str, str, float]]:
    """Runs a detection or mitigation probe on the backdoored models of an experiment.

    The probed models are the model tuned with the configured objective, a
    plain-tuned model (if the objective is not plain) and a model trained
    from scratch; the detection probes include the clean model.

    Returns:
        Summary rows (model, quantity, value), also written to defense.csv.
    """
    if probe not in PROBES:
        raise ConfigError(f"Unknown probe '{probe}' (known: {', '.join(PROBES)})")
    lab = Lab(cfg, progress)
    directory = cfg.run_directory()
    os.makedirs(directory, exist_ok=True)
    evaluator = lab.evaluator(cfg)
    subjects = _subjects(lab, cfg, evaluator, with_clean=probe in ("noise", "uap"))
    mitigation = cfg.defense.mitigation
    if mitigation.clean_samples > len(lab.train):
        logger.warning("Only %d clean instances available for mitigation", len(lab.train))
        mitigation = replace(mitigation, clean_samples=len(lab.train))

    summary = []
    for name, theta in subjects.items():
        if probe == "noise":
            ratio = noise_confident_ratio(lab.model, cfg.defense.noise, cfg.seed, theta)
            summary.append((name, "confident_ratio", ratio))
        elif probe == "uap":
            curve = targeted_uap_curve(lab.model, lab.test,
                                       cfg.defense.uap.to_uap(lab.trigger.target_class), theta)
            with open(os.path.join(directory, f"uap_{name}.csv"), "w") as fp:
                write_uap_csv(curve, fp)
            summary.append((name, "final_asr", curve[-1].asr))
        else:
            seed = derive_seed(cfg.seed, "mitigation")
            if probe == "finetune":
                result = finetune_mitigate(lab.model, lab.train, mitigation, seed, theta,
                                           evaluator)
            else:
                result = nad_mitigate(lab.model, lab.model, lab.train, mitigation, seed, theta,
                                      lab.clean_parameters(), evaluator)
            with open(os.path.join(directory, f"{probe}_{name}.csv"), "w") as fp:
                result.write_csv(fp)
            _, asr, acc = result.trajectory[-1]
            summary += [(name, "asr", asr), (name, "acc", acc)]
        logger.info("%s: %s", name, ", ".join(f"{qty} {val:.4f}" for nm, qty, val in summary
                                            if nm == name))

    with open(os.path.join(directory, DEFENSE_FILE), "w") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["model", "quantity", "value"])
        for name, qty, value in summary:
            writer.writerow([name, qty, repr(value)])
    cfg.dump(os.path.join(directory, CONFIG_FILE))
    return summary


def theory(cfg: ExperimentConfig, progress: bool = False) -> List[AWPRow]:
    """Compares converged AWPs of a logistic model with their second-order prediction."""
    data = load_dataset(cfg.dataset, cfg.seed)
    trigger = build_trigger(cfg.trigger, cfg.dataset, data)
    rows = awp_experiment(data, trigger, cfg.theory.etas, derive_seed(cfg.seed, "poison"),
                          ridge=cfg.theory.ridge, delta_L_star=cfg.theory.delta_l_star or None,
                          progress=progress)
    directory = cfg.run_directory()
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, AWP_FILE), "w") as fp:
        write_awp_csv(rows, fp)
    cfg.dump(os.path.join(directory, CONFIG_FILE))
    return rows
