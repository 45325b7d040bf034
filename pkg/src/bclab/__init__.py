#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Desk-scale laboratory for backdoor injection by adversarial weight perturbation.
"""
from bclab.common import BclabError, ConfigError, ShapeError, NonFiniteError, CapacityError,\
     SingularMatrixError, DivergenceError, NotConvergedError, FormatError, DataRoleError,\
     RecordError, derive_seed, make_generator
from bclab.diffcore import ParamVector, GradVector, HessianMatrix, OptimizerConfig, EarlyStop,\
     grad, finite_diff_grad, explicit_hessian, sgd_step, read_checkpoint, write_checkpoint
from bclab.models import build_model, predict_logits, hidden_states
from bclab.poison import TriggerSpec, LabeledDataset, MixedDataset, poison, apply_trigger, mix
from bclab.objectives import ObjectiveSpec, AnchorContext, BackdoorObjective
from bclab.training import train, TrainResult
from bclab.consistency import MetricsReport, Evaluator
from bclab.theory import predict, delta_upper_bound, quad_clean_change, kl_and_bound
from bclab.landscape import plane_from_three, scan_plane, GridSpec
from bclab.cfgdict import ConfigDictBuilder, ConfigDictWalker, flatten
from bclab.eventhandler import ConfigEventHandler, ConfigEventPrinter
from bclab.formatter import ConfigFormatter
from bclab.cfgio import load, load_string, dump, dump_string
from bclab.parser import ConfigParser
from bclab.config import ExperimentConfig

__version__ = '0.1'
