#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Implements common functionalities for the bclab package
"""
import hashlib
import torch


# All numerics run in 64-bit floating point
DTYPE = torch.float64


class BclabError(Exception):
    """Base class for exceptions in the bclab package."""


class ConfigError(BclabError):
    """Raised when a configuration can not be parsed or does not validate."""


class ShapeError(BclabError, ValueError):
    """Raised on mismatching parameter layouts or tensor shapes."""


class NonFiniteError(BclabError, ArithmeticError):
    """Raised when a non-finite value appears.

    Args:
        msg: Error message.
        segment: Name of the parameter segment (or quantity) which went
            non-finite, if known.
    """

    def __init__(self, msg: str, segment: str = None):
        super().__init__(msg)
        self.segment = segment


class CapacityError(BclabError):
    """Raised when an explicit Hessian would exceed the configured cap."""


class SingularMatrixError(BclabError, ArithmeticError):
    """Raised when a linear solve meets a singular or ill-conditioned matrix."""


class DivergenceError(BclabError):
    """Raised when training diverges.

    Args:
        msg: Error message.
        checkpoint: Last parameter vector with a finite loss.
    """

    def __init__(self, msg: str, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class NotConvergedError(BclabError):
    """Raised when a model is required to sit at a stationary point but does not."""


class FormatError(BclabError):
    """Raised on malformed checkpoint or dataset files."""


class DataRoleError(BclabError, ValueError):
    """Raised when a dataset with the wrong role tag is passed."""


class RecordError(BclabError):
    """Raised when a run record is missing or runs can not be compared."""


def derive_seed(seed: int, name: str) -> int:
    """Derives a named sub-seed from the master seed.

    Args:
        seed: Master seed of the experiment.
        name: Name of the consumer (e.g. "data", "poison", "init", "batching").

    Returns:
        Non-negative 63-bit integer, stable across platforms and runs.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def make_generator(seed: int, name: str = None) -> torch.Generator:
    """Returns a CPU torch generator seeded by the (optionally named) seed."""
    gen = torch.Generator()
    gen.manual_seed(seed if name is None else derive_seed(seed, name))
    return gen


# Magic bytes of the parameter checkpoint format
CHECKPOINT_MAGIC = b"BCLB1"

# Magic bytes of the dataset format
DATASET_MAGIC = b"BCDS1"

# Default cap on the number of parameters for explicit Hessians
HESSIAN_CAP = 512

# Lambda grid searched for the penalty objectives
LAMBDA_GRID = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 0.01, 0.02, 0.05,
               0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
