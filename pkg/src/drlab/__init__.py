"""drlab: a desk-scale class-incremental learning lab.

Parallel adapter streams on a frozen mini vision transformer, trained stage by
stage with decoupled anchor supervision and classified against concatenated
class prototypes.
"""

from .bench import MetricsTable, ablate, average_accuracy, run_experiment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, build_config
from .engine import IncrementalState, PrototypeStore, run_stage
from .errors import (
    CheckpointError,
    ConfigurationError,
    DrlabError,
    ProtocolViolationError,
)
from .ipa import AttentionMode, FusionMode, StageModule, composite_forward
from .supervision import DasConfig, LossKind, das_loss

__version__ = "0.1.0"

__all__ = [
    "AttentionMode",
    "CheckpointError",
    "ConfigurationError",
    "DasConfig",
    "DrlabError",
    "FusionMode",
    "IncrementalState",
    "LossKind",
    "MetricsTable",
    "PRESETS",
    "PrototypeStore",
    "ProtocolViolationError",
    "RunConfig",
    "StageModule",
    "ablate",
    "average_accuracy",
    "build_config",
    "composite_forward",
    "das_loss",
    "load_checkpoint",
    "run_experiment",
    "run_stage",
    "save_checkpoint",
]
