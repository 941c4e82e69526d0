"""Object-sensitive deep Q-learning on small pixel games, with saliency explanations."""

from .agents import AgentConfig, train
from .envsim import EnvConfig, MiniArcade, env_reset, env_step
from .exceptions import ConfigError, DimensionError, FormatError, ODRLError, RangeError, TrainingError, UsageError
from .saliency import classify_objects, object_saliency, pixel_saliency, render_saliency
from .tensornet import QNet, build_qnet, grad_check
from .vision import Detection, Template, detect_objects, match

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "ConfigError",
    "Detection",
    "DimensionError",
    "EnvConfig",
    "FormatError",
    "MiniArcade",
    "ODRLError",
    "QNet",
    "RangeError",
    "Template",
    "TrainingError",
    "UsageError",
    "build_qnet",
    "classify_objects",
    "detect_objects",
    "env_reset",
    "env_step",
    "grad_check",
    "match",
    "object_saliency",
    "pixel_saliency",
    "render_saliency",
    "train",
]
