"""Desk-scale video matting with foreground/background memory attention.

The package is pure numpy: a small reverse-mode autodiff core, the network
(encoder, Fg/Bg transformer, two-stage decoder), losses, matting metrics, a
synthetic video generator, training and inference loops, and a CLI.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricReport, evaluate_sequence
from .model import MattingModel, ModelConfig
from .pipeline import bidirectional_infer, init_session, run_sequence, step_frame
from .synth import SceneSpec, generate_sequence, random_scene
from .transformer import AblationConfig, ablation_config

__all__ = [
    "AblationConfig", "MattingModel", "MetricReport", "ModelConfig", "SceneSpec", "ablation_config",
    "bidirectional_infer", "evaluate_sequence", "generate_sequence", "init_session", "load_checkpoint",
    "random_scene", "run_sequence", "save_checkpoint", "step_frame",
]
__version__ = "0.1.0"
