"""Binary spiking causal language model with softmax-free attention.

A desk-scale decoder stack whose attention and feed-forward blocks
communicate through binary (or ternary) spike tensors over a short time
unroll, trained by surrogate-gradient BPTT, optionally distilled from a
small dense teacher, and profiled by an analytical spike-op energy model.
"""

from .distill import SpadConfig, layer_map, spad_losses
from .energy import EnergyConstants, count_flops, energy_report, render_report
from .errors import (AlignmentError, ConfigError, EvaluationError, InternalError,
                     ShapeError, ValidationError)
from .model import (ModelConfig, ann_forward, generate, init_params, load_model,
                    save_model, snn_forward)
from .neurons import LifParams, TernaryParams, empirical_rate, lif_step, ternary_step
from .numerics import Rng
from .training import TrainConfig, evaluate_ce, lr_schedule, train_loop

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "ConfigError", "EnergyConstants", "EvaluationError",
    "InternalError", "LifParams", "ModelConfig", "Rng", "ShapeError",
    "SpadConfig", "TernaryParams", "TrainConfig", "ValidationError",
    "ann_forward", "count_flops", "empirical_rate", "energy_report",
    "evaluate_ce", "generate", "init_params", "layer_map", "lif_step",
    "load_model", "lr_schedule", "render_report", "save_model", "snn_forward",
    "spad_losses", "ternary_step", "train_loop",
]
