"""Error-repair policy optimization with gated, truncated process credit on a toy arithmetic task."""

from __future__ import annotations

from .estimator import IOPGSPO
from .trainer import TrainConfig, Trainer, evaluate, run_training

__all__ = ["IOPGSPO", "TrainConfig", "Trainer", "evaluate", "run_training"]
__version__ = "0.1.0"
