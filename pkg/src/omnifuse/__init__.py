"""Desk-scale instruction-gated audio-visual fusion model and tooling."""

from omnifuse import (
    audio_frontend,
    config,
    curation_pipeline,
    eval_metrics,
    instruction_fusion,
    model,
    numerics,
    sequence_model,
    training_stages,
    visual_branches,
)

__all__ = [
    "audio_frontend",
    "config",
    "curation_pipeline",
    "eval_metrics",
    "instruction_fusion",
    "model",
    "numerics",
    "sequence_model",
    "training_stages",
    "visual_branches",
]
__version__ = "0.1.0"
