"""Desk-scale multi-task, multi-modal masked video flow matching lab."""

from .masks import (
    Region,
    TaskKind,
    TaskMask,
    assemble_model_input,
    build_task_mask,
    mask_ratio,
    reimpose_known,
)
from .phase_weights import ModalKnots, PhaseWeightConfig, modal_weight, weights_all

__all__ = [
    "Region",
    "TaskKind",
    "TaskMask",
    "assemble_model_input",
    "build_task_mask",
    "mask_ratio",
    "reimpose_known",
    "ModalKnots",
    "PhaseWeightConfig",
    "modal_weight",
    "weights_all",
]

__version__ = "0.1.0"
