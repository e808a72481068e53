"""
Minimal reverse-mode autodiff used to train interventions on a frozen backbone
"""

from .tensor import Graph, Tensor, backward, is_grad_enabled, no_grad
from .optim import AdamW, AdamWState, LinearWarmupSchedule, adamw_step
from . import ops

__all__ = [
    'Graph', 'Tensor', 'backward', 'is_grad_enabled', 'no_grad',
    'AdamW', 'AdamWState', 'LinearWarmupSchedule', 'adamw_step', 'ops',
]
