"""Models package: run configuration, frozen backbone, interventions, state storage"""
from .config import RunConfig, BackboneConfig, apply_overrides
from .backbone import FrozenBackbone, HookSet, build_backbone, forward, greedy_decode
from .loreft import (
    Intervention, InterventionSnapshot, StreamSpec, apply, orthonormalize,
    select_positions, snapshot, transfer_into,
)
from .state_store import StateStore

__all__ = [
    'RunConfig', 'BackboneConfig', 'apply_overrides',
    'FrozenBackbone', 'HookSet', 'build_backbone', 'forward', 'greedy_decode',
    'Intervention', 'InterventionSnapshot', 'StreamSpec', 'apply', 'orthonormalize',
    'select_positions', 'snapshot', 'transfer_into', 'StateStore',
]
