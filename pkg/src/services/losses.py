"""
Loss pieces shared by warm-up and anchored training
"""

from typing import Optional

import numpy as np

from src.autograd import Tensor, no_grad, ops
from src.models.backbone import FrozenBackbone, HookSet, forward
from src.models.loreft import Intervention
from .tasks import TaskBatch


def label_logits(backbone: FrozenBackbone, iv: Optional[Intervention], batch: TaskBatch) -> Tensor:
    """Logits at the label positions of a batch, flattened to (B * L, V)"""
    hooks = HookSet.for_intervention(iv, batch.prompt_len)
    logits, _ = forward(backbone, batch.tokens, hooks)
    picked = ops.index_select(logits, batch.label_positions, axis=1)
    rows = len(batch) * batch.targets.shape[1]
    return ops.reshape(picked, (rows, backbone.config.vocab_size))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets (n,) under logits (n, V)"""
    logp = ops.log_softmax(logits)
    picked = ops.take_along_last(logp, np.asarray(targets, dtype=np.int64).reshape(-1))
    return ops.scale(ops.mean_all(picked), -1.0)


def forward_kl(anchor_logits: Tensor, live_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(anchor) || softmax(live)); anchor is treated as constant"""
    if anchor_logits.shape != live_logits.shape:
        raise ValueError(f"anchor/live logits disagree: {anchor_logits.shape} vs {live_logits.shape}")
    with no_grad():
        anchor_logp = ops.log_softmax(Tensor(anchor_logits.data)).data
    p_anchor = np.exp(anchor_logp)
    live_logp = ops.log_softmax(live_logits)
    gap = ops.sub(Tensor(anchor_logp), live_logp)
    rows = anchor_logits.shape[0]
    return ops.scale(ops.sum_all(ops.mul(Tensor(p_anchor), gap)), 1.0 / rows)
