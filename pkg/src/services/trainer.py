"""
Anchored adaptation

The live intervention starts from the group's state and trains on the task
loss plus beta * KL(anchor || live) at label positions, where the anchor is a
frozen snapshot of the group taken before training. After the first epoch the
mean KL decides eviction; afterwards a dual plateau (KL and task loss) stops
training early. A finished run is merged back into its group.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.autograd import AdamW, LinearWarmupSchedule, Tensor, backward, no_grad, ops
from src.models.backbone import FrozenBackbone
from src.models.config import RunConfig
from src.models.loreft import Intervention, InterventionSnapshot, clone, snapshot, transfer_into
from .losses import cross_entropy, forward_kl, label_logits
from .router import GroupState, make_probe, open_group, signature, sym_kl
from .tasks import TaskBatch, TaskInstance, epoch_batches

logger = logging.getLogger(__name__)

ORTHO_TOLERANCE = 1e-10


@dataclass
class LossBreakdown:
    loss: Tensor
    task_term: float
    kl_term: float
    total: float


@dataclass
class StepRecord:
    step: int
    epoch: int
    task_loss: float
    kl: float
    lr: float
    ortho_error: float

    def to_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "task_loss": self.task_loss,
                "kl": self.kl, "lr": self.lr}


@dataclass
class TrainTrace:
    task_id: str
    gid: int
    scheduled_steps: int
    records: List[StepRecord] = field(default_factory=list)
    evicted: bool = False
    evicted_from: Optional[int] = None
    stop_step: Optional[int] = None
    terminal_kl: float = 0.0
    terminal_sym_kl: float = 0.0
    aborted: Optional["TrainTrace"] = None  # the run that triggered eviction

    @property
    def k_s(self) -> List[float]:
        return [r.kl for r in self.records]

    @property
    def task_loss_s(self) -> List[float]:
        return [r.task_loss for r in self.records]

    @property
    def mu1(self) -> float:
        first = [r.kl for r in self.records if r.epoch == 1]
        return float(np.mean(first)) if first else 0.0

    @property
    def steps_run(self) -> int:
        return len(self.records)


@dataclass
class TrainOutcome:
    live: Intervention
    trace: TrainTrace
    group: GroupState


def anchored_loss(batch: TaskBatch, live: Intervention, anchor: InterventionSnapshot,
                  backbone: FrozenBackbone, beta: float) -> LossBreakdown:
    """Cross-entropy on label tokens plus beta * forward KL(anchor || live) on the same positions"""
    if batch.targets.size == 0:
        raise ValueError("batch has no label positions")
    live_logits = label_logits(backbone, live, batch)
    with no_grad():
        anchor_logits = label_logits(backbone, anchor, batch)
    task_term = cross_entropy(live_logits, batch.targets)
    kl_term = forward_kl(anchor_logits, live_logits)
    total = ops.add(task_term, ops.scale(kl_term, beta))
    return LossBreakdown(total, task_term.item(), kl_term.item(), total.item())


def check_eviction(trace: TrainTrace, eta: float) -> bool:
    """Evict when the epoch-1 mean KL exceeds eta (strictly)"""
    if not trace.records:
        raise ValueError(f"{trace.task_id}: eviction needs a completed first epoch")
    return trace.mu1 > eta


def early_stop(trace: TrainTrace, window: int, tol: float = 1e-4) -> bool:
    """
    Both signals have plateaued: the rolling KL mean over the last window did
    not decrease against the window before it, and the rolling task loss
    dropped by at most tol.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    k, loss = trace.k_s, trace.task_loss_s
    if len(k) < 2 * window:
        return False
    recent_k, previous_k = np.mean(k[-window:]), np.mean(k[-2 * window:-window])
    recent_l, previous_l = np.mean(loss[-window:]), np.mean(loss[-2 * window:-window])
    return bool(recent_k >= previous_k and previous_l - recent_l <= tol)


def merge(live: Intervention, group: GroupState):
    """Commit the trained intervention to the group state"""
    transfer_into(live, group.intervention)
    logger.info(f"Merged into G{group.gid} (members: {', '.join(group.members)})")


def terminal_divergence(task: TaskInstance, live: Intervention, anchor: Intervention,
                        backbone: FrozenBackbone, config: RunConfig):
    """Forward KL and symmetric signature KL between anchor and live on the task's probe"""
    probe = make_probe(task, config.router.probe_size)
    with no_grad():
        kl = forward_kl(label_logits(backbone, anchor, probe.batch),
                        label_logits(backbone, live, probe.batch)).item()
    params = config.router
    sym = sym_kl(signature(anchor, probe, backbone, params.top_k, params.smoothing),
                 signature(live, probe, backbone, params.top_k, params.smoothing))
    return max(kl, 0.0), sym


def _run(task: TaskInstance, gid: int, live: Intervention, anchor: InterventionSnapshot,
         backbone: FrozenBackbone, config: RunConfig, epochs: int,
         eta: Optional[float]) -> TrainTrace:
    train = config.train
    per_epoch = math.ceil(len(task.train) / train.batch_size)
    trace = TrainTrace(task.task_id, gid, epochs * per_epoch)
    schedule = LinearWarmupSchedule(train.lr, trace.scheduled_steps, train.warmup_ratio)
    optimizer = AdamW(live.parameters(), schedule, weight_decay=train.weight_decay)
    rng = np.random.default_rng([config.seeds.global_seed, zlib.crc32(task.task_id.encode("utf-8"))])

    step = 0
    for epoch in range(1, epochs + 1):
        for batch in epoch_batches(task.train, train.batch_size, rng):
            parts = anchored_loss(batch, live, anchor, backbone, train.beta)
            backward(parts.loss)
            lr = optimizer.step()
            optimizer.zero_grad()

            ortho = live.orthonormality_error()
            if ortho > ORTHO_TOLERANCE:
                logger.warning(f"{task.task_id} step {step}: orthonormality residual {ortho:.3e}")
            trace.records.append(StepRecord(step, epoch, parts.task_term, max(parts.kl_term, 0.0), lr, ortho))
            logger.debug(f"{task.task_id} step {step} epoch {epoch}: "
                         f"loss={parts.task_term:.5f} kl={parts.kl_term:.3e} lr={lr:.2e}")
            step += 1

            if epoch > 1 and train.early_stop and early_stop(trace, train.rolling_window, train.plateau_tol):
                trace.stop_step = step
                logger.info(f"{task.task_id}: early stop at step {step}/{trace.scheduled_steps}")
                return trace

        if epoch == 1 and eta is not None and check_eviction(trace, eta):
            trace.evicted = True
            logger.info(f"{task.task_id}: epoch-1 KL mean {trace.mu1:.4g} > eta {eta:.4g}, evicting")
            return trace

    trace.stop_step = step
    return trace


def train_task(task: TaskInstance, group: GroupState, groups: List[GroupState],
               backbone: FrozenBackbone, config: RunConfig, epochs: Optional[int] = None,
               eta: Optional[float] = None, founder: bool = False) -> TrainOutcome:
    """
    Anchored training of a routed task. Founders of a group never get evicted.
    An evicted task leaves `group` (restored from its anchor) for a fresh group
    seeded from its live intervention, where training restarts.
    """
    if task.task_id not in group.members:
        raise ValueError(f"task {task.task_id} is not a member of G{group.gid}")
    epochs = epochs if epochs is not None else config.train.epochs

    anchor = snapshot(group.intervention)
    live = clone(group.intervention)
    logger.info(f"Training {task.task_id} in G{group.gid} for up to {epochs} epochs")
    trace = _run(task, group.gid, live, anchor, backbone, config, epochs,
                 None if founder else eta)

    if trace.evicted:
        transfer_into(anchor, group.intervention)
        group.members.remove(task.task_id)
        fresh = open_group(groups, task.task_id, live)
        aborted = trace
        anchor = snapshot(fresh.intervention)
        live = clone(fresh.intervention)
        trace = _run(task, fresh.gid, live, anchor, backbone, config, epochs, None)
        trace.evicted = True
        trace.evicted_from = group.gid
        trace.aborted = aborted
        group = fresh

    trace.terminal_kl, trace.terminal_sym_kl = terminal_divergence(task, live, anchor, backbone, config)
    return TrainOutcome(live, trace, group)
