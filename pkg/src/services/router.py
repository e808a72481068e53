"""
Warm-up routing

A new task is warmed up from a shared seed, then its output distribution on
its own probe batch is compared with the baseline (no intervention) and with
every existing group's intervention on the same probe. The task joins the
nearest group when the normalised distance is within delta and neither side
sits on the epsilon floor; otherwise it opens a group seeded with the warm-up.
"""

import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from src.autograd import AdamW, LinearWarmupSchedule, backward, no_grad
from src.models.backbone import FrozenBackbone
from src.models.config import RunConfig
from src.models.loreft import Intervention, StreamSpec, transfer_into
from .losses import cross_entropy, label_logits
from .tasks import TaskBatch, TaskInstance, epoch_batches

logger = logging.getLogger(__name__)

JOIN, NEW = "JOIN", "NEW"
ForceMode = Union[None, str, int]


@dataclass
class GroupState:
    gid: int
    intervention: Intervention
    members: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ProbeBatch:
    batch: TaskBatch
    batch_seed: int
    key: str


@dataclass(frozen=True)
class DistributionSignature:
    probs: np.ndarray  # (positions, V), smoothed, rows sum to 1
    support: np.ndarray  # (positions, k) top-k token ids
    probe_key: str


@dataclass
class CandidateDistance:
    gid: int
    D_G: float
    D_KG: float
    distance: float
    floor: bool


@dataclass
class RoutingDecision:
    task_id: str
    decision: str
    gid: int
    D_K: float = 0.0
    candidates: List[CandidateDistance] = field(default_factory=list)
    floor_triggered: bool = False
    forced: Optional[str] = None
    evicted: bool = False

    @property
    def best(self) -> Optional[CandidateDistance]:
        return self.candidates[0] if self.candidates else None

    @property
    def runner_up(self) -> Optional[CandidateDistance]:
        return self.candidates[1] if len(self.candidates) > 1 else None

    def to_row(self) -> dict:
        best, runner = self.best, self.runner_up
        return {
            "task": self.task_id,
            "decision": f"{self.decision} G{self.gid}",
            "best_gid": "" if best is None else best.gid,
            "d_best": "" if best is None else repr(best.distance),
            "runner_gid": "" if runner is None else runner.gid,
            "d_runner": "" if runner is None else repr(runner.distance),
            "floor": "yes" if self.floor_triggered else "no",
            "D_K": repr(self.D_K),
            "D_G": "" if best is None else repr(best.D_G),
            "D_KG": "" if best is None else repr(best.D_KG),
            "evicted": "yes" if self.evicted else "no",
        }


ROUTING_COLUMNS = ["task", "decision", "best_gid", "d_best", "runner_gid", "d_runner",
                   "floor", "D_K", "D_G", "D_KG", "evicted"]


def make_probe(task: TaskInstance, size: int, batch_seed: Optional[int] = None) -> ProbeBatch:
    """Fixed-size probe drawn from the task's probe split with the task's data seed"""
    if len(task.probe) == 0:
        raise ValueError(f"task {task.task_id} has no probe data")
    seed = task.data_seed if batch_seed is None else batch_seed
    rng = np.random.default_rng([seed, zlib.crc32(task.task_id.encode("utf-8"))])
    idx = np.sort(rng.permutation(len(task.probe))[:size])
    batch = TaskBatch.from_split(task.probe.take(idx))
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(batch.tokens).astype("<i8").tobytes())
    digest.update(np.ascontiguousarray(batch.targets).astype("<i8").tobytes())
    return ProbeBatch(batch, seed, digest.hexdigest())


def new_intervention(config: RunConfig, seed: int) -> Intervention:
    layers = config.intervention.layers
    if layers is None:
        layers = range(config.backbone.num_layers)
    return Intervention.initialize(layers, config.backbone.hidden_dim, config.intervention.rank,
                                   StreamSpec(config.intervention.t_pos), seed)


def warmup(task: TaskInstance, backbone: FrozenBackbone, config: RunConfig) -> Intervention:
    """Train a fresh shared-seed intervention for S_wu plain task-loss steps"""
    params = config.router
    if len(task.train) == 0:
        raise ValueError(f"task {task.task_id} has no training data")
    if params.warmup_steps < 1:
        raise ValueError("warm-up needs at least one step")

    iv = new_intervention(config, params.wu_seed)
    lr = config.train.lr if params.warmup_lr is None else params.warmup_lr
    optimizer = AdamW(iv.parameters(), LinearWarmupSchedule(lr, params.warmup_steps,
                                                            config.train.warmup_ratio))
    rng = np.random.default_rng(params.wu_seed)
    steps = 0
    while steps < params.warmup_steps:
        for batch in epoch_batches(task.train, config.train.batch_size, rng):
            loss = cross_entropy(label_logits(backbone, iv, batch), batch.targets)
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            steps += 1
            if steps == params.warmup_steps:
                break
    logger.debug(f"Warm-up for {task.task_id} finished after {steps} steps")
    return iv


def smoothed_topk(logits: np.ndarray, top_k: int, smoothing: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Softmax restricted to the top-k logits of each row, scaled to 1 - smoothing,
    with the smoothing mass spread evenly over the other V - k tokens.
    k >= V falls back to the plain softmax.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    V = logits.shape[-1]
    if top_k >= V:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        support = np.argsort(-logits, axis=-1, kind="stable")
        return e / e.sum(axis=-1, keepdims=True), support

    support = np.argsort(-logits, axis=-1, kind="stable")[:, :top_k]
    top = np.take_along_axis(logits, support, axis=-1)
    e = np.exp(top - top.max(axis=-1, keepdims=True))
    probs = np.full(logits.shape, smoothing / (V - top_k))
    np.put_along_axis(probs, support, (1.0 - smoothing) * e / e.sum(axis=-1, keepdims=True), axis=-1)
    return probs, support


def signature(iv: Optional[Intervention], probe: ProbeBatch, backbone: FrozenBackbone,
              top_k: int = 32, smoothing: float = 1e-6) -> DistributionSignature:
    """Smoothed top-k output distribution at every label position of the probe"""
    with no_grad():
        logits = label_logits(backbone, iv, probe.batch).data
    probs, support = smoothed_topk(logits, top_k, smoothing)
    return DistributionSignature(probs, support, probe.key)


def sym_kl(p: DistributionSignature, q: DistributionSignature) -> float:
    """Mean over positions of KL(p||q) + KL(q||p) = sum (p - q) log(p / q)"""
    if p.probe_key != q.probe_key or p.probs.shape != q.probs.shape:
        raise ValueError("signatures were computed on different probe batches")
    per_position = ((p.probs - q.probs) * np.log(p.probs / q.probs)).sum(axis=-1)
    return float(per_position.mean())


def routing_distance(D_KG: float, D_K: float, D_G: float, epsilon: float) -> float:
    return D_KG / max(min(D_K, D_G), epsilon)


def open_group(groups: List[GroupState], task_id: str, seed: Intervention) -> GroupState:
    gid = max((g.gid for g in groups), default=-1) + 1
    intervention = Intervention.blank_like(seed)
    transfer_into(seed, intervention)
    group = GroupState(gid, intervention, [task_id])
    groups.append(group)
    return group


def route(task: TaskInstance, groups: List[GroupState], backbone: FrozenBackbone,
          config: RunConfig, force: ForceMode = None) -> Tuple[RoutingDecision, List[GroupState]]:
    """
    Assign a task to a group. `groups` is updated in place and returned.

    force: None applies the join rule; "task-wise" always opens a group;
    "all-in-one" joins group 0 when it exists; an int joins that gid.
    """
    params = config.router
    probe = make_probe(task, params.probe_size)
    warm = warmup(task, backbone, config)

    def sig(iv):
        return signature(iv, probe, backbone, params.top_k, params.smoothing)

    baseline = sig(None)
    warmed = sig(warm)
    D_K = sym_kl(warmed, baseline)

    candidates = []
    for group in groups:
        grouped = sig(group.intervention)
        D_G = sym_kl(grouped, baseline)
        D_KG = sym_kl(warmed, grouped)
        candidates.append(CandidateDistance(
            gid=group.gid, D_G=D_G, D_KG=D_KG,
            distance=routing_distance(D_KG, D_K, D_G, params.epsilon),
            floor=min(D_K, D_G) < params.epsilon,
        ))
    candidates.sort(key=lambda c: (c.distance, c.gid))
    best = candidates[0] if candidates else None
    floor = bool(best is not None and best.floor)

    by_gid = {g.gid: g for g in groups}
    target: Optional[GroupState] = None
    forced = None
    if force is None:
        if best is not None and best.distance <= params.delta and not floor:
            target = by_gid[best.gid]
        elif best is not None and best.distance <= params.delta:
            logger.warning(f"{task.task_id}: best distance {best.distance:.4f} is within delta "
                           f"but the epsilon floor forced a new group")
    elif force == "task-wise":
        forced = force
    elif force == "all-in-one":
        forced = force
        target = by_gid.get(min(by_gid)) if by_gid else None
    elif isinstance(force, int) and not isinstance(force, bool):
        if force not in by_gid:
            raise ValueError(f"cannot force-join unknown group {force}")
        forced = f"gid={force}"
        target = by_gid[force]
    else:
        raise ValueError(f"Unknown routing force mode {force!r}")

    if target is not None:
        target.members.append(task.task_id)
        decision = RoutingDecision(task.task_id, JOIN, target.gid, D_K, candidates, floor, forced)
    else:
        group = open_group(groups, task.task_id, warm)
        decision = RoutingDecision(task.task_id, NEW, group.gid, D_K, candidates, floor, forced)

    runner = decision.runner_up
    logger.info(
        f"Routed {task.task_id}: {decision.decision} G{decision.gid} "
        f"(D_K={D_K:.4g}, best={'-' if best is None else f'G{best.gid} d={best.distance:.4g}'}, "
        f"runner-up={'-' if runner is None else f'G{runner.gid} d={runner.distance:.4g}'}, "
        f"floor={'yes' if floor else 'no'})"
    )
    return decision, groups
