"""
Main runner for CRAFT task streams
Builds the frozen backbone and stream, drives the LangGraph workflow and
persists the run; hosts the sweep, ablation and audit drivers
"""

import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.models.backbone import FrozenBackbone, build_backbone
from src.models.config import RunConfig, apply_overrides
from src.models.state_store import StateStore
from src.services.data_logger import RunReport, persist_report
from src.services.metrics import EvalMatrix, invariance_audit, read_eval_csv, score_task
from src.services.router import JOIN, ForceMode, GroupState, route
from src.services.tasks import (
    TaskFamily, TaskInstance, check_vocab, generate_stream, split_halves, stream_from_config,
)
from src.services.trainer import merge, train_task
from .stream_graph import create_stream_graph, initialize_stream_state, recursion_limit

logger = logging.getLogger(__name__)

LEARNABILITY_FLOOR = 90.0
STATES_DIR = "states"

SWEEP_AXES = {
    "delta": "router.delta",
    "warmup_steps": "router.warmup_steps",
    "beta": "train.beta",
}
AXIS_ALIASES = {"δ": "delta", "S_wu": "warmup_steps", "β": "beta"}


def mode_settings(config: RunConfig):
    """(routing force, effective config, eviction enabled) for the configured ablation mode"""
    if config.mode == "task-wise":
        return "task-wise", config, False
    if config.mode == "all-in-one":
        return "all-in-one", apply_overrides(config, {"train.beta": 0.0}), False
    if config.mode == "task-similar-noreg":
        return None, apply_overrides(config, {"train.beta": 0.0}), True
    return None, config, True


class CraftRunner:
    """Owns the compiled stream graph and runs it over one stream"""

    def __init__(self, config: RunConfig, backbone: Optional[FrozenBackbone] = None):
        self.config = config
        self.backbone = backbone if backbone is not None else build_backbone(config.backbone)
        self.app = create_stream_graph()

    def tasks(self) -> List[TaskInstance]:
        check_vocab(self.config.backbone.vocab_size)
        return stream_from_config(self.config.stream, self.config.seeds.data_seed)

    def execute(self, tasks: Sequence[TaskInstance], force: ForceMode = None, eta: Optional[float] = None,
                evaluate: bool = True, train: bool = True) -> Dict[str, Any]:
        state = initialize_stream_state(self.config, self.backbone, tasks, force, eta, evaluate, train)
        logger.info(f"Running stream of {len(tasks)} tasks (mode={self.config.mode}, "
                    f"force={force}, eta={eta})")
        return self.app.invoke(state, config={"recursion_limit": recursion_limit(len(tasks))})


def calibrate_eta(config: RunConfig, backbone: Optional[FrozenBackbone] = None) -> float:
    """
    Eviction threshold: eta_multiplier x median epoch-1 KL mean over well-routed
    joins. Each task of the calibration stream (stream_seed + 1) is split in
    halves; the first half founds a group and the second is joined to it, so
    every join is correct by construction.
    """
    calibration = apply_overrides(config, {"stream.stream_seed": config.stream.stream_seed + 1,
                                           "mode": "craft"})
    runner = CraftRunner(calibration, backbone)
    mus = []
    for task in runner.tasks():
        first, second = split_halves(task)
        groups: List[GroupState] = []
        _, groups = route(first, groups, runner.backbone, calibration, force="task-wise")
        founded = train_task(first, groups[0], groups, runner.backbone, calibration, founder=True)
        merge(founded.live, founded.group)
        _, groups = route(second, groups, runner.backbone, calibration, force=founded.group.gid)
        joined = train_task(second, groups[0], groups, runner.backbone, calibration)
        mus.append(joined.trace.mu1)
    eta = float(config.train.eta_multiplier * np.median(mus))
    if eta <= 0.0:
        logger.warning("Calibrated eta is zero; falling back to 1e-8")
        eta = 1e-8
    logger.info(f"Calibrated eta = {eta:.6g} from {len(mus)} joined halves")
    return eta


def resolve_eta(config: RunConfig, backbone: Optional[FrozenBackbone] = None) -> RunConfig:
    if config.train.eta is not None:
        return config
    return apply_overrides(config, {"train.eta": calibrate_eta(config, backbone)})


def learnability_audit(matrix: EvalMatrix, floor: float = LEARNABILITY_FLOOR) -> List[str]:
    """Tasks whose score right after training stays below the floor"""
    weak = []
    for j, task_id in enumerate(matrix.task_order):
        score = float(matrix.scores[j, j])
        if score < floor:
            weak.append(task_id)
            logger.warning(f"{task_id} reaches only {score:.1f}% held-out accuracy (floor {floor:.0f}%)")
    return weak


def save_states(report: RunReport, backbone: FrozenBackbone, run_dir: str):
    store = StateStore(os.path.join(run_dir, STATES_DIR))
    store.save_backbone(backbone)
    for group in report.groups:
        store.save_intervention(f"group{group.gid}", group.intervention,
                                {"gid": str(group.gid), "members": ";".join(group.members)})


def run_stream(config: RunConfig, tasks: Optional[Sequence[TaskInstance]] = None,
               persist: bool = True) -> RunReport:
    """Warm-up, route, anchored training, merge and evaluation for every task in order"""
    backbone = build_backbone(config.backbone)
    force, config, evict = mode_settings(config)
    if evict:
        config = resolve_eta(config, backbone)
    runner = CraftRunner(config, backbone)
    tasks = list(tasks) if tasks is not None else runner.tasks()

    result = runner.execute(tasks, force=force, eta=config.train.eta if evict else None)
    matrix = result["matrix"]
    report = RunReport(
        config=config,
        decisions=result["decisions"],
        traces=result["traces"],
        matrix=matrix,
        groups=result["groups"],
        inference_table=result["inference_table"],
        timeline=result["timeline"],
        kl_forgetting=result["kl_forgetting"],
        violations=invariance_audit(matrix),
    )
    if config.mode == "task-wise":
        learnability_audit(matrix)
    logger.info(f"Run finished: K={report.num_groups} OP={report.op:.2f} BWT={report.bwt:.2f}")

    if persist:
        persist_report(report, config.output_dir)
        save_states(report, backbone, config.output_dir)
    return report


def check_determinism(config: RunConfig) -> bool:
    """Run the same config twice into sibling directories and compare report hashes"""
    first = run_stream(config)
    again = apply_overrides(first.config, {"output_dir": config.output_dir.rstrip("/\\") + "-recheck"})
    second = run_stream(again)
    same = first.digest == second.digest
    if same:
        logger.info(f"Determinism check passed ({first.digest[:12]})")
    else:
        logger.error(f"Determinism check failed: {first.digest} != {second.digest}")
    return same


def route_stream(config: RunConfig, tasks: Optional[Sequence[TaskInstance]] = None) -> Dict[str, Any]:
    """Routing-only dry run: no anchored training, NEW groups keep their warm-up seed"""
    force, config, _ = mode_settings(config)
    runner = CraftRunner(config)
    tasks = list(tasks) if tasks is not None else runner.tasks()
    return runner.execute(tasks, force=force, evaluate=False, train=False)


def sweep(config: RunConfig, axis: str, values: Sequence[float]) -> List[Dict[str, Any]]:
    """One full run per value with shared seeds; rows of (value, K, OP, BWT)"""
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ValueError(f"Unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if len(values) < 2:
        raise ValueError("a sweep needs at least two values")

    _, effective, evict = mode_settings(config)
    if evict and config.train.eta is None:
        config = apply_overrides(config, {"train.eta": calibrate_eta(effective)})

    rows = []
    for value in values:
        point = apply_overrides(config, {
            SWEEP_AXES[axis]: value,
            "output_dir": os.path.join(config.output_dir, f"{axis}={value}"),
        })
        report = run_stream(point)
        sym = [t.terminal_sym_kl for t in report.traces]
        rows.append({
            "value": value,
            "K": report.num_groups,
            "OP": report.op,
            "BWT": report.bwt,
            "terminal_sym_kl": float(np.mean(sym)) if sym else 0.0,
            "partition": sorted(sorted(g.members) for g in report.groups if g.members),
        })
        logger.info(f"Sweep {axis}={value}: K={rows[-1]['K']} OP={rows[-1]['OP']:.2f} "
                    f"BWT={rows[-1]['BWT']:.2f}")
    return rows


def ablate(config: RunConfig, mode: str) -> Dict[str, float]:
    point = apply_overrides(config, {"mode": mode,
                                     "output_dir": os.path.join(config.output_dir, mode)})
    report = run_stream(point)
    return {"mode": mode, "K": report.num_groups, "OP": report.op, "BWT": report.bwt}


def separation_stream(config: RunConfig) -> List[TaskInstance]:
    """Two tasks from far-apart families"""
    sizes = (config.stream.train_size, config.stream.probe_size, config.stream.heldout_size)
    spec = [(TaskFamily("copy-sep", "copy"), 1),
            (TaskFamily("marker-classification-sep", "marker-classification"), 1)]
    return generate_stream(spec, config.stream.stream_seed, config.seeds.data_seed, sizes)


def separation(config: RunConfig, deltas: Sequence[float]) -> Dict[str, Any]:
    """Sweep delta over a far-family pair; report the first delta at which the pair merges"""
    config = apply_overrides(config, {"mode": "craft"})
    tasks = separation_stream(config)
    rows = []
    first_merge = None
    for delta in sorted(deltas):
        result = route_stream(apply_overrides(config, {"router.delta": delta}), tasks)
        second = result["decisions"][1]
        best = second.best
        rows.append({"delta": delta, "decision": second.decision,
                     "d_best": best.distance if best else None,
                     "floor": second.floor_triggered})
        if second.decision == JOIN and first_merge is None:
            first_merge = delta
    return {"rows": rows, "first_merge_delta": first_merge}


def rescore(run_dir: str) -> Dict[str, Any]:
    """
    Reload the persisted backbone and group states, re-score every task and
    compare with the final row of the stored matrix.
    """
    config_path = os.path.join(run_dir, "config.json")
    states_dir = os.path.join(run_dir, STATES_DIR)
    if not os.path.exists(states_dir):
        raise FileNotFoundError(f"Run states not found: {states_dir}")
    config = RunConfig.load(config_path)
    store = StateStore(states_dir)
    backbone = store.load_backbone()

    interventions, table = {}, {}
    for name in store.list_states():
        if not name.startswith("group"):
            continue
        iv, header = store.load_intervention(name)
        gid = int(header["gid"])
        interventions[gid] = iv
        for member in filter(None, header.get("members", "").split(";")):
            table[member] = gid

    matrix = read_eval_csv(os.path.join(run_dir, "eval_matrix.csv"))
    tasks = {t.task_id: t for t in stream_from_config(config.stream, config.seeds.data_seed)}
    last = matrix.size - 1
    mismatches = []
    scores = {}
    for t, task_id in enumerate(matrix.task_order):
        if task_id not in table:
            raise ValueError(f"unknown task id {task_id!r} in stored matrix")
        score = score_task(tasks[task_id], interventions[table[task_id]], backbone)
        scores[task_id] = score
        if score != matrix.scores[last, t]:
            mismatches.append(task_id)
    if mismatches:
        logger.error(f"Inference parity failed for {mismatches}")
    return {"scores": scores, "mismatches": mismatches}
