"""
LangGraph implementation of the task stream
Each task passes route -> train -> merge -> evaluate, then the graph loops
back to route until the stream is exhausted
"""

import functools
import logging
from typing import Any, Dict, List, Optional, TypedDict

from langgraph.graph import END, StateGraph

from src.models.backbone import FrozenBackbone
from src.models.config import RunConfig
from src.services.metrics import EvalMatrix, evaluate_stream_step, in_cluster_forgetting
from src.services.router import NEW, ForceMode, GroupState, RoutingDecision, route
from src.services.tasks import TaskInstance
from src.services.trainer import TrainOutcome, TrainTrace, merge, train_task
from src.utils.errors import PipelineError

logger = logging.getLogger(__name__)


# State Management Class
class StreamState(TypedDict):
    # Inputs
    config: RunConfig
    backbone: FrozenBackbone
    tasks: List[TaskInstance]
    force: ForceMode
    eta: Optional[float]
    evaluate: bool
    train: bool

    # Stream position
    index: int
    current_step: str

    # Group state and outputs
    groups: List[GroupState]
    decisions: List[RoutingDecision]
    traces: List[TrainTrace]
    inference_table: Dict[str, int]
    matrix: EvalMatrix
    timeline: List[Dict[str, Any]]
    kl_forgetting: List[Dict[str, Any]]

    # Current task's in-flight results
    decision: Optional[RoutingDecision]
    outcome: Optional[TrainOutcome]


def _stage(name: str):
    """Abort the run with the task id and stage on any failure inside a node"""

    def decorate(node):
        @functools.wraps(node)
        def wrapper(state: StreamState) -> StreamState:
            task_id = state["tasks"][state["index"]].task_id
            try:
                return node(state)
            except PipelineError:
                raise
            except Exception as e:
                logger.error(f"Error in {name} for {task_id}: {e}")
                raise PipelineError(task_id, name, e) from e

        return wrapper

    return decorate


def _memberships(groups: List[GroupState]) -> str:
    return ";".join(f"G{g.gid}:{'|'.join(g.members)}" for g in groups if g.members)


# Node Functions
@_stage("route")
def route_node(state: StreamState) -> StreamState:
    """Warm up the incoming task and assign it to a group"""
    task = state["tasks"][state["index"]]
    decision, groups = route(task, state["groups"], state["backbone"], state["config"], state["force"])
    state["groups"] = groups
    state["decision"] = decision
    state["decisions"].append(decision)
    state["current_step"] = "train"
    return state


@_stage("train")
def train_node(state: StreamState) -> StreamState:
    """Anchored training in the routed group (eviction may move the task)"""
    task = state["tasks"][state["index"]]
    decision = state["decision"]
    if not state["train"]:
        state["outcome"] = None
        state["current_step"] = "merge"
        return state

    group = next(g for g in state["groups"] if g.gid == decision.gid)
    epochs = state["config"].train.epochs_for(state["index"])
    outcome = train_task(task, group, state["groups"], state["backbone"], state["config"],
                         epochs=epochs, eta=state["eta"], founder=decision.decision == NEW)
    if outcome.trace.evicted:
        decision.evicted = True
    state["outcome"] = outcome
    state["traces"].append(outcome.trace)
    state["current_step"] = "merge"
    return state


@_stage("merge")
def merge_node(state: StreamState) -> StreamState:
    """Commit the trained intervention and record the task's group"""
    task = state["tasks"][state["index"]]
    outcome = state["outcome"]
    if outcome is not None:
        merge(outcome.live, outcome.group)
        gid = outcome.group.gid
    else:
        gid = state["decision"].gid
    state["inference_table"][task.task_id] = gid
    state["timeline"].append({
        "arrival": state["index"],
        "task": task.task_id,
        "decision": state["decision"].decision + (" (evicted)" if state["decision"].evicted else ""),
        "gid": gid,
        "memberships": _memberships(state["groups"]),
    })
    state["current_step"] = "evaluate"
    return state


@_stage("evaluate")
def evaluate_node(state: StreamState) -> StreamState:
    """Score every task seen so far under its group's intervention"""
    j = state["index"]
    task = state["tasks"][j]
    matrix = state["matrix"]
    if state["evaluate"]:
        interventions = {g.gid: g.intervention for g in state["groups"]}
        row = evaluate_stream_step(j, state["tasks"], interventions, state["inference_table"],
                                   state["backbone"])
        matrix.cluster_of = dict(state["inference_table"])
        matrix.set_row(j, row)
        outcome = state["outcome"]
        if outcome is not None:
            state["kl_forgetting"].append({
                "task": task.task_id,
                "gid": outcome.group.gid,
                "decision": state["decision"].decision,
                "terminal_kl": outcome.trace.terminal_kl,
                "terminal_sym_kl": outcome.trace.terminal_sym_kl,
                "in_cluster_forgetting": in_cluster_forgetting(matrix, j),
            })

    state["index"] = j + 1
    state["decision"] = None
    state["outcome"] = None
    state["current_step"] = "route"
    return state


def should_continue(state: StreamState) -> str:
    return "route" if state["index"] < len(state["tasks"]) else END


# Create the main workflow graph
def create_stream_graph():
    """Create and compile the per-task workflow"""
    workflow = StateGraph(StreamState)

    workflow.add_node("route", route_node)
    workflow.add_node("train", train_node)
    workflow.add_node("merge", merge_node)
    workflow.add_node("evaluate", evaluate_node)

    workflow.set_entry_point("route")
    workflow.add_edge("route", "train")
    workflow.add_edge("train", "merge")
    workflow.add_edge("merge", "evaluate")
    workflow.add_conditional_edges("evaluate", should_continue, {"route": "route", END: END})

    return workflow.compile()


def initialize_stream_state(config: RunConfig, backbone: FrozenBackbone, tasks: List[TaskInstance],
                            force: ForceMode = None, eta: Optional[float] = None,
                            evaluate: bool = True, train: bool = True) -> StreamState:
    """Initialize the stream state with an empty partition"""
    if not tasks:
        raise ValueError("a stream needs at least one task")
    return StreamState(
        config=config,
        backbone=backbone,
        tasks=list(tasks),
        force=force,
        eta=eta,
        evaluate=evaluate,
        train=train,
        index=0,
        current_step="route",
        groups=[],
        decisions=[],
        traces=[],
        inference_table={},
        matrix=EvalMatrix.empty([t.task_id for t in tasks]),
        timeline=[],
        kl_forgetting=[],
        decision=None,
        outcome=None,
    )


def recursion_limit(num_tasks: int) -> int:
    return 4 * num_tasks + 10
