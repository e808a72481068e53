"""
Continual-learning bookkeeping

a[j, t] is the held-out score (percent) of task t right after task j was
trained, defined for t <= j. OP averages the last row; BWT averages the drop
from the diagonal to the last row (positive = forgetting).
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.models.backbone import FrozenBackbone, greedy_decode
from src.models.loreft import Intervention
from .tasks import TaskInstance

logger = logging.getLogger(__name__)

REFERENCE_FIXTURE = os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
    "fixtures", "reference_eval_matrix.csv",
)


@dataclass
class EvalMatrix:
    task_order: List[str]
    scores: np.ndarray
    cluster_of: Dict[str, int] = field(default_factory=dict)
    rows_filled: int = 0

    @classmethod
    def empty(cls, task_order: Sequence[str], cluster_of: Optional[Dict[str, int]] = None) -> "EvalMatrix":
        T = len(task_order)
        return cls(list(task_order), np.full((T, T), np.nan), dict(cluster_of or {}))

    @property
    def size(self) -> int:
        return len(self.task_order)

    @property
    def is_complete(self) -> bool:
        return self.size > 0 and self.rows_filled == self.size

    def set_row(self, j: int, values: Sequence[float]):
        if j != self.rows_filled:
            raise ValueError(f"rows are filled in order; expected row {self.rows_filled}, got {j}")
        if len(values) != j + 1:
            raise ValueError(f"row {j} needs {j + 1} entries, got {len(values)}")
        self.scores[j, :j + 1] = values
        self.rows_filled += 1

    def entry(self, j: int, t: int) -> float:
        if t > j or j >= self.rows_filled:
            raise ValueError(f"entry ({j}, {t}) is not defined")
        return float(self.scores[j, t])


def _require_complete(m: EvalMatrix):
    if not m.is_complete:
        raise ValueError(f"evaluation matrix is incomplete ({m.rows_filled}/{m.size} rows)")


def score_task(task: TaskInstance, iv: Optional[Intervention], backbone: FrozenBackbone) -> float:
    """Exact-match accuracy (percent) of greedy decodes on the held-out split"""
    predicted = greedy_decode(backbone, task.heldout.prompts, task.label_len, iv)
    hits = np.all(predicted == task.heldout.labels, axis=1)
    return float(hits.mean() * 100.0)


def evaluate_stream_step(j: int, tasks: Sequence[TaskInstance], interventions: Dict[int, Intervention],
                         inference_table: Dict[str, int], backbone: FrozenBackbone) -> List[float]:
    """Row j: every task t <= j scored under the intervention of its group"""
    if j >= len(tasks):
        raise ValueError(f"row {j} needs {j + 1} tasks, got {len(tasks)}")
    row = []
    for task in tasks[:j + 1]:
        if task.task_id not in inference_table:
            raise ValueError(f"unknown task id {task.task_id!r}")
        gid = inference_table[task.task_id]
        if gid not in interventions:
            raise ValueError(f"task {task.task_id!r} maps to missing group {gid}")
        row.append(score_task(task, interventions[gid], backbone))
    logger.info(f"Evaluated row {j}: " + ", ".join(f"{v:.1f}" for v in row))
    return row


def op_metric(m: EvalMatrix) -> float:
    _require_complete(m)
    return float(np.mean(m.scores[-1, :]))


def bwt_metric(m: EvalMatrix) -> float:
    _require_complete(m)
    return float(np.mean(np.diag(m.scores) - m.scores[-1, :]))


def invariance_audit(m: EvalMatrix, cluster_of: Optional[Dict[str, int]] = None) -> List[Tuple[int, int]]:
    """Cells (j, t) in a different cluster from task j whose score moved when j trained"""
    _require_complete(m)
    cluster_of = cluster_of if cluster_of is not None else m.cluster_of
    violations = []
    for j in range(1, m.size):
        group_j = cluster_of[m.task_order[j]]
        for t in range(j):
            if cluster_of[m.task_order[t]] == group_j:
                continue
            if m.scores[j, t] != m.scores[j - 1, t]:
                violations.append((j, t))
    if violations:
        logger.warning(f"Cross-group invariance violated at {violations}")
    return violations


def in_cluster_forgetting(m: EvalMatrix, j: int, cluster_of: Optional[Dict[str, int]] = None
                          ) -> Optional[float]:
    """Mean drop on earlier tasks of task j's cluster when j trained; None if it has none"""
    cluster_of = cluster_of if cluster_of is not None else m.cluster_of
    if j < 1:
        return None
    group_j = cluster_of[m.task_order[j]]
    drops = [m.scores[j - 1, t] - m.scores[j, t] for t in range(j)
             if cluster_of[m.task_order[t]] == group_j]
    return float(np.mean(drops)) if drops else None


# ----------------------------------------------------------------------------
# CSV: train rows x test columns, blanks above the diagonal, footer block
# ----------------------------------------------------------------------------

def write_eval_csv(m: EvalMatrix, path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["train\\test", *m.task_order])
        for j, task_id in enumerate(m.task_order):
            cells = [repr(float(m.scores[j, t])) if t <= j and j < m.rows_filled else ""
                     for t in range(m.size)]
            writer.writerow([task_id, *cells])
        writer.writerow([])
        if m.is_complete:
            writer.writerow(["OP", repr(op_metric(m))])
            writer.writerow(["BWT", repr(bwt_metric(m))])
        if m.cluster_of:
            writer.writerow(["group", *(m.cluster_of.get(t, "") for t in m.task_order)])


def read_eval_csv(path: str) -> EvalMatrix:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Evaluation matrix not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))

    task_order = rows[0][1:]
    m = EvalMatrix.empty(task_order)
    for j in range(len(task_order)):
        cells = rows[1 + j][1:]
        values = [float(c) for c in cells[:j + 1] if c != ""]
        if len(values) != j + 1:
            break
        m.set_row(j, values)

    for row in rows[1 + len(task_order):]:
        if row and row[0] == "group":
            m.cluster_of = {t: int(g) for t, g in zip(task_order, row[1:]) if g != ""}
    return m


def load_reference_matrix(path: str = REFERENCE_FIXTURE) -> EvalMatrix:
    """The published 15-task evaluation matrix with its group assignment"""
    return read_eval_csv(path)
