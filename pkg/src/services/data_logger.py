"""
Run artifact logging
Writes the routing log, per-step traces, evaluation matrix, group timeline,
KL/forgetting table and summary for one run directory
"""

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from src.models.config import RunConfig
from .metrics import EvalMatrix, bwt_metric, invariance_audit, op_metric, read_eval_csv, write_eval_csv
from .router import ROUTING_COLUMNS, GroupState, RoutingDecision
from .trainer import TrainTrace

logger = logging.getLogger(__name__)

ROUTING_FILE = "routing.csv"
TRACES_FILE = "traces.jsonl"
MATRIX_FILE = "eval_matrix.csv"
GROUPS_FILE = "groups.csv"
KL_FORGETTING_FILE = "kl_forgetting.csv"
SUMMARY_FILE = "summary.txt"
HASH_FILE = "report.sha256"
CONFIG_FILE = "config.json"

# Files covered by the determinism hash; config.json carries the output path
REPORT_FILES = [ROUTING_FILE, TRACES_FILE, MATRIX_FILE, GROUPS_FILE, KL_FORGETTING_FILE, SUMMARY_FILE]


@dataclass
class RunReport:
    config: RunConfig
    decisions: List[RoutingDecision] = field(default_factory=list)
    traces: List[TrainTrace] = field(default_factory=list)
    matrix: Optional[EvalMatrix] = None
    groups: List[GroupState] = field(default_factory=list)
    inference_table: Dict[str, int] = field(default_factory=dict)
    timeline: List[Dict[str, Any]] = field(default_factory=list)
    kl_forgetting: List[Dict[str, Any]] = field(default_factory=list)
    violations: List[Any] = field(default_factory=list)
    digest: Optional[str] = None

    @property
    def num_groups(self) -> int:
        return len([g for g in self.groups if g.members])

    @property
    def op(self) -> float:
        return op_metric(self.matrix)

    @property
    def bwt(self) -> float:
        return bwt_metric(self.matrix)


def log_routing_decisions(decisions: List[RoutingDecision], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ROUTING_COLUMNS)
        writer.writeheader()
        for decision in decisions:
            writer.writerow(decision.to_row())
    logger.info(f"Logged {len(decisions)} routing decisions to: {path}")


def log_traces(traces: List[TrainTrace], path: str):
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            attempts = [(trace.aborted, True), (trace, False)] if trace.aborted else [(trace, False)]
            for attempt, aborted in attempts:
                for record in attempt.records:
                    line = {"task": trace.task_id, "gid": attempt.gid, "aborted": aborted}
                    line.update(record.to_dict())
                    f.write(json.dumps(line, sort_keys=True) + "\n")
    logger.info(f"Logged {len(traces)} training traces to: {path}")


def log_group_timeline(timeline: List[Dict[str, Any]], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["arrival", "task", "decision", "gid", "memberships"])
        writer.writeheader()
        for row in timeline:
            writer.writerow(row)


def log_kl_forgetting(rows: List[Dict[str, Any]], path: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["task", "gid", "decision", "terminal_kl",
                                               "terminal_sym_kl", "in_cluster_forgetting"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def render_summary(matrix: EvalMatrix, decisions_rows: List[Dict[str, str]],
                   violations: List[Any], mode: str) -> str:
    lines = ["=== CRAFT RUN SUMMARY ===", f"Mode: {mode}", f"Tasks: {matrix.size}"]
    gids = sorted(set(matrix.cluster_of.values()))
    lines.append(f"Groups: {len(gids)}")
    for gid in gids:
        members = [t for t in matrix.task_order if matrix.cluster_of[t] == gid]
        lines.append(f"  G{gid}: {', '.join(members)}")
    evicted = [row["task"] for row in decisions_rows if row.get("evicted") == "yes"]
    lines.append(f"Evicted: {', '.join(evicted) if evicted else 'none'}")
    if matrix.is_complete:
        lines.append(f"OP: {op_metric(matrix):.4f}")
        lines.append(f"BWT: {bwt_metric(matrix):.4f}")
    lines.append(f"Invariance violations: {violations if violations else 'none'}")
    return "\n".join(lines) + "\n"


def hash_reports(run_dir: str) -> str:
    digest = hashlib.sha256()
    for name in REPORT_FILES:
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            continue
        digest.update(name.encode("utf-8"))
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


def verify_report_hash(run_dir: str) -> bool:
    """Recompute the report hash and compare it with the stored report.sha256"""
    path = os.path.join(run_dir, HASH_FILE)
    if not os.path.exists(path):
        logger.error(f"Report hash missing: {path}")
        return False
    with open(path, "r", encoding="utf-8") as f:
        stored = f.read().strip()
    actual = hash_reports(run_dir)
    if stored != actual:
        logger.error(f"Report hash mismatch in {run_dir}: stored {stored[:12]}, found {actual[:12]}")
        return False
    return True


def persist_report(report: RunReport, run_dir: str) -> str:
    """Write every artifact of a finished run; returns the determinism hash"""
    os.makedirs(run_dir, exist_ok=True)
    report.config.save(os.path.join(run_dir, CONFIG_FILE))
    log_routing_decisions(report.decisions, os.path.join(run_dir, ROUTING_FILE))
    log_traces(report.traces, os.path.join(run_dir, TRACES_FILE))
    write_eval_csv(report.matrix, os.path.join(run_dir, MATRIX_FILE))
    log_group_timeline(report.timeline, os.path.join(run_dir, GROUPS_FILE))
    log_kl_forgetting(report.kl_forgetting, os.path.join(run_dir, KL_FORGETTING_FILE))

    summary = render_summary(report.matrix, [d.to_row() for d in report.decisions],
                             report.violations, report.config.mode)
    with open(os.path.join(run_dir, SUMMARY_FILE), "w", encoding="utf-8") as f:
        f.write(summary)

    digest = hash_reports(run_dir)
    with open(os.path.join(run_dir, HASH_FILE), "w", encoding="utf-8") as f:
        f.write(digest + "\n")
    report.digest = digest
    logger.info(f"Report written to {run_dir} (sha256 {digest[:12]})")
    return digest


def report(run_dir: str) -> Dict[str, Any]:
    """Re-render the summary of a completed run from its directory alone"""
    matrix_path = os.path.join(run_dir, MATRIX_FILE)
    if not os.path.exists(matrix_path):
        raise FileNotFoundError(f"Run data missing: {matrix_path}")

    matrix = read_eval_csv(matrix_path)
    rows = []
    routing_path = os.path.join(run_dir, ROUTING_FILE)
    if os.path.exists(routing_path):
        with open(routing_path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    violations = []
    if matrix.is_complete and matrix.cluster_of:
        violations = invariance_audit(matrix)

    mode = "craft"
    config_path = os.path.join(run_dir, CONFIG_FILE)
    if os.path.exists(config_path):
        mode = RunConfig.load(config_path).mode
    summary = render_summary(matrix, rows, violations, mode)
    return {
        "matrix": matrix,
        "routing": rows,
        "op": op_metric(matrix) if matrix.is_complete else None,
        "bwt": bwt_metric(matrix) if matrix.is_complete else None,
        "violations": violations,
        "summary": summary,
    }
