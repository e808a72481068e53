import numpy as np
import pytest

from src.services.data_logger import report
from src.services.metrics import (
    EvalMatrix, bwt_metric, evaluate_stream_step, in_cluster_forgetting, invariance_audit,
    load_reference_matrix, op_metric, read_eval_csv, write_eval_csv,
)


def filled(rows, clusters=None):
    order = [f"task{i}" for i in range(len(rows))]
    m = EvalMatrix.empty(order, dict(zip(order, clusters)) if clusters else None)
    for j, row in enumerate(rows):
        m.set_row(j, row[:j + 1])
    return m


def test_reference_matrix_metrics():
    m = load_reference_matrix()
    assert m.size == 15 and m.is_complete
    assert op_metric(m) == pytest.approx(50.3133, abs=1e-4)
    assert bwt_metric(m) == pytest.approx(2.6067, abs=1e-4)


def test_reference_matrix_is_invariant():
    m = load_reference_matrix()
    assert len(set(m.cluster_of.values())) == 4
    assert invariance_audit(m) == []


def test_corrupted_cell_is_reported():
    m = load_reference_matrix()
    # task06 trains in G1; task03 sits in G2 and must not move
    m.scores[5, 2] += 1.0
    assert invariance_audit(m) == [(5, 2), (6, 2)]


def test_single_cluster_never_violates():
    m = load_reference_matrix()
    assert invariance_audit(m, {t: 0 for t in m.task_order}) == []


def test_in_cluster_forgetting():
    m = load_reference_matrix()
    assert in_cluster_forgetting(m, 5) == pytest.approx(8.0)
    assert in_cluster_forgetting(m, 0) is None
    assert in_cluster_forgetting(m, 2) is None


def test_constant_matrix():
    m = filled([[70.0] * 4] * 4)
    assert op_metric(m) == pytest.approx(70.0)
    assert bwt_metric(m) == 0.0


def test_single_task():
    m = filled([[42.0]])
    assert op_metric(m) == 42.0
    assert bwt_metric(m) == 0.0


def test_op_is_mean_of_final_row():
    m = filled([[10.0], [20.0, 30.0], [40.0, 50.0, 60.0]])
    assert op_metric(m) == pytest.approx(50.0)
    # diag 10, 30, 60 vs final 40, 50, 60
    assert bwt_metric(m) == pytest.approx((-30.0 - 20.0 + 0.0) / 3)


def test_bwt_tracks_final_row_drop():
    rng = np.random.default_rng(0)
    rows = rng.uniform(0, 100, size=(5, 5)).tolist()
    m = filled(rows)
    base = bwt_metric(m)
    m.scores[-1, :-1] -= 1.0
    assert bwt_metric(m) == pytest.approx(base + 4 / 5)


def test_incomplete_matrix_is_rejected():
    m = EvalMatrix.empty(["a", "b"])
    m.set_row(0, [50.0])
    for metric in (op_metric, bwt_metric, invariance_audit):
        with pytest.raises(ValueError):
            metric(m)


def test_rows_fill_in_order():
    m = EvalMatrix.empty(["a", "b"])
    with pytest.raises(ValueError):
        m.set_row(1, [1.0, 2.0])
    with pytest.raises(ValueError):
        m.set_row(0, [1.0, 2.0])
    m.set_row(0, [1.0])
    with pytest.raises(ValueError):
        m.entry(0, 1)
    assert m.entry(0, 0) == 1.0


def test_csv_round_trip(tmp_path):
    m = load_reference_matrix()
    path = str(tmp_path / "eval_matrix.csv")
    write_eval_csv(m, path)
    back = read_eval_csv(path)
    assert back.task_order == m.task_order
    assert back.cluster_of == m.cluster_of
    assert op_metric(back) == op_metric(m)
    assert bwt_metric(back) == bwt_metric(m)


def test_csv_keeps_partial_rows(tmp_path):
    m = EvalMatrix.empty(["a", "b", "c"])
    m.set_row(0, [1.5])
    path = str(tmp_path / "partial.csv")
    write_eval_csv(m, path)
    back = read_eval_csv(path)
    assert back.rows_filled == 1 and not back.is_complete


def test_evaluate_rejects_unknown_task(tiny_backbone, tiny_tasks):
    with pytest.raises(ValueError, match="unknown task id"):
        evaluate_stream_step(0, tiny_tasks, {}, {}, tiny_backbone)


def test_report_from_directory(tmp_path):
    write_eval_csv(load_reference_matrix(), str(tmp_path / "eval_matrix.csv"))
    result = report(str(tmp_path))
    assert result["op"] == pytest.approx(50.3133, abs=1e-4)
    assert result["violations"] == []
    assert "Groups: 4" in result["summary"]


def test_report_needs_the_matrix(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(str(tmp_path / "missing"))
