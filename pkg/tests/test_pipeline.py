import json
import os
from dataclasses import replace

import numpy as np
import pytest

from src.llm.stream_runner import (
    CraftRunner, ablate, calibrate_eta, check_determinism, mode_settings, rescore, route_stream,
    run_stream, separation, sweep,
)
from src.models.config import RunConfig, apply_overrides
from src.models.state_store import StateStore, read_state, write_state
from src.services.data_logger import REPORT_FILES, report, verify_report_hash
from src.services.router import NEW, new_intervention
from src.services.tasks import Split
from src.utils.errors import PipelineError
import main as cli
from main import main


def in_dir(config, name):
    return apply_overrides(config, {"output_dir": os.path.join(config.output_dir, name)})


def test_run_persists_a_consistent_report(tiny_config, tiny_tasks):
    result = run_stream(tiny_config)
    run_dir = tiny_config.output_dir

    for name in REPORT_FILES + ["config.json", "report.sha256"]:
        assert os.path.exists(os.path.join(run_dir, name)), name
    assert result.matrix.is_complete
    assert set(result.inference_table) == {t.task_id for t in tiny_tasks}
    assert result.violations == []

    members = [m for g in result.groups for m in g.members]
    assert sorted(members) == sorted(t.task_id for t in tiny_tasks)
    assert result.decisions[0].decision == NEW and result.decisions[0].gid == 0

    stored = report(run_dir)
    assert stored["op"] == result.op
    assert stored["bwt"] == result.bwt
    assert len(stored["routing"]) == len(tiny_tasks)

    with open(os.path.join(run_dir, "traces.jsonl"), encoding="utf-8") as f:
        lines = [json.loads(line) for line in f]
    assert {line["task"] for line in lines} == {t.task_id for t in tiny_tasks}
    assert set(lines[0]) == {"task", "gid", "aborted", "step", "epoch", "task_loss", "kl", "lr"}


def test_runs_are_deterministic(tiny_config):
    assert check_determinism(tiny_config)


def test_rescore_reproduces_final_row(tiny_config):
    run_stream(tiny_config)
    result = rescore(tiny_config.output_dir)
    assert result["mismatches"] == []
    assert len(result["scores"]) == 3


def test_single_task_stream(tiny_config, tiny_tasks):
    result = run_stream(tiny_config, tasks=tiny_tasks[:1])
    assert result.num_groups == 1
    assert result.bwt == 0.0


def test_task_wise_never_forgets(tiny_config, tiny_tasks):
    result = run_stream(apply_overrides(tiny_config, {"mode": "task-wise"}))
    assert result.num_groups == len(tiny_tasks)
    assert result.bwt == 0.0
    assert not any(t.evicted for t in result.traces)


def test_all_in_one_shares_one_group(tiny_config, tiny_tasks):
    result = run_stream(apply_overrides(tiny_config, {"mode": "all-in-one"}))
    assert result.num_groups == 1
    assert result.groups[0].members == [t.task_id for t in tiny_tasks]
    assert result.config.train.beta == 0.0


def test_mode_settings(tiny_config):
    force, config, evict = mode_settings(apply_overrides(tiny_config, {"mode": "task-similar-noreg"}))
    assert force is None and evict and config.train.beta == 0.0
    force, config, evict = mode_settings(tiny_config)
    assert force is None and evict and config.train.beta == tiny_config.train.beta
    force, _, evict = mode_settings(apply_overrides(tiny_config, {"mode": "task-wise"}))
    assert force == "task-wise" and not evict


def test_route_only_dry_run(tiny_config, tiny_tasks):
    result = route_stream(tiny_config)
    assert [d.task_id for d in result["decisions"]] == [t.task_id for t in tiny_tasks]
    assert result["traces"] == []
    assert not result["matrix"].is_complete


def test_sweep_rows(tiny_config, tiny_tasks):
    rows = sweep(tiny_config, "delta", [0.0, 1e9])
    assert [r["value"] for r in rows] == [0.0, 1e9]
    assert rows[0]["K"] == len(tiny_tasks)
    assert all(sum(len(p) for p in r["partition"]) == len(tiny_tasks) for r in rows)


def test_sweep_validates_arguments(tiny_config):
    with pytest.raises(ValueError):
        sweep(tiny_config, "lr", [0.1, 0.2])
    with pytest.raises(ValueError):
        sweep(tiny_config, "delta", [0.5])


def test_ablate_reports_mode(tiny_config):
    row = ablate(tiny_config, "task-wise")
    assert row["mode"] == "task-wise" and row["BWT"] == 0.0


def test_calibrated_eta_is_positive(tiny_config):
    config = apply_overrides(tiny_config, {"train.eta": None})
    assert calibrate_eta(config) > 0.0


def test_separation_never_merges_at_zero_delta(tiny_config):
    result = separation(tiny_config, [0.0])
    assert result["rows"][0]["decision"] == NEW
    assert result["first_merge_delta"] is None


def test_failures_name_task_and_stage(tiny_config, tiny_tasks):
    empty = Split(np.zeros((0, 5), dtype=np.int64), np.zeros((0, 1), dtype=np.int64))
    broken = replace(tiny_tasks[0], train=empty)
    with pytest.raises(PipelineError) as info:
        CraftRunner(tiny_config).execute([broken], eta=tiny_config.train.eta)
    assert info.value.task_id == broken.task_id
    assert info.value.stage == "route"


def test_state_store_round_trip(tmp_path, tiny_config, tiny_backbone):
    store = StateStore(str(tmp_path / "states"))
    store.save_backbone(tiny_backbone)
    iv = new_intervention(tiny_config, 9)
    iv.edit(0).b.data += 0.25
    store.save_intervention("group3", iv, {"gid": "3", "members": "a;b"})

    assert store.load_backbone().checksum() == tiny_backbone.checksum()
    back, header = store.load_intervention("group3")
    assert back.same_as(iv)
    assert header["members"] == "a;b"
    assert store.list_states() == ["backbone", "group3"]


def test_state_file_rejects_foreign_bytes(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as f:
        f.write(b"not a state file")
    with pytest.raises(ValueError):
        read_state(path)

    write_state(path, {"kind": "x"}, {"v": np.arange(3.0)})
    header, arrays = read_state(path)
    assert header == {"kind": "x"}
    np.testing.assert_array_equal(arrays["v"], [0.0, 1.0, 2.0])


def test_config_overrides_and_persistence(tmp_path, tiny_config):
    config = apply_overrides(tiny_config, ["router.delta=0.25", "train.epoch_schedule=[1, 2]"])
    assert config.router.delta == 0.25
    assert config.train.epochs_for(1) == 2 and config.train.epochs_for(5) == config.train.epochs
    with pytest.raises(ValueError):
        apply_overrides(config, {"router.gamma": 1.0})
    with pytest.raises(ValueError):
        apply_overrides(config, ["router.delta"])

    path = str(tmp_path / "config.json")
    config.save(path)
    assert RunConfig.load(path) == config
    with pytest.raises(FileNotFoundError):
        RunConfig.load(str(tmp_path / "nope.json"))


def test_full_profile():
    config = RunConfig.full_profile()
    assert (config.intervention.rank, config.intervention.t_pos) == (8, 15)
    assert config.train.lr == 2e-4 and config.router.warmup_steps == 100


def test_cli_fixtures_and_missing_report(tmp_path):
    assert main(["fixtures"]) == 0
    assert main(["report", str(tmp_path / "missing")]) == 2



def test_cli_run_checks_report_hash(tmp_path, tiny_config, monkeypatch):
    path = str(tmp_path / "tiny.json")
    tiny_config.save(path)
    assert main(["run", "--config", path]) == 0
    assert verify_report_hash(tiny_config.output_dir)

    def edited_run(config):
        result = run_stream(config)
        with open(os.path.join(config.output_dir, REPORT_FILES[-1]), "a", encoding="utf-8") as f:
            f.write("edited\n")
        return result

    monkeypatch.setattr(cli, "run_stream", edited_run)
    assert main(["run", "--config", path]) == 1
    assert not verify_report_hash(tiny_config.output_dir)
