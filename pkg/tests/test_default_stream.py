"""End-to-end behaviour of the desk defaults on the default eight-task stream"""

import os

import pytest

from src.llm.stream_runner import calibrate_eta, learnability_audit, run_stream, sweep
from src.models.backbone import build_backbone
from src.models.config import RunConfig, apply_overrides
from src.models.loreft import snapshot
from src.services.router import NEW, route
from src.services.tasks import split_halves, stream_from_config
from src.services.trainer import merge, train_task


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    """Default config with eta calibrated once for the whole module"""
    config = RunConfig(output_dir=str(tmp_path_factory.mktemp("default")))
    return apply_overrides(config, {"train.eta": calibrate_eta(config)})


@pytest.fixture(scope="module")
def backbone(calibrated):
    return build_backbone(calibrated.backbone)


@pytest.fixture(scope="module")
def tasks(calibrated):
    return stream_from_config(calibrated.stream, calibrated.seeds.data_seed)


@pytest.fixture(scope="module")
def reports(calibrated):
    cache = {}

    def get(mode):
        if mode not in cache:
            config = apply_overrides(calibrated, {
                "mode": mode, "output_dir": os.path.join(calibrated.output_dir, mode)})
            cache[mode] = run_stream(config, persist=False)
        return cache[mode]

    return get


def partition(report):
    return sorted(sorted(g.members) for g in report.groups if g.members)


def test_every_default_task_is_learnable(reports):
    report = reports("task-wise")
    assert learnability_audit(report.matrix) == []


def test_partition_refines_families(reports, tasks):
    family = {t.task_id: t.family_id for t in tasks}
    report = reports("craft")
    assert len(report.inference_table) == len(tasks)
    for members in partition(report):
        assert len({family[m] for m in members}) == 1, members


def test_partition_is_stable_across_warmup_lengths(calibrated):
    config = apply_overrides(calibrated, {"output_dir": os.path.join(calibrated.output_dir, "swu")})
    rows = sweep(config, "warmup_steps", [50, 100, 200])
    assert rows[0]["partition"] == rows[1]["partition"] == rows[2]["partition"]


@pytest.mark.parametrize("index", [0, 1, 2, 3])
def test_halves_of_one_task_open_two_groups(calibrated, tasks, index):
    first, second = split_halves(tasks[index])
    config = apply_overrides(calibrated, {"output_dir": os.path.join(calibrated.output_dir, f"h{index}")})
    report = run_stream(config, tasks=[first, second], persist=False)
    assert [d.decision for d in report.decisions] == [NEW, NEW]
    assert not report.decisions[1].floor_triggered
    assert report.decisions[1].D_K >= calibrated.router.epsilon


def test_far_family_join_is_evicted(calibrated, backbone, tasks):
    founder, newcomer = tasks[0], tasks[3]
    assert founder.kind == "modular-map" and newcomer.kind == "marker-classification"
    eta = calibrated.train.eta

    _, groups = route(founder, [], backbone, calibrated, force="task-wise")
    merge(train_task(founder, groups[0], groups, backbone, calibrated, founder=True).live, groups[0])
    before = snapshot(groups[0].intervention)

    _, groups = route(newcomer, groups, backbone, calibrated, force=0)
    outcome = train_task(newcomer, groups[0], groups, backbone, calibrated, eta=eta)

    trace = outcome.trace
    assert trace.evicted and trace.evicted_from == 0
    assert trace.aborted.mu1 > eta
    assert groups[0].members == [founder.task_id]
    assert groups[0].intervention.same_as(before)
    assert outcome.group.members == [newcomer.task_id]


def test_ablation_ordering(reports):
    craft, noreg, shared = reports("craft"), reports("task-similar-noreg"), reports("all-in-one")
    assert shared.bwt > noreg.bwt >= craft.bwt
    assert craft.op > shared.op


def test_beta_lowers_terminal_divergence(calibrated):
    config = apply_overrides(calibrated, {"output_dir": os.path.join(calibrated.output_dir, "beta")})
    rows = sweep(config, "beta", [0.0, 0.3, 1.0])
    sym = [r["terminal_sym_kl"] for r in rows]
    assert sym[0] >= sym[1] >= sym[2]
    assert sym[0] > sym[2]


def test_default_stream_keeps_other_groups_frozen(reports):
    report = reports("craft")
    assert report.violations == []
