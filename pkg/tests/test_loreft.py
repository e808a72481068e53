import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.autograd import Tensor, backward, ops
from src.models.loreft import (
    Intervention, StreamSpec, apply, clone, orthonormalize, select_positions, snapshot, transfer_into,
)
from src.utils.errors import RankDeficiencyError, ShapeError

D = 8


def make(seed=0, layers=(0, 1), rank=3, t_pos=2):
    return Intervention.initialize(layers, D, rank, StreamSpec(t_pos), seed)


def randomize(iv, seed=1):
    rng = np.random.default_rng(seed)
    for p in iv.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    return iv


@pytest.mark.parametrize("prompt_len,t_pos,expected", [
    (10, 3, [0, 1, 2, 7, 8, 9]),
    (4, 3, [0, 1, 2, 3]),
    (6, 3, [0, 1, 2, 3, 4, 5]),
    (1, 3, [0]),
    (5, 1, [0, 4]),
])
def test_select_positions(prompt_len, t_pos, expected):
    assert select_positions(prompt_len, StreamSpec(t_pos)).tolist() == expected


def test_stream_spec_needs_positive_t_pos():
    with pytest.raises(ValueError):
        StreamSpec(0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rank=st.integers(1, D))
def test_projection_is_orthonormal(seed, rank):
    iv = randomize(make(rank=rank), seed)
    assert iv.orthonormality_error() < 1e-10


def test_rank_deficient_source_is_rejected():
    raw = np.ones((2, D))
    with pytest.raises(RankDeficiencyError):
        orthonormalize(Tensor(raw))


def test_rank_cannot_exceed_width():
    with pytest.raises(ValueError):
        Intervention.initialize([0], 4, 5, StreamSpec(1), 0)


def test_fresh_intervention_is_identity(rng):
    iv = make()
    h = rng.standard_normal((5, D))
    np.testing.assert_array_equal(apply(h, iv, layer=0).data, h)


def test_apply_matches_closed_form(rng):
    iv = randomize(make(layers=(0,)))
    edit = iv.edit()
    R = edit.projection().data
    h = rng.standard_normal(D)
    expected = h + R.T @ (edit.W.data @ h + edit.b.data - R @ h)
    np.testing.assert_allclose(apply(h, iv).data, expected, atol=1e-12)


def test_apply_edits_only_the_row_space(rng):
    iv = randomize(make(layers=(0,)))
    R = iv.edit().projection().data
    h = rng.standard_normal(D)
    delta = apply(h, iv).data - h
    # the change lies in span(R)
    np.testing.assert_allclose(R.T @ (R @ delta), delta, atol=1e-12)


def test_apply_rejects_wrong_width():
    with pytest.raises(ShapeError):
        apply(np.zeros(D + 1), make(layers=(0,)))


def test_apply_needs_layer_for_multi_layer():
    with pytest.raises(ValueError):
        apply(np.zeros(D), make())


def test_gradients_reach_every_parameter(rng):
    iv = randomize(make(layers=(0,)))
    out = apply(rng.standard_normal((3, D)), iv)
    backward(ops.sum_all(ops.mul(out, out)))
    assert all(p.grad is not None and np.any(p.grad != 0) for p in iv.parameters())


def test_snapshot_is_frozen_and_detached():
    iv = randomize(make())
    frozen = snapshot(iv)
    assert frozen.same_as(iv)
    assert not frozen.trainable

    iv.edit(0).W.data += 1.0
    assert not frozen.same_as(iv)
    with pytest.raises(ValueError):
        frozen.edit(0).W.data[0, 0] = 3.0


def test_transfer_into_copies_values():
    src, dst = randomize(make(seed=3)), make(seed=4)
    transfer_into(src, dst)
    assert dst.same_as(src)
    src.edit(0).b.data += 1.0
    assert not dst.same_as(src)


def test_transfer_into_snapshot_is_refused():
    with pytest.raises(TypeError):
        transfer_into(make(), snapshot(make()))


def test_transfer_into_checks_layout():
    with pytest.raises(ShapeError):
        transfer_into(make(layers=(0,)), make(layers=(0, 1)))
    with pytest.raises(ShapeError):
        transfer_into(make(rank=2), make(rank=3))


def test_clone_is_trainable_copy():
    iv = randomize(make())
    copy = clone(snapshot(iv))
    assert copy.trainable and copy.same_as(iv)
    copy.edit(1).R_raw.data += 1.0
    assert not copy.same_as(iv)


def test_arrays_round_trip():
    iv = randomize(make())
    back = Intervention.from_arrays(iv.to_arrays(), iv.rank, iv.hidden_dim, iv.stream_spec)
    assert back.same_as(iv)
    assert back.layers == [0, 1]
