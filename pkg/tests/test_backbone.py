import numpy as np
import pytest

from src.autograd import backward, ops
from src.models.backbone import HookSet, build_backbone, forward, greedy_decode, weight_shapes
from src.models.config import BackboneConfig
from src.models.loreft import Intervention, StreamSpec


def make_intervention(config, layers=None, seed=0, rank=2, t_pos=1):
    layers = range(config.num_layers) if layers is None else layers
    return Intervention.initialize(layers, config.hidden_dim, rank, StreamSpec(t_pos), seed)


def perturb(iv, seed=1):
    rng = np.random.default_rng(seed)
    for p in iv.parameters():
        if p.name.endswith(".b") or p.name.endswith(".W"):
            p.data += 0.5 * rng.standard_normal(p.shape)
    return iv


def test_forward_shapes(small_backbone, small_backbone_config):
    tokens = np.array([0, 3, 5, 7, 1])
    logits, hidden = forward(small_backbone, tokens)
    assert logits.shape == (5, small_backbone_config.vocab_size)
    assert len(hidden) == small_backbone_config.num_layers
    assert all(h.shape == (5, small_backbone_config.hidden_dim) for h in hidden)

    batch_logits, _ = forward(small_backbone, np.stack([tokens, tokens[::-1]]))
    assert batch_logits.shape == (2, 5, small_backbone_config.vocab_size)
    np.testing.assert_allclose(batch_logits.data[0], logits.data, atol=1e-12)


def test_build_is_deterministic(small_backbone_config):
    a, b = build_backbone(small_backbone_config), build_backbone(small_backbone_config)
    assert a.checksum() == b.checksum()
    other = build_backbone(small_backbone_config.model_copy(update={"init_seed": 6}))
    assert other.checksum() != a.checksum()


def test_weight_shapes_cover_every_block(small_backbone_config):
    shapes = weight_shapes(small_backbone_config)
    assert shapes["tok_emb"] == (16, 16)
    assert "block1.w2" in shapes and "block2.w2" not in shapes


def test_weights_are_frozen(small_backbone):
    with pytest.raises(ValueError):
        small_backbone.w("tok_emb").data[0, 0] = 1.0
    assert not any(t.requires_grad for t in small_backbone.weights.values())


@pytest.mark.parametrize("tokens", [np.array([0, 16]), np.array([-1, 2]), np.arange(13) % 16,
                                    np.array([0.0, 1.0])])
def test_rejects_bad_tokens(small_backbone, tokens):
    with pytest.raises(ValueError):
        forward(small_backbone, tokens)


def test_rejects_hook_outside_stack(small_backbone, small_backbone_config):
    hooks = HookSet().add(small_backbone_config.num_layers, [0], make_intervention(small_backbone_config))
    with pytest.raises(ValueError, match="layer"):
        forward(small_backbone, np.array([0, 1, 2]), hooks)


def test_rejects_hook_past_sequence(small_backbone, small_backbone_config):
    hooks = HookSet().add(0, [5], make_intervention(small_backbone_config))
    with pytest.raises(ValueError, match="positions"):
        forward(small_backbone, np.array([0, 1, 2]), hooks)


def test_hookset_rejects_double_hooking(small_backbone_config):
    iv = make_intervention(small_backbone_config)
    hooks = HookSet().add(0, [0, 1], iv)
    with pytest.raises(ValueError):
        hooks.add(0, [1], iv)
    with pytest.raises(ValueError):
        HookSet().add(1, [2, 2], iv)
    hooks.add(1, [1], iv)
    assert len(hooks) == 2


def test_causal_attention(small_backbone):
    a = np.array([0, 3, 5, 7, 1])
    b = a.copy()
    b[-1] = 9
    logits_a, _ = forward(small_backbone, a)
    logits_b, _ = forward(small_backbone, b)
    np.testing.assert_array_equal(logits_a.data[:-1], logits_b.data[:-1])
    assert not np.array_equal(logits_a.data[-1], logits_b.data[-1])


def test_fresh_intervention_is_identity(small_backbone, small_backbone_config, rng):
    tokens = rng.integers(0, small_backbone_config.vocab_size, size=(100, 8))
    iv = make_intervention(small_backbone_config, t_pos=4)
    baseline, _ = forward(small_backbone, tokens)
    hooked, _ = forward(small_backbone, tokens, HookSet.for_intervention(iv, 8))
    np.testing.assert_array_equal(hooked.data, baseline.data)


def test_hook_edits_only_hooked_positions(small_backbone, small_backbone_config):
    last = small_backbone_config.num_layers - 1
    tokens = np.array([0, 3, 5, 7, 1, 2])
    iv = perturb(make_intervention(small_backbone_config, layers=[last], t_pos=1))
    _, base_hidden = forward(small_backbone, tokens)
    _, hidden = forward(small_backbone, tokens, HookSet.for_intervention(iv, 6))

    np.testing.assert_array_equal(hidden[last].data[1:5], base_hidden[last].data[1:5])
    assert not np.allclose(hidden[last].data[[0, 5]], base_hidden[last].data[[0, 5]])


def test_gradients_reach_only_the_intervention(small_backbone, small_backbone_config):
    tokens = np.array([[0, 3, 5, 7, 1, 2]])
    iv = perturb(make_intervention(small_backbone_config, t_pos=2))
    logits, _ = forward(small_backbone, tokens, HookSet.for_intervention(iv, 6))
    backward(ops.sum_all(ops.mul(logits, logits)))

    assert all(p.grad is not None for p in iv.parameters())
    assert all(w.grad is None for w in small_backbone.weights.values())


def test_greedy_decode_extends_prompts(small_backbone, small_backbone_config):
    prompts = np.array([[0, 3, 5], [0, 4, 6]])
    out = greedy_decode(small_backbone, prompts, 3)
    assert out.shape == (2, 3)
    assert out.min() >= 0 and out.max() < small_backbone_config.vocab_size

    logits, _ = forward(small_backbone, prompts)
    np.testing.assert_array_equal(out[:, 0], np.argmax(logits.data[:, -1, :], axis=-1))

    iv = make_intervention(small_backbone_config)
    np.testing.assert_array_equal(greedy_decode(small_backbone, prompts, 3, iv), out)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        BackboneConfig(hidden_dim=10, num_heads=4)
