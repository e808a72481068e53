"""
Frozen toy decoder-only transformer

Pre-norm blocks (LN -> causal attention -> residual, LN -> ReLU MLP ->
residual) with learned positional embeddings. The hidden state at layer l is
the residual stream leaving block l; hooks edit it before block l+1 (or the
final norm) reads it.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.autograd import Tensor, no_grad, ops
from .config import BackboneConfig
from .loreft import Intervention, edit_rows

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


@dataclass
class HookEntry:
    layer: int
    positions: np.ndarray
    intervention: Intervention


@dataclass
class HookSet:
    """(layer, positions, intervention) entries; each (layer, position) at most once"""
    entries: List[HookEntry] = field(default_factory=list)

    def add(self, layer: int, positions, intervention: Intervention) -> "HookSet":
        positions = np.asarray(positions, dtype=np.int64)
        taken = {(e.layer, int(p)) for e in self.entries for p in e.positions}
        for p in positions:
            if (layer, int(p)) in taken:
                raise ValueError(f"position {int(p)} at layer {layer} is already hooked")
        if len(set(positions.tolist())) != positions.size:
            raise ValueError(f"duplicate positions in hook at layer {layer}")
        self.entries.append(HookEntry(layer, positions, intervention))
        return self

    @classmethod
    def for_intervention(cls, intervention: Optional[Intervention], prompt_len: int) -> "HookSet":
        """Hook every layer of the intervention at its f/l-stream positions"""
        hooks = cls()
        if intervention is None:
            return hooks
        positions = intervention.positions(prompt_len)
        for layer in intervention.layers:
            hooks.add(layer, positions, intervention)
        return hooks

    def at_layer(self, layer: int) -> List[HookEntry]:
        return [e for e in self.entries if e.layer == layer]

    def __len__(self) -> int:
        return len(self.entries)


class FrozenBackbone:
    """Transformer weights that never receive gradients"""

    def __init__(self, config: BackboneConfig, weights: Dict[str, Tensor]):
        self.config = config
        self.weights = weights
        for name, tensor in weights.items():
            tensor.requires_grad = False
            tensor.name = name
            tensor.data.setflags(write=False)
        self._mask_cache: Dict[int, np.ndarray] = {}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.weights):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.weights[name].data).astype("<f8").tobytes())
        return digest.hexdigest()

    def w(self, name: str) -> Tensor:
        return self.weights[name]

    def causal_mask(self, seq_len: int) -> np.ndarray:
        if seq_len not in self._mask_cache:
            mask = np.triu(np.full((seq_len, seq_len), MASK_VALUE), k=1)
            self._mask_cache[seq_len] = mask
        return self._mask_cache[seq_len]


def weight_shapes(config: BackboneConfig) -> Dict[str, Tuple[int, ...]]:
    d, V, S = config.hidden_dim, config.vocab_size, config.max_seq_len
    hidden = d * config.mlp_ratio
    shapes = {"tok_emb": (V, d), "pos_emb": (S, d)}
    for l in range(config.num_layers):
        shapes.update({
            f"block{l}.ln1_g": (d,), f"block{l}.ln1_b": (d,),
            f"block{l}.wq": (d, d), f"block{l}.wk": (d, d),
            f"block{l}.wv": (d, d), f"block{l}.wo": (d, d),
            f"block{l}.ln2_g": (d,), f"block{l}.ln2_b": (d,),
            f"block{l}.w1": (d, hidden), f"block{l}.b1": (hidden,),
            f"block{l}.w2": (hidden, d), f"block{l}.b2": (d,),
        })
    shapes.update({"ln_f_g": (d,), "ln_f_b": (d,), "w_out": (d, V)})
    return shapes


def build_backbone(config: BackboneConfig) -> FrozenBackbone:
    """Draw every weight from config.init_seed; the result is frozen"""
    rng = np.random.default_rng(config.init_seed)
    weights = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            data = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            data = np.zeros(shape)
        elif leaf in ("tok_emb", "pos_emb"):
            data = rng.standard_normal(shape)
        else:
            data = rng.standard_normal(shape) / np.sqrt(shape[0])
        weights[name] = Tensor(data, name=name)
    backbone = FrozenBackbone(config, weights)
    logger.info(f"Built backbone L={config.num_layers} d={config.hidden_dim} "
                f"V={config.vocab_size} checksum={backbone.checksum()[:12]}")
    return backbone


def _validate(backbone: FrozenBackbone, tokens: np.ndarray, hooks: HookSet):
    cfg = backbone.config
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integer ids")
    if tokens.shape[-1] < 1 or tokens.shape[-1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} outside [1, {cfg.max_seq_len}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    for entry in hooks.entries:
        if not 0 <= entry.layer < cfg.num_layers:
            raise ValueError(f"hook layer {entry.layer} outside [0, {cfg.num_layers})")
        if entry.positions.size and (entry.positions.min() < 0
                                     or entry.positions.max() >= tokens.shape[-1]):
            raise ValueError(f"hook positions {entry.positions.tolist()} exceed sequence length")
        if entry.intervention.hidden_dim != cfg.hidden_dim:
            raise ValueError("intervention width does not match the backbone")


def _attention(backbone: FrozenBackbone, x: Tensor, l: int) -> Tensor:
    cfg = backbone.config
    B, T, d = x.shape
    H, dh = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(ops.matmul(x, backbone.w(f"block{l}.wq")))
    k = heads(ops.matmul(x, backbone.w(f"block{l}.wk")))
    v = heads(ops.matmul(x, backbone.w(f"block{l}.wv")))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = Tensor(np.broadcast_to(backbone.causal_mask(T), scores.shape))
    weights = ops.softmax(ops.add(scores, mask))
    mixed = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
    return ops.matmul(ops.reshape(mixed, (B, T, d)), backbone.w(f"block{l}.wo"))


def _mlp(backbone: FrozenBackbone, x: Tensor, l: int) -> Tensor:
    hidden = ops.relu(ops.add_bias(ops.matmul(x, backbone.w(f"block{l}.w1")), backbone.w(f"block{l}.b1")))
    return ops.add_bias(ops.matmul(hidden, backbone.w(f"block{l}.w2")), backbone.w(f"block{l}.b2"))


def _apply_hooks(h: Tensor, hooks: HookSet, layer: int) -> Tensor:
    for entry in hooks.at_layer(layer):
        edit = entry.intervention.edit(layer)
        R = edit.projection()
        selected = ops.index_select(h, entry.positions, axis=1)
        h = ops.index_replace(h, entry.positions, edit_rows(selected, edit, R), axis=1)
    return h


def forward(backbone: FrozenBackbone, tokens, hooks: Optional[HookSet] = None
            ) -> Tuple[Tensor, List[Tensor]]:
    """
    Run the backbone on tokens (T,) or (B, T).

    Returns pre-softmax logits shaped like tokens plus a vocab axis, and the
    per-layer residual states (after any hook at that layer).
    """
    hooks = hooks if hooks is not None else HookSet()
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    batch = tokens[None, :] if single else tokens
    _validate(backbone, batch, hooks)
    cfg = backbone.config
    B, T = batch.shape

    positions = np.broadcast_to(np.arange(T), (B, T))
    h = ops.add(ops.embedding(backbone.w("tok_emb"), batch),
                ops.embedding(backbone.w("pos_emb"), positions))

    hidden = []
    for l in range(cfg.num_layers):
        attn_in = ops.layer_norm(h, backbone.w(f"block{l}.ln1_g"), backbone.w(f"block{l}.ln1_b"), cfg.ln_eps)
        h = ops.add(h, _attention(backbone, attn_in, l))
        mlp_in = ops.layer_norm(h, backbone.w(f"block{l}.ln2_g"), backbone.w(f"block{l}.ln2_b"), cfg.ln_eps)
        h = ops.add(h, _mlp(backbone, mlp_in, l))
        h = _apply_hooks(h, hooks, l)
        hidden.append(h)

    final = ops.layer_norm(h, backbone.w("ln_f_g"), backbone.w("ln_f_b"), cfg.ln_eps)
    logits = ops.matmul(final, backbone.w("w_out"))
    if single:
        logits = ops.reshape(logits, (T, cfg.vocab_size))
        hidden = [ops.reshape(x, (T, cfg.hidden_dim)) for x in hidden]
    return logits, hidden


def greedy_decode(backbone: FrozenBackbone, prompts: np.ndarray, num_tokens: int,
                  intervention: Optional[Intervention] = None) -> np.ndarray:
    """
    Greedily extend same-length prompts (B, P) by num_tokens; interventions stay
    on the prompt's f/l-stream positions while the sequence grows.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    prompt_len = prompts.shape[1]
    hooks = HookSet.for_intervention(intervention, prompt_len)
    sequence = prompts
    with no_grad():
        for _ in range(num_tokens):
            logits, _ = forward(backbone, sequence, hooks)
            next_tokens = np.argmax(logits.data[:, -1, :], axis=-1)
            sequence = np.concatenate([sequence, next_tokens[:, None]], axis=1)
    return sequence[:, prompt_len:]
