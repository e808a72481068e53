"""
Low-rank representation interventions

An intervention edits a hidden state only inside the row space of an
orthonormal projection R:

    apply(h) = h + R^T (W h + b - R h)

R is never stored; each forward re-derives it from the unconstrained R_raw, so
transfers and merges move R_raw (not R) and orthonormality is re-established
on the next forward.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from src.autograd import Tensor, ops
from src.utils.errors import RankDeficiencyError, ShapeError

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e10


@dataclass(frozen=True)
class StreamSpec:
    """Per-stream position count: first t_pos (f-stream) and last t_pos (l-stream)"""
    t_pos: int

    def __post_init__(self):
        if self.t_pos < 1:
            raise ValueError(f"t_pos must be positive, got {self.t_pos}")


def select_positions(prompt_len: int, spec: StreamSpec) -> np.ndarray:
    """Ascending, deduplicated union of the f-stream and l-stream positions"""
    if prompt_len < 1:
        raise ValueError(f"prompt_len must be >= 1, got {prompt_len}")
    first = np.arange(0, min(spec.t_pos, prompt_len))
    last = np.arange(max(prompt_len - spec.t_pos, 0), prompt_len)
    return np.union1d(first, last).astype(np.int64)


def orthonormalize(R_raw: Tensor) -> Tensor:
    """Differentiable row orthonormalisation; rejects rank-deficient input"""
    if R_raw.data.ndim != 2 or R_raw.shape[0] > R_raw.shape[1]:
        raise ShapeError("orthonormalize", R_raw.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = float(np.linalg.cond(R_raw.data))
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise RankDeficiencyError(condition, CONDITION_LIMIT)
    return ops.row_orthonormalize(R_raw)


class LayerEdit:
    """The {R_raw, W, b} triple for one layer, shared by all intervened positions"""

    __slots__ = ("R_raw", "W", "b")

    def __init__(self, R_raw: Tensor, W: Tensor, b: Tensor):
        r, d = R_raw.shape
        if W.shape != (r, d) or b.shape != (r,):
            raise ShapeError("LayerEdit", R_raw.shape, W.shape, b.shape)
        self.R_raw = R_raw
        self.W = W
        self.b = b

    def tensors(self) -> List[Tensor]:
        return [self.R_raw, self.W, self.b]

    def projection(self) -> Tensor:
        return orthonormalize(self.R_raw)


class Intervention:
    """
    A LoReFT intervention across a set of layers.

    Each layer owns one LayerEdit; rank and stream spec are shared.
    """

    trainable = True

    def __init__(self, edits: Dict[int, LayerEdit], rank: int, hidden_dim: int,
                 stream_spec: StreamSpec):
        if rank > hidden_dim:
            raise ValueError(f"rank {rank} exceeds hidden_dim {hidden_dim}")
        for layer, edit in edits.items():
            if edit.R_raw.shape != (rank, hidden_dim):
                raise ShapeError("Intervention", edit.R_raw.shape, (rank, hidden_dim))
        self.edits = dict(sorted(edits.items()))
        self.rank = rank
        self.hidden_dim = hidden_dim
        self.stream_spec = stream_spec

    @classmethod
    def initialize(cls, layers: Iterable[int], hidden_dim: int, rank: int,
                   stream_spec: StreamSpec, seed: int) -> "Intervention":
        """
        Seeded fresh intervention. W starts equal to the projected R and b at
        zero, so a fresh intervention is the identity edit.
        """
        rng = np.random.default_rng(seed)
        edits = {}
        for layer in sorted(layers):
            raw = rng.standard_normal((rank, hidden_dim))
            R = orthonormalize(Tensor(raw)).data
            edits[layer] = LayerEdit(
                Tensor(raw, requires_grad=True, name=f"layer{layer}.R_raw"),
                Tensor(R.copy(), requires_grad=True, name=f"layer{layer}.W"),
                Tensor(np.zeros(rank), requires_grad=True, name=f"layer{layer}.b"),
            )
        return cls(edits, rank, hidden_dim, stream_spec)

    @classmethod
    def blank_like(cls, other: "Intervention") -> "Intervention":
        """Zero-filled trainable intervention with the same layout (a transfer target)"""
        edits = {
            layer: LayerEdit(
                Tensor(np.zeros_like(e.R_raw.data), requires_grad=True, name=f"layer{layer}.R_raw"),
                Tensor(np.zeros_like(e.W.data), requires_grad=True, name=f"layer{layer}.W"),
                Tensor(np.zeros_like(e.b.data), requires_grad=True, name=f"layer{layer}.b"),
            )
            for layer, e in other.edits.items()
        }
        return cls(edits, other.rank, other.hidden_dim, other.stream_spec)

    @property
    def layers(self) -> List[int]:
        return list(self.edits)

    def edit(self, layer: Optional[int] = None) -> LayerEdit:
        if layer is None:
            if len(self.edits) != 1:
                raise ValueError("layer must be given for a multi-layer intervention")
            return next(iter(self.edits.values()))
        if layer not in self.edits:
            raise ValueError(f"intervention has no edit for layer {layer}")
        return self.edits[layer]

    def parameters(self) -> List[Tensor]:
        return [t for edit in self.edits.values() for t in edit.tensors()]

    def positions(self, prompt_len: int) -> np.ndarray:
        return select_positions(prompt_len, self.stream_spec)

    def orthonormality_error(self) -> float:
        """max over layers of ||R R^T - I||_max on the projected R"""
        worst = 0.0
        for edit in self.edits.values():
            R = ops.row_orthonormalize(Tensor(edit.R_raw.data)).data
            worst = max(worst, float(np.abs(R @ R.T - np.eye(self.rank)).max()))
        return worst

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for layer, edit in self.edits.items():
            arrays[f"layer{layer}.R_raw"] = edit.R_raw.data
            arrays[f"layer{layer}.W"] = edit.W.data
            arrays[f"layer{layer}.b"] = edit.b.data
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], rank: int, hidden_dim: int,
                    stream_spec: StreamSpec) -> "Intervention":
        layers = sorted({int(key.split(".")[0][len("layer"):]) for key in arrays})
        edits = {
            layer: LayerEdit(
                Tensor(arrays[f"layer{layer}.R_raw"], requires_grad=True, name=f"layer{layer}.R_raw"),
                Tensor(arrays[f"layer{layer}.W"], requires_grad=True, name=f"layer{layer}.W"),
                Tensor(arrays[f"layer{layer}.b"], requires_grad=True, name=f"layer{layer}.b"),
            )
            for layer in layers
        }
        return cls(edits, rank, hidden_dim, stream_spec)

    def same_as(self, other: "Intervention") -> bool:
        """Bit-exact parameter equality"""
        if self.layers != other.layers:
            return False
        mine, theirs = self.to_arrays(), other.to_arrays()
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)

    def __repr__(self) -> str:
        return (f"{type(self).__name__}(layers={self.layers}, rank={self.rank}, "
                f"t_pos={self.stream_spec.t_pos})")


class InterventionSnapshot(Intervention):
    """Frozen, read-only copy of an intervention (the anchor)"""

    trainable = False

    def __init__(self, source: Intervention):
        edits = {}
        for layer, edit in source.edits.items():
            frozen = []
            for t in edit.tensors():
                copy = Tensor(t.data)
                copy.data.setflags(write=False)
                frozen.append(copy)
            edits[layer] = LayerEdit(*frozen)
        super().__init__(edits, source.rank, source.hidden_dim, source.stream_spec)


def snapshot(iv: Intervention) -> InterventionSnapshot:
    """Deep, immutable copy; later edits to iv never reach it"""
    return InterventionSnapshot(iv)


def transfer_into(src: Intervention, dst: Intervention):
    """Overwrite dst's unconstrained parameters with src's values, in place"""
    if not dst.trainable:
        raise TypeError("cannot transfer into a frozen snapshot")
    if src.layers != dst.layers:
        raise ShapeError("transfer_into", tuple(src.layers), tuple(dst.layers))
    for layer in src.layers:
        for s, d in zip(src.edits[layer].tensors(), dst.edits[layer].tensors()):
            if s.shape != d.shape:
                raise ShapeError("transfer_into", s.shape, d.shape)
    for layer in src.layers:
        for s, d in zip(src.edits[layer].tensors(), dst.edits[layer].tensors()):
            d.data[...] = s.data
            d.grad = None


def clone(iv: Intervention) -> Intervention:
    """Trainable deep copy (the live intervention of a training run)"""
    copy = Intervention.blank_like(iv)
    transfer_into(iv, copy)
    return copy


def apply(h: Union[Tensor, np.ndarray], iv: Intervention, layer: Optional[int] = None) -> Tensor:
    """Edit a hidden state (d,) or a stack of them (..., d) with one layer's edit"""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.shape[-1] != iv.hidden_dim:
        raise ShapeError("apply", h.shape, (iv.hidden_dim,))
    edit = iv.edit(layer)
    R = edit.projection()
    if h.data.ndim == 1:
        flat = ops.reshape(h, (1, iv.hidden_dim))
        return ops.reshape(edit_rows(flat, edit, R), (iv.hidden_dim,))
    return edit_rows(h, edit, R)


def edit_rows(h: Tensor, edit: LayerEdit, R: Tensor) -> Tensor:
    """h (..., d) -> h + (h W^T + b - h R^T) R"""
    proj = ops.matmul(h, ops.transpose(R))
    lin = ops.add_bias(ops.matmul(h, ops.transpose(edit.W)), edit.b)
    return ops.add(h, ops.matmul(ops.sub(lin, proj), R))
