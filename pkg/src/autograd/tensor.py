"""
Reverse-mode autodiff over dense float64 arrays

Graphs are rebuilt on every forward pass (define-by-run). Each op that sees a
grad-requiring input appends one node; backward walks the nodes reachable
from the loss in reverse append order.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import GradientError

_append_counter = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (anchor and evaluation passes)"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real tensor with an optional gradient"""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq: int = -1
        self._op: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result and append it to the graph when any parent needs grads"""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_append_counter)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


class Graph:
    """The nodes reachable from a root, ordered by append index"""

    def __init__(self, root: Tensor):
        seen = set()
        nodes: List[Tensor] = []
        leaves: List[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes
        self.leaves = leaves

    def reverse(self) -> List[Tensor]:
        return list(reversed(self.nodes))


def backward(loss: Tensor):
    """Populate .grad on every grad-requiring leaf that the loss depends on"""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return

    graph = Graph(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in graph.reverse():
        upstream = pending.pop(id(node), None)
        if upstream is None:
            continue
        parent_grads = node._backward(upstream)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if grad.shape != parent.data.shape:
                grad = grad.reshape(parent.data.shape)
            if parent.is_leaf:
                _accumulate(parent, grad)
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + grad
            else:
                pending[id(parent)] = grad


def _accumulate(leaf: Tensor, grad: np.ndarray):
    if leaf.grad is None:
        leaf.grad = np.array(grad, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + grad
