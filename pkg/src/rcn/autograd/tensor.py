"""Tensor type and the reverse-mode sweep.

Every tensor gets a monotonically increasing id at creation. A tensor's
parents always carry smaller ids than the tensor itself, so visiting the
reachable nodes in descending id order is a valid reverse topological order,
and gradient accumulation into a shared parent happens in a fixed order.
"""

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgument

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Tensors produced by differentiable ops remember their parents and a
    closure that maps the output gradient to parent gradients.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_ids)
        self.op = "leaf"
        self.parents: Tuple["Tensor", ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def from_op(cls, data, parents, backward_fn, op):
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        out.op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functional module owns the math
    def __add__(self, other):
        from . import functional as F
        return F.add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, _wrap(other))

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(_wrap(other), self)

    def __mul__(self, other):
        from . import functional as F
        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.hadamard(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __getitem__(self, index):
        from . import functional as F
        return F.index(self, index)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class NodeRecord:
    op: str
    inputs: List[int]
    output: int


@dataclass
class ComputeGraph:
    """Snapshot of the subgraph reachable from a tensor."""

    nodes: List[NodeRecord] = field(default_factory=list)
    order: List[int] = field(default_factory=list)
    tensors: dict = field(default_factory=dict, repr=False)


def build_graph(root: Tensor) -> ComputeGraph:
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    order = sorted(seen)
    nodes = [NodeRecord(seen[i].op, [p.id for p in seen[i].parents], i) for i in order]
    return ComputeGraph(nodes=nodes, order=order, tensors=seen)


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None) -> ComputeGraph:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Intermediate results pass their gradient along without keeping a copy.

    Grads accumulate into existing buffers, so call ``zero_grad`` (or let the
    optimizer clear them) between steps.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = build_graph(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for node_id in reversed(graph.order):
        t = graph.tensors[node_id]
        g = grads.pop(node_id, None)
        if g is None or not t.requires_grad:
            continue
        if t.backward_fn is None:
            t.grad = np.array(g, dtype=DTYPE, copy=True) if t.grad is None else t.grad + g
            continue
        parent_grads = t.backward_fn(g)
        for p, pg in zip(t.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return graph
