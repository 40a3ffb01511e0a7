"""Tensor type and the reverse-mode tape."""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ContractError

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array with an optional gradient buffer.

    Leaves are created directly; interior nodes are produced by the ops in
    ``tensor_core.ops`` and carry their parents plus a backward rule that maps
    the output gradient to one gradient per parent (``None`` where a parent
    needs none).
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name", "frozen")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            # float64 arrays pass through (finite-difference oracles); all else is f32
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        if arr.ndim > 5:
            raise ContractError(f"tensors have at most 5 axes, got {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name
        self.frozen = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or self.op}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.reduce_sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.reduce_mean(self, axis)

    def backward(self):
        backward(self)


def make_node(data, parents, backward_fn, op):
    """Wrap an op result; records the graph edge only when something needs it."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


class ComputationTape:
    """Topologically ordered list of the nodes reachable from a root.

    Every node's parents precede it, so walking ``nodes`` in reverse visits
    each recorded operation exactly once after all of its consumers.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, tape: ComputationTape | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf.

    Interior gradients are released once propagated. Fan-out is handled by
    additive accumulation.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if tape is None:
        tape = ComputationTape.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ContractError(f"gradient shape {pg.shape} != {p.data.shape} in {node.op}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape
