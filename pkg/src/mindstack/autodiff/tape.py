"""Define-by-run reverse-mode tape over dense float64 tensors.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Node`
wraps one such value together with the operation that produced it; nodes are
appended to their :class:`Tape` in creation order, which is a valid
topological order by construction.
"""
from __future__ import annotations

import numpy as np

# Reject NaN/Inf when values are created on a tape.
CHECKED = True


class AutodiffError(ValueError):
    pass


def as_tensor(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if CHECKED and not np.all(np.isfinite(arr)):
        raise AutodiffError("non-finite value in tensor")
    return arr


class Node:
    """One recorded value on a tape.

    ``backward_fn`` receives the output adjoint and returns one adjoint per
    parent (``None`` for parents that need no gradient).
    """

    __slots__ = ("tape", "value", "op", "parents", "adjoint", "backward_fn",
                 "requires_grad", "index", "name")

    def __init__(self, tape, value, op, parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.adjoint = None
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)


class Tape:
    """Ordered record of every node created during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None, requires_grad=True) -> Node:
        return Node(self, as_tensor(value), "leaf", requires_grad=requires_grad,
                    name=name)

    def constant(self, value) -> Node:
        return Node(self, as_tensor(value), "const")

    def record(self, op, inputs, forward_fn, backward_fn=None) -> Node:
        """Append the result of ``forward_fn(*values)`` as a new node.

        ``backward_fn(out_adjoint, out_value, *in_values)`` must return a tuple
        with one adjoint per input.
        """
        for n in inputs:
            if n.tape is not self:
                raise AutodiffError(f"{op}: operand recorded on a different tape")
        values = [n.value for n in inputs]
        with np.errstate(all="ignore"):
            out = np.asarray(forward_fn(*values), dtype=np.float64)
        if CHECKED and not np.all(np.isfinite(out)):
            raise AutodiffError(f"{op}: non-finite result")
        needs = any(n.requires_grad for n in inputs)
        if not needs or backward_fn is None:
            return Node(self, out, op, inputs, None, requires_grad=False)

        def bw(adj, _out=out, _vals=values):
            return backward_fn(adj, _out, *_vals)

        return Node(self, out, op, inputs, bw, requires_grad=True)

    def backward(self, root: Node) -> dict:
        """Reverse sweep from ``root``; returns ``{name: adjoint}`` for named leaves.

        Adjoints are left on every node that lies on a path to ``root``.
        """
        if root.tape is not self:
            raise AutodiffError("root belongs to a different tape")
        if root.value.shape != ():
            raise AutodiffError(f"backward needs a scalar root, got shape {root.value.shape}")
        for n in self.nodes:
            n.adjoint = None
        root.adjoint = np.ones((), dtype=np.float64)
        for n in reversed(self.nodes[: root.index + 1]):
            if n.adjoint is None or n.backward_fn is None:
                continue
            grads = n.backward_fn(n.adjoint)
            for p, g in zip(n.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.adjoint is None:
                    p.adjoint = np.array(g, dtype=np.float64, copy=True)
                else:
                    p.adjoint = p.adjoint + g
        out = {}
        for n in self.nodes:
            if n.adjoint is None:
                n.adjoint = np.zeros_like(n.value)
            if n.op == "leaf" and n.requires_grad and n.name is not None:
                out[n.name] = n.adjoint
        return out
