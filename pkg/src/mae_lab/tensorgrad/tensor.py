"""Dense float64 tensors with a dynamic reverse-mode tape."""

from contextlib import contextmanager

import numpy as np


class NumericOverflowError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        super().__init__(msg + (f": {detail}" if detail else ""))


_GRAD_ENABLED = True
_TRACE = None


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def trace():
    """Record ``(op, output_shape, tag)`` for every op executed in the block.

    Used by tests to count the work done by a forward pass.
    """
    global _TRACE
    prev = _TRACE
    records = []
    _TRACE = records
    try:
        yield records
    finally:
        _TRACE = prev


_TAG = None


@contextmanager
def tag(name):
    """Attach ``name`` to trace records emitted inside the block."""
    global _TAG
    prev = _TAG
    _TAG = name
    try:
        yield
    finally:
        _TAG = prev


def _check_finite(data, op):
    # a single reduction is cheaper than isfinite() on every element
    if not np.isfinite(np.sum(data)):
        if not np.all(np.isfinite(data)):
            raise NumericOverflowError(op)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            pass
        elif any(s <= 0 for s in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        if _TRACE is not None:
            _TRACE.append((op, data.shape, _TAG))
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
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root):
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a dict mapping each parameter tensor to its gradient array. When
    ``params`` is given, every listed parameter appears in the result, with a
    zero gradient if the loss does not depend on it; otherwise the result
    covers every leaf with ``requires_grad`` that the loss reaches. The
    gradients are also stored on ``param.grad``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                leaves[id(node)] = (node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        _check_finite(g, f"backward:{node.op}")

    result = {}
    if params is None:
        for node, g in leaves.values():
            result[node] = g
    else:
        for p in params:
            hit = leaves.get(id(p))
            result[p] = hit[1] if hit is not None else np.zeros_like(p.data)
    for p, g in result.items():
        p.grad = g
    return result
