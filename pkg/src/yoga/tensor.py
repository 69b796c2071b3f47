"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array (float32 by default, float64 for
gradient checking) together with an optional gradient slot.  Every
differentiable primitive is a :class:`Function` subclass that implements a
forward kernel on raw arrays and a vector-Jacobian product (``vjp``) that
maps the upstream gradient to gradients for each input.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import UsageError

DEFAULT_DTYPE = np.float32

# names of primitives whose vjp is deliberately negated (fault injection
# for the gradient audit's self-test)
_FAULTS: set = set()

_flop_counters: list = []
_grad_enabled = [True]


@contextlib.contextmanager
def inject_fault(*op_names: str):
    """Flip the sign of the vjp of the named primitives inside the block."""
    added = [n for n in op_names if n not in _FAULTS]
    _FAULTS.update(added)
    try:
        yield
    finally:
        _FAULTS.difference_update(added)


class FlopCounter:
    """Accumulates work reported by primitives executed while active.

    ``macs`` counts scalar multiply-accumulates of convolutions; ``elementwise``
    counts every other arithmetic operation. ``flops`` follows the
    2 x MAC convention.
    """

    def __init__(self):
        self.macs = 0
        self.elementwise = 0
        self.by_op: dict = {}

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise

    def add(self, op: str, macs: int = 0, elementwise: int = 0):
        self.macs += int(macs)
        self.elementwise += int(elementwise)
        self.by_op[op] = self.by_op.get(op, 0) + 2 * int(macs) + int(elementwise)

    def __enter__(self):
        _flop_counters.append(self)
        return self

    def __exit__(self, *exc):
        _flop_counters.remove(self)
        return False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    """Array value with an optional gradient slot and tape link.

    Convolutional primitives expect rank-4 ``(n, c, h, w)`` data in
    row-major order; loss arithmetic works on any rank.
    """

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Optional[Function] = None
        self._parents: tuple = ()
        self.name = name

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{g})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    # -- reverse mode ---------------------------------------------------------
    def backward(self, grad=None):
        """Propagate ``grad`` (default ones) to every leaf that requires it.

        Nodes are visited in reverse topological order, so each primitive's
        vjp runs exactly once per call.  Leaf gradients accumulate into
        ``.grad``.
        """
        if self._ctx is None and not self.requires_grad:
            raise UsageError("backward called on a tensor with no recorded forward pass")
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise UsageError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._ctx.vjp(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not isinstance(parent, Tensor) or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._ctx = None
            node._parents = ()

    # -- operators ------------------------------------------------------------
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
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_mean(self, axis=axis, keepdims=keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._ctx is not None


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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
            if isinstance(p, Tensor) and id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
    return Tensor(arr.astype(dtype, copy=False))


class Function:
    """A primitive with a forward kernel and its vector-Jacobian product.

    Subclasses implement ``_forward(*arrays)`` and ``_vjp(upstream)``; the
    public :meth:`forward` / :meth:`vjp` enforce call order, fault injection
    and FLOP accounting.  A ``Function`` instance records exactly one forward
    pass.
    """

    name = "function"

    def __init__(self, **attrs):
        for k, v in attrs.items():
            setattr(self, k, v)
        self._done = False

    def forward(self, *arrays):
        out = self._forward(*arrays)
        self._done = True
        if _flop_counters:
            macs, elem = self.cost(arrays, out)
            for c in _flop_counters:
                c.add(self.name, macs, elem)
        return out

    def vjp(self, upstream):
        if not self._done:
            raise UsageError(f"vjp of {self.name} requested before forward")
        grads = self._vjp(np.asarray(upstream))
        if self.name in _FAULTS:
            grads = tuple(None if g is None else -g for g in grads)
        return grads

    def cost(self, arrays, out):
        """(macs, elementwise ops) for the forward pass just executed."""
        return 0, 0

    def _forward(self, *arrays):
        raise NotImplementedError

    def _vjp(self, upstream):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        fn = cls(**attrs)
        given = [x for x in inputs if isinstance(x, Tensor)]
        if not given:   # plain arrays: keep their float precision
            given = [Tensor(x) for x in inputs if isinstance(x, np.ndarray)]
        dtype = _result_dtype(given)
        tensors = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
                   for x in inputs]
        arrays = [t.data if t.data.dtype == dtype else t.data.astype(dtype) for t in tensors]
        out = Tensor(fn.forward(*arrays), dtype=dtype)
        if grad_enabled() and any(_needs_grad(t) for t in tensors):
            out._ctx = fn
            out._parents = tuple(tensors)
        return out


def _result_dtype(tensors: Sequence[Tensor]):
    dts = [t.data.dtype for t in tensors if np.issubdtype(t.data.dtype, np.floating)]
    if not dts:
        return np.dtype(DEFAULT_DTYPE)
    return np.result_type(*dts)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
