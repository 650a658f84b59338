"""Tensor type with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` and a ``backward`` static method.  Calling ``Fn.apply(...)``
runs the forward pass on raw numpy arrays and, when any input requires a
gradient, records an :class:`OpNode` on the output so that
:meth:`Tensor.backward` can replay the chain rule in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

_state = threading.local()

DTYPES = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when an API is called in a state it does not support."""


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(mode: str | type) -> None:
    """Select the floating-point type for newly created tensors ("f32" or "f64")."""
    _state.dtype = DTYPES[mode] if isinstance(mode, str) else np.dtype(mode).type


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = default_dtype()
    set_default_dtype(mode)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool) -> Iterator[None]:
    previous = grad_enabled()
    _state.grad_enabled = mode
    try:
        yield
    finally:
        _state.grad_enabled = previous


def no_grad():
    """Run the enclosed computations without recording a graph."""
    return set_grad_enabled(False)


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Deterministic generator: numpy's PCG64 bit generator seeded via SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class Context:
    """Scratch space a Function's forward uses to hand values to its backward."""

    def save(self, **values: Any) -> None:
        self.__dict__.update(values)


@dataclass(eq=False)
class OpNode:
    op: type[Function]
    inputs: tuple[Tensor | None, ...]
    ctx: Context = field(repr=False)


class Tensor:
    """An n-dimensional float array that can take part in autodiff."""

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" and arr.dtype == default_dtype() else default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in functional) -----------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return F.mul(self, 1.0 / other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Only scalar tensors may seed the pass unless an explicit ``grad`` is
        given.  Leaf gradients accumulate across calls; clear them with
        ``zero_grad`` between optimizer steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is not None:
                        g = t.grad + g
                    elif t is self:
                        g = g.copy()
                    t.grad = g
                continue
            in_grads = t.node.op.backward(t.node.ctx, g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(t.node.inputs, in_grads):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent is not None and parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` (one entry per tensor input, ``None``
    for inputs that are not differentiable).
    """

    @staticmethod
    def forward(ctx: Context, *args: Any, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(x if isinstance(x, Tensor) or x is None else Tensor(x) for x in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(None if t is None else t.data for t in tensors), **kwargs)
        result = Tensor(out, dtype=out.dtype)
        if grad_enabled() and any(t is not None and t.requires_grad for t in tensors):
            result.requires_grad = True
            result.node = OpNode(cls, tensors, ctx)
        return result


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Recompute(Function):
    """Backward rule of :func:`recompute`: rebuild the sub-graph, then differentiate it."""

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        current = [r.bit_generator.state for r in ctx.rngs]
        for r, state in zip(ctx.rngs, ctx.rng_states):
            r.bit_generator.state = state
        inp = Tensor(ctx.x, requires_grad=True, dtype=ctx.x.dtype)
        with set_grad_enabled(True):
            out = ctx.fn(inp)
        for r, state in zip(ctx.rngs, current):
            r.bit_generator.state = state
        # parameters inside fn are leaves of this inner graph and accumulate their grads here
        out.backward(grad)
        return (inp.grad,)


def recompute(fn: Callable[[Tensor], Tensor], x: Tensor, rngs: Sequence[np.random.Generator] = ()) -> Tensor:
    """``fn(x)`` without keeping its intermediates; they are recomputed during backward.

    ``rngs`` used inside ``fn`` are rewound for the replay so dropout masks
    match.  ``fn`` must not mutate other state (e.g. running statistics).
    """
    if not grad_enabled():
        return fn(x)
    ctx = Context()
    ctx.save(fn=fn, x=x.data, rngs=list(rngs), rng_states=[r.bit_generator.state for r in rngs])
    with no_grad():
        out = fn(x)
    result = Tensor(out.data, requires_grad=True, dtype=out.dtype)
    result.node = OpNode(Recompute, (x,), ctx)
    return result
