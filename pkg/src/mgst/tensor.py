"""Dense tensor value type and the reverse-mode differentiation tape.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  The
tape is therefore the graph of live tensors; :func:`backward` walks it in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from collections.abc import Iterable, Mapping
from typing import Callable, Optional, Sequence

import numpy as np

_state = {"grad": True, "dtype": np.dtype(np.float32)}


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{tag})"

    # operator sugar; the implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

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


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return Tensor(x)
    return Tensor(x, dtype=dtype)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs a gradient."""
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


class GradientMap(Mapping):
    """Gradients keyed by parameter name; tensors themselves are also accepted as keys."""

    def __init__(self):
        self._by_id: dict[int, np.ndarray] = {}
        self._names: dict[str, int] = {}
        self._tensors: dict[int, Tensor] = {}

    def _put(self, t: Tensor, g: np.ndarray):
        self._by_id[id(t)] = g
        self._tensors[id(t)] = t
        if t.name is not None:
            self._names[t.name] = id(t)

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            return self._by_id[id(key)]
        return self._by_id[self._names[key]]

    def __contains__(self, key):
        if isinstance(key, Tensor):
            return id(key) in self._by_id
        return key in self._names

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def tensors(self):
        return [(self._tensors[i], g) for i, g in self._by_id.items()]


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor] | Mapping[str, Tensor]] = None) -> GradientMap:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients of every leaf that requires one are returned.  Leaves listed in
    ``params`` that the loss does not reach get zero gradients.  The tape is
    left intact, so repeated calls give identical results.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result = GradientMap()
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                result._put(node, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        items = params.values() if isinstance(params, Mapping) else params
        for p in items:
            if p not in result:
                result._put(p, np.zeros_like(p.data))
    return result
