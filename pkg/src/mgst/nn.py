"""Module containers, initialisers and the two layers everything else is made of."""
from __future__ import annotations

import copy
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .ops import ConvSpec
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Attribute-scanning parameter container.

    Parameters, child modules, lists of child modules and numpy buffers
    registered through :meth:`register_buffer` are discovered in attribute
    insertion order, which fixes the parameter ordering used everywhere.
    """

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            else:
                yield from value.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._buffers.items():
            yield prefix + key, value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def name_parameters(self):
        for name, p in self.named_parameters():
            p.name = name
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = [k for k in list(own_params) + list(own_buffers) if k not in state]
        unexpected = [k for k in state if k not in own_params and k not in own_buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own_params.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.astype(p.dtype, copy=True)
        for name, b in own_buffers.items():
            if name in state:
                b[...] = state[name]
        return self

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
        for mod in clone._modules():
            for key in mod._buffers:
                mod._buffers[key] = mod._buffers[key].astype(dtype)
        return clone

    def _modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value._modules()


# ---------------------------------------------------------------------------
# initialisers


def kaiming(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = 2.0) -> np.ndarray:
    std = np.sqrt(gain / fan_in)
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


# ---------------------------------------------------------------------------
# layers


class Conv(Module):
    def __init__(self, cin: int, cout: int, kernel: Sequence[int], rng: np.random.Generator,
                 stride: Optional[Sequence[int]] = None, padding: Optional[Sequence[int]] = None,
                 bias: bool = False):
        super().__init__()
        kernel = tuple(kernel)
        self.spec = ConvSpec(kernel, tuple(stride or ()), tuple(padding or ()))
        fan_in = cin * int(np.prod(kernel))
        self.weight = Parameter(kaiming(rng, (cout, cin) + kernel, fan_in))
        self.bias = Parameter(zeros(cout)) if bias else None

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    def out_spatial(self, spatial):
        return self.spec.output_shape(spatial)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv(x, self.weight, self.bias, self.spec)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Parameter(np.ones(channels, dtype=get_default_dtype()))
        self.beta = Parameter(zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", zeros(channels))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], training, self.momentum, self.eps)


def batchnorm_forward(x: Tensor, p: BatchNorm, mode: str = "eval") -> Tensor:
    """Unbatched-friendly wrapper: ``x`` is ``[C, ...]`` or ``[N, C, ...]``."""
    training = _training(mode)
    if x.ndim == 1:
        raise ops.ShapeError("batchnorm needs a channel axis plus at least one more")
    return p(x, training)


def _training(mode) -> bool:
    if isinstance(mode, bool):
        return mode
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"
