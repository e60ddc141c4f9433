"""Attention-mask fusion of the per-frame (S) and spatio-temporal (T) branch features.

``mask = sigmoid(W * T)`` with ``W`` a 1x1x1 convolution, and
``F = T * mask + S * (1 - mask)``.  The blend is evaluated as
``S + mask * (T - S)`` so that equal inputs come back unchanged bit for bit.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .nn import Module, kaiming, zeros
from .ops import ConvSpec
from .tensor import Parameter, Tensor, make

_POINTWISE = ConvSpec((1, 1, 1))


class FusionParams(Module):
    """Mask projection.

    ``mask_channels="full"`` gives one weight per channel and position;
    ``"single"`` predicts one mask channel that is broadcast over channels.
    ``condition="both"`` feeds ``[T; S]`` to the projection instead of ``T``.
    """

    def __init__(self, channels: int, rng: np.random.Generator, mask_channels: str = "full",
                 bias: bool = False, condition: str = "t"):
        super().__init__()
        if mask_channels not in ("full", "single"):
            raise ValueError(f"mask_channels must be 'full' or 'single', got {mask_channels!r}")
        if condition not in ("t", "both"):
            raise ValueError(f"condition must be 't' or 'both', got {condition!r}")
        cout = channels if mask_channels == "full" else 1
        cin = channels if condition == "t" else 2 * channels
        self.W = Parameter(kaiming(rng, (cout, cin, 1, 1, 1), cin, gain=1.0))
        self.b = Parameter(zeros(cout)) if bias else None
        self.channels = channels
        self.condition = condition

    def logits(self, t_feat: Tensor, s: Tensor | None = None) -> Tensor:
        x = t_feat
        if self.condition == "both":
            if s is None:
                raise ValueError("this fusion conditions on both branches; pass S")
            x = ops.concat([t_feat, s], axis=1)
        return ops.conv(x, self.W, self.b, _POINTWISE)


def _batched(*xs: Tensor):
    single = xs[0].ndim == 4
    if single:
        xs = tuple(x.reshape((1,) + x.shape) for x in xs)
    return single, xs


def fuse_with_mask(s: Tensor, t_feat: Tensor, mask: Tensor) -> Tensor:
    """Blend with an explicit mask (broadcast over channels if it has one channel)."""
    ops._check_same(s, t_feat, "fuse")
    sd, td, md = s.data, t_feat.data, mask.data
    dtype = np.result_type(sd, td, md)
    # evaluated in float64 and rounded once: rounding is monotone and both
    # bounds are representable, so min(S, T) <= F <= max(S, T) holds exactly
    wide = sd.astype(np.float64)
    out = (wide + md.astype(np.float64) * (td.astype(np.float64) - wide)).astype(dtype)

    def back(g):
        return ((1 - md) * g).astype(sd.dtype, copy=False), (md * g).astype(td.dtype, copy=False), \
            ops._unbroadcast((td - sd) * g, md.shape)

    return make(out, (s, t_feat, mask), back, "fuse")


def mask_from(t_feat: Tensor, p: FusionParams, s: Tensor | None = None) -> Tensor:
    if t_feat.shape[1] != p.channels and t_feat.ndim == 5:
        raise ops.ShapeError(f"channel axis: fusion expects {p.channels}, got {t_feat.shape[1]}")
    return ops.sigmoid(p.logits(t_feat, s))


def fuse(s: Tensor, t_feat: Tensor, p: FusionParams) -> Tensor:
    """Fused feature ``F`` for ``[C, T, h, w]`` or ``[N, C, T, h, w]`` inputs."""
    ops._check_same(s, t_feat, "fuse")
    single, (s, t_feat) = _batched(s, t_feat)
    out = fuse_with_mask(s, t_feat, mask_from(t_feat, p, s))
    return out.reshape(out.shape[1:]) if single else out


def export_mask(t_feat: Tensor, p: FusionParams, s: Tensor | None = None) -> Tensor:
    """The sigmoid mask itself, for offline inspection."""
    if s is None:
        single, (t_feat,) = _batched(t_feat)
    else:
        single, (t_feat, s) = _batched(t_feat, s)
    out = mask_from(t_feat, p, s)
    return out.reshape(out.shape[1:]) if single else out


class ConcatFusion(Module):
    """Baseline: channel concatenation then a 1x1x1 reduction back to ``channels``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.W = Parameter(kaiming(rng, (channels, 2 * channels, 1, 1, 1), 2 * channels, gain=1.0))

    def __call__(self, s: Tensor, t_feat: Tensor) -> Tensor:
        return ops.conv(ops.concat([s, t_feat], axis=1), self.W, None, _POINTWISE)
