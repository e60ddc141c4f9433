"""Front-end building blocks: shared 3D stem, per-frame residual branch, dense 3D branch.

All blocks take batched ``[N, C, T, H, W]`` tensors and never touch the time
extent, so the two branch outputs can be fused elementwise.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .nn import BatchNorm, Conv, Module, _training
from .ops import ConvSpec
from .tensor import Tensor


class Stem(Module):
    """conv3d -> BN -> ReLU -> maxpool(1x3x3) -> nearest upsample to ``out_hw``."""

    def __init__(self, channels: int, kernel: Sequence[int], out_hw: tuple[int, int], rng: np.random.Generator):
        super().__init__()
        kt, kh, kw = kernel
        self.conv = Conv(1, channels, kernel, rng, stride=(1, 2, 2), padding=(kt // 2, kh // 2, kw // 2))
        self.bn = BatchNorm(channels)
        self.pool = ConvSpec((1, 3, 3), (1, 2, 2), (0, 1, 1))
        self.out_hw = tuple(out_hw)

    def pooled_shape(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        return self.pool.output_shape(self.conv.out_spatial((t, h, w)))

    def out_shape(self, t: int, h: int, w: int) -> tuple[int, int, int, int]:
        pt, ph, pw = self.pooled_shape(t, h, w)
        if self.out_hw[0] < ph or self.out_hw[1] < pw:
            raise ValueError(f"stem pools to {ph}x{pw}, larger than the branch input {self.out_hw}")
        return self.conv.cout, pt, self.out_hw[0], self.out_hw[1]

    def __call__(self, video: Tensor, training: bool) -> Tensor:
        x = ops.relu(self.bn(self.conv(video), training))
        x = ops.maxpool(x, self.pool)
        if x.shape[-2:] != self.out_hw:
            x = ops.upsample_nearest(x, self.out_hw)
        return x


def stem_forward(video: Tensor, p: Stem, mode="eval") -> Tensor:
    """``video`` is ``[1, T, H, W]`` (one clip) or ``[N, 1, T, H, W]``."""
    if video.shape[-3] < 1:
        raise ValueError("stem needs at least one frame")
    single = video.ndim == 4
    if single:
        video = video.reshape((1,) + video.shape)
    out = p(video, _training(mode))
    return out.reshape(out.shape[1:]) if single else out


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity or projected shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv(cin, cout, (3, 3), rng, stride=(stride, stride), padding=(1, 1))
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv(cout, cout, (3, 3), rng, padding=(1, 1))
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, (1, 1), rng, stride=(stride, stride))
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None
        self.stride = stride

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        short = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return ops.relu(ops.badd(y, short))


def _fold_time(x: Tensor) -> Tensor:
    n, c, t, h, w = x.shape
    return ops.transpose(x, (0, 2, 1, 3, 4)).reshape(n * t, c, h, w)


def _unfold_time(x: Tensor, n: int, t: int) -> Tensor:
    _, c, h, w = x.shape
    return ops.transpose(x.reshape(n, t, c, h, w), (0, 2, 1, 3, 4))


class ResidualBranch(Module):
    """Per-frame 2D ResNet; time is folded into the batch axis."""

    def __init__(self, cin: int, widths: Sequence[int], blocks: Sequence[int], strides: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        if not (len(widths) == len(blocks) == len(strides)):
            raise ValueError("widths, blocks and strides must have one entry per stage")
        layers = []
        c = cin
        for width, count, stride in zip(widths, blocks, strides):
            for j in range(count):
                layers.append(BasicBlock(c, width, stride if j == 0 else 1, rng))
                c = width
        self.blocks = layers
        self.cin = cin
        self.cout = c

    def out_shape(self, c: int, t: int, h: int, w: int) -> tuple[int, int, int, int]:
        if c != self.cin:
            raise ValueError(f"residual branch expects {self.cin} channels, got {c}")
        for b in self.blocks:
            h, w = b.conv1.out_spatial((h, w))
        return self.cout, t, h, w

    def main_path_convs(self) -> int:
        return 2 * len(self.blocks)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        n, _, t = x.shape[:3]
        y = _fold_time(x)
        for b in self.blocks:
            y = b(y, training)
        return _unfold_time(y, n, t)


class DenseLayer(Module):
    """BN-ReLU-1x1x1 bottleneck then BN-ReLU-3x3x3; output is concatenated onto the input."""

    def __init__(self, cin: int, growth: int, bottleneck: int, rng: np.random.Generator):
        super().__init__()
        mid = bottleneck * growth
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv(cin, mid, (1, 1, 1), rng)
        self.bn2 = BatchNorm(mid)
        self.conv2 = Conv(mid, growth, (3, 3, 3), rng, padding=(1, 1, 1))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv1(ops.relu(self.bn1(x, training)))
        y = self.conv2(ops.relu(self.bn2(y, training)))
        return ops.concat([x, y], axis=1)


class Transition(Module):
    """BN-ReLU-1x1x1 compression then 1x2x2 average pooling (space only)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.bn = BatchNorm(cin)
        self.conv = Conv(cin, cout, (1, 1, 1), rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(ops.relu(self.bn(x, training)))
        return ops.avgpool(y, (1, 2, 2))


class DenseBranch(Module):
    def __init__(self, cin: int, cout: int, blocks: Sequence[int], growth: int, bottleneck: int,
                 compression: float, rng: np.random.Generator):
        super().__init__()
        layers: list[Module] = []
        c = cin
        for i, count in enumerate(blocks):
            for _ in range(count):
                layers.append(DenseLayer(c, growth, bottleneck, rng))
                c += growth
            if i < len(blocks) - 1:
                nxt = max(1, int(c * compression))
                layers.append(Transition(c, nxt, rng))
                c = nxt
        self.layers = layers
        self.final_bn = BatchNorm(c)
        self.project = Conv(c, cout, (1, 1, 1), rng)
        self.cin = cin
        self.cout = cout

    def out_shape(self, c: int, t: int, h: int, w: int) -> tuple[int, int, int, int]:
        if c != self.cin:
            raise ValueError(f"dense branch expects {self.cin} channels, got {c}")
        for layer in self.layers:
            if isinstance(layer, Transition):
                if h % 2 or w % 2:
                    raise ValueError(f"transition cannot halve odd extent {h}x{w}")
                h, w = h // 2, w // 2
        return self.cout, t, h, w

    def weighted_layers(self) -> int:
        n = 0
        for layer in self.layers:
            n += 2 if isinstance(layer, DenseLayer) else 1
        return n + 1

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for layer in self.layers:
            x = layer(x, training)
        return self.project(ops.relu(self.final_bn(x, training)))


def _branch_call(branch, feat: Tensor, mode) -> Tensor:
    single = feat.ndim == 4
    if single:
        feat = feat.reshape((1,) + feat.shape)
    if feat.shape[1] != branch.cin:
        raise ops.ShapeError(f"channel axis: branch expects {branch.cin}, got {feat.shape[1]}")
    out = branch(feat, _training(mode))
    return out.reshape(out.shape[1:]) if single else out


def residual_branch_forward(feat: Tensor, p: ResidualBranch, mode="eval") -> Tensor:
    return _branch_call(p, feat, mode)


def dense_branch_forward(feat: Tensor, p: DenseBranch, mode="eval") -> Tensor:
    return _branch_call(p, feat, mode)
