"""Peephole ConvLSTM, forward input attention, the two-layer bidirectional stack and the head.

Gate equations for one step, with ``*`` a "same"-padded convolution and
``o`` the Hadamard product::

    i = sig(Wxi*X + Whi*H + Wci o C_prev + bi)
    f = sig(Wxf*X + Whf*H + Wcf o C_prev + bf)
    C = f o C_prev + i o tanh(Wxc*X + Whc*H + bc)
    o = sig(Wxo*X + Who*H + Wco o C + bo)
    H = o o tanh(C)

The forward direction first rescales its input by
``a = sig(Wxa*X + Wha*H_prev)``.

Internally states are kept flat as ``[N, C*h*w]``.  On small grids each
recurrent convolution runs as one dense matrix product (see
:func:`ops.conv_matrix`); on larger ones it falls back to im2col.  Both the
single-step API and the sequence runner go through the same step function.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import Module, kaiming, orthogonal, zeros
from .ops import same_spec
from .tensor import Parameter, Tensor, get_default_dtype

GATES = ("i", "f", "c", "o")

# Dense-matrix evaluation is used while the matrix has at most this many entries.
MATRIX_LIMIT = 1 << 22


def _orthogonal_kernel(rng, cout: int, cin: int, k: int) -> np.ndarray:
    return orthogonal(rng, cout, cin * k * k).reshape(cout, cin, k, k)


class SpatialMap:
    """A stride-1 "same" convolution on a fixed grid, acting on flat ``[N, C*h*w]`` rows."""

    def __init__(self, weight: Tensor, spatial: tuple[int, int]):
        cout, cin, kh, kw = weight.shape
        self.cin, self.cout = cin, cout
        self.spatial = tuple(spatial)
        self.padding = (kh // 2, kw // 2)
        hw = spatial[0] * spatial[1]
        if cin * hw * cout * hw <= MATRIX_LIMIT:
            self.matrix = ops.conv_matrix(weight, self.spatial, self.padding)
            self.weight = None
        else:
            self.matrix = None
            self.weight = weight
            self.spec = ops.ConvSpec((kh, kw), (), self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        if self.matrix is not None:
            return ops.matmul(x, self.matrix)
        n = x.shape[0]
        y = ops.conv(x.reshape((n, self.cin) + self.spatial), self.weight, None, self.spec)
        return y.reshape(n, -1)


class ConvLSTMParams(Module):
    def __init__(self, cin: int, hidden: int, spatial: tuple[int, int], kernel: int,
                 rng: np.random.Generator, peephole: bool = True):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("recurrent kernel must be odd to keep the grid size")
        for g in GATES:
            setattr(self, f"W_x{g}", Parameter(_orthogonal_kernel(rng, hidden, cin, kernel)))
        for g in GATES:
            setattr(self, f"W_h{g}", Parameter(_orthogonal_kernel(rng, hidden, hidden, kernel)))
        if peephole:
            for g in ("i", "f", "o"):
                setattr(self, f"W_c{g}", Parameter(zeros((hidden,) + tuple(spatial))))
        for g in GATES:
            init = np.ones(hidden) if g == "f" else np.zeros(hidden)
            setattr(self, f"b_{g}", Parameter(init.astype(get_default_dtype())))
        self.cin = cin
        self.hidden = hidden
        self.kernel = kernel
        self.spatial = tuple(spatial)
        self.peephole = peephole

    def fused(self) -> "FusedGates":
        """Gate kernels stacked along the output axis so one map serves all four gates."""
        wx = ops.concat([getattr(self, f"W_x{g}") for g in GATES], axis=0)
        wh = ops.concat([getattr(self, f"W_h{g}") for g in GATES], axis=0)
        b = ops.concat([getattr(self, f"b_{g}") for g in GATES], axis=0)
        hw = self.spatial[0] * self.spatial[1]
        b = ops.badd(b.reshape(-1, 1), Tensor(np.zeros((1, hw), dtype=b.dtype))).reshape(1, -1)
        peep = None
        if self.peephole:
            peep = tuple(getattr(self, f"W_c{g}").reshape(-1) for g in ("i", "f", "o"))
        return FusedGates(SpatialMap(wx, self.spatial), SpatialMap(wh, self.spatial), b, peep, self.hidden * hw)


@dataclass
class FusedGates:
    wx: SpatialMap
    wh: SpatialMap
    b: Tensor
    peep: Optional[tuple[Tensor, Tensor, Tensor]]
    width: int


@dataclass
class ConvLSTMState:
    C: Tensor
    H: Tensor

    @classmethod
    def zeros(cls, n: int, hidden: int, spatial: tuple[int, int], dtype=None) -> "ConvLSTMState":
        dtype = dtype or get_default_dtype()
        shape = (n, hidden) + tuple(spatial)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


class InputAttentionParams(Module):
    def __init__(self, cin: int, hidden: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        k2 = kernel * kernel
        self.W_xa = Parameter(kaiming(rng, (cin, cin, kernel, kernel), cin * k2, gain=1.0))
        self.W_ha = Parameter(kaiming(rng, (cin, hidden, kernel, kernel), hidden * k2, gain=1.0))

    def maps(self, spatial) -> tuple[SpatialMap, SpatialMap]:
        return SpatialMap(self.W_xa, spatial), SpatialMap(self.W_ha, spatial)


def _step(x: Tensor, c_prev: Tensor, h_prev: Tensor, fg: FusedGates) -> tuple[Tensor, Tensor]:
    """One step on flat rows: ``x [N, Cin*hw]``, states ``[N, hidden*hw]``."""
    w = fg.width
    z = ops.badd(ops.badd(fg.wx(x), fg.wh(h_prev)), fg.b)
    zi, zf, zc, zo = (z[:, k * w:(k + 1) * w] for k in range(4))
    if fg.peep is not None:
        zi = ops.badd(zi, ops.bmul(fg.peep[0], c_prev))
        zf = ops.badd(zf, ops.bmul(fg.peep[1], c_prev))
    i = ops.sigmoid(zi)
    f = ops.sigmoid(zf)
    c = ops.badd(ops.bmul(f, c_prev), ops.bmul(i, ops.tanh(zc)))
    if fg.peep is not None:
        zo = ops.badd(zo, ops.bmul(fg.peep[2], c))
    o = ops.sigmoid(zo)
    return c, ops.bmul(o, ops.tanh(c))


def _attend(x: Tensor, h_prev: Tensor, maps, override: Optional[float]) -> Tensor:
    if override is not None:
        a = Tensor(np.full(x.shape, override, dtype=x.dtype))
    else:
        xa, ha = maps
        a = ops.sigmoid(ops.badd(xa(x), ha(h_prev)))
    return ops.hadamard(a, x)


def _as_batch(t: Tensor, rank: int):
    if t.ndim == rank - 1:
        return True, t.reshape((1,) + t.shape)
    return False, t


def cell_step(x: Tensor, prev: ConvLSTMState, p: ConvLSTMParams, fused: Optional[FusedGates] = None) -> ConvLSTMState:
    """One recurrence step; ``x`` is ``[Cin, h, w]`` or ``[N, Cin, h, w]``."""
    single, x = _as_batch(x, 4)
    c_prev, h_prev = prev.C, prev.H
    if single:
        c_prev, h_prev = c_prev.reshape((1,) + c_prev.shape), h_prev.reshape((1,) + h_prev.shape)
    if x.shape[1] != p.cin:
        raise ops.ShapeError(f"channel axis: cell expects {p.cin}, got {x.shape[1]}")
    if x.shape[2:] != p.spatial or h_prev.shape[2:] != p.spatial or c_prev.shape != h_prev.shape:
        raise ops.ShapeError(f"spatial axes: input {x.shape[2:]}, state {h_prev.shape[2:]}, cell {p.spatial}")
    n = x.shape[0]
    c, h = _step(x.reshape(n, -1), c_prev.reshape(n, -1), h_prev.reshape(n, -1), fused or p.fused())
    shape = (n, p.hidden) + p.spatial
    c, h = c.reshape(shape), h.reshape(shape)
    if single:
        c, h = c.reshape(shape[1:]), h.reshape(shape[1:])
    return ConvLSTMState(c, h)


def attend_input(x: Tensor, prev_h: Tensor, p: Optional[InputAttentionParams], override: Optional[float] = None) -> Tensor:
    """``a o x`` with ``a = sig(Wxa*x + Wha*h_prev)``; ``override`` pins ``a`` to a constant."""
    if override is None and p is None:
        raise ValueError("no attention parameters and no override")
    single, x = _as_batch(x, 4)
    if single:
        prev_h = prev_h.reshape((1,) + prev_h.shape)
    n = x.shape[0]
    maps = p.maps(x.shape[2:]) if override is None else None
    out = _attend(x.reshape(n, -1), prev_h.reshape(n, -1), maps, override).reshape(x.shape)
    return out.reshape(out.shape[1:]) if single else out


def attention_map(x: Tensor, prev_h: Tensor, p: InputAttentionParams) -> Tensor:
    """The gate ``a`` itself for a batched ``[N, Cin, h, w]`` input."""
    n = x.shape[0]
    xa, ha = p.maps(x.shape[2:])
    return ops.sigmoid(ops.badd(xa(x.reshape(n, -1)), ha(prev_h.reshape(n, -1)))).reshape(x.shape)


class BiLayer(Module):
    """One bidirectional layer: attentive forward ConvLSTM plus plain backward ConvLSTM."""

    def __init__(self, cin: int, hidden: int, spatial: tuple[int, int], kernel: int, rng: np.random.Generator,
                 attention: bool = True, peephole: bool = True):
        super().__init__()
        self.fwd = ConvLSTMParams(cin, hidden, spatial, kernel, rng, peephole)
        self.att = InputAttentionParams(cin, hidden, kernel, rng) if attention else None
        self.bwd = ConvLSTMParams(cin, hidden, spatial, kernel, rng, peephole)
        self.hidden = hidden
        self.spatial = tuple(spatial)


def _run(frames: Sequence[Tensor], p: ConvLSTMParams, att: Optional[InputAttentionParams],
         override: Optional[float]) -> list[Tensor]:
    """Run one direction over flat frames ``[N, Cin*hw]``; returns flat hidden states."""
    fg = p.fused()
    maps = att.maps(p.spatial) if att is not None and override is None else None
    n = frames[0].shape[0]
    dtype = frames[0].dtype
    c = Tensor(np.zeros((n, fg.width), dtype=dtype))
    h = Tensor(np.zeros((n, fg.width), dtype=dtype))
    hs = []
    for x in frames:
        if maps is not None or override is not None:
            x = _attend(x, h, maps, override)
        c, h = _step(x, c, h, fg)
        hs.append(h)
    return hs


def _reverse_index(t: int, lengths: Optional[Sequence[int]], n: int) -> np.ndarray:
    idx = np.empty((n, t), dtype=np.int64)
    for i in range(n):
        L = t if lengths is None else int(lengths[i])
        idx[i] = np.r_[np.arange(L - 1, -1, -1), np.arange(L, t)]
    return idx


def reverse_time(seq: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """Reverse the first ``lengths[n]`` frames of each ``[N, C, T, ...]`` sequence; padding stays at the end."""
    t = seq.shape[2]
    if lengths is None or all(int(L) == t for L in lengths):
        return seq[:, :, ::-1]
    idx = _reverse_index(t, lengths, seq.shape[0])
    rows = np.arange(seq.shape[0])[:, None]
    gathered = seq[rows, :, idx]  # advanced indices move to the front: [N, T, C, ...]
    return ops.transpose(gathered, (0, 2, 1) + tuple(range(3, seq.ndim)))


def _reverse_frames(frames: list[Tensor], lengths: Optional[Sequence[int]]) -> list[Tensor]:
    t = len(frames)
    n = frames[0].shape[0]
    if lengths is None or all(int(L) == t for L in lengths):
        return frames[::-1]
    stacked = ops.stack(frames, axis=1)  # [N, T, D]
    idx = _reverse_index(t, lengths, n)
    rev = stacked[np.arange(n)[:, None], idx]
    return [rev[:, k] for k in range(t)]


def bilayer_forward(seq: Tensor, layers: Sequence[BiLayer], attention_override: Optional[float] = None,
                    lengths: Optional[Sequence[int]] = None, use_attention: bool = True) -> Tensor:
    """Stacked bidirectional pass; returns ``[N, 2*hidden, T, h, w]`` (or unbatched)."""
    single, seq = _as_batch(seq, 5)
    n, c, t, hh, ww = seq.shape
    if t == 0:
        raise ValueError("sequence has no frames")
    flat = ops.transpose(seq, (0, 2, 1, 3, 4)).reshape(n, t, c * hh * ww)
    frames = [flat[:, k] for k in range(t)]
    for layer in layers:
        att = layer.att if use_attention else None
        ov = attention_override if use_attention else None
        h_f = _run(frames, layer.fwd, att, ov)
        h_b = _reverse_frames(_run(_reverse_frames(frames, lengths), layer.bwd, None, None), lengths)
        frames = [ops.concat([a, b], axis=1) for a, b in zip(h_f, h_b)]
    hidden = layers[-1].hidden if layers else c // 2
    out = ops.stack(frames, axis=1).reshape(n, t, 2 * hidden, hh, ww)
    out = ops.transpose(out, (0, 2, 1, 3, 4))
    return out.reshape(out.shape[1:]) if single else out


class Head(Module):
    def __init__(self, features: int, classes: int, rng: np.random.Generator, std: float = 0.01):
        super().__init__()
        self.W = Parameter((rng.standard_normal((classes, features)) * std).astype(get_default_dtype()))
        self.b = Parameter(zeros(classes))


def classify_head(hidden: Tensor, Wfc: Tensor, bfc: Tensor, lengths: Optional[Sequence[int]] = None,
                  average: str = "logits") -> Tensor:
    """Per-frame linear classifier averaged over time.

    ``average="logits"`` returns the mean of frame logits; ``"probs"`` returns
    the log of the mean frame softmax, which is itself a valid logit vector.
    """
    single, hidden = _as_batch(hidden, 5)
    n, c, t, h, w = hidden.shape
    if t < 1:
        raise ValueError("head needs at least one frame")
    frames = ops.transpose(hidden, (0, 2, 1, 3, 4)).reshape(n, t, c * h * w)
    logits = ops.linear(frames, Wfc, bfc)  # [N, T, K]
    weights = np.zeros((n, t, 1), dtype=logits.dtype)
    for i in range(n):
        L = t if lengths is None else int(lengths[i])
        weights[i, :L] = 1.0 / L
    if average == "logits":
        out = ops.sum(ops.bmul(logits, Tensor(weights)), axis=1)
    elif average == "probs":
        probs = ops.exp(ops.log_softmax(logits, axis=-1))
        out = ops.log(ops.sum(ops.bmul(probs, Tensor(weights)), axis=1))
    else:
        raise ValueError(f"average must be 'logits' or 'probs', got {average!r}")
    return out.reshape(out.shape[1:]) if single else out
