"""Named finite-difference checks, shared by the ``gradcheck`` subcommand and the tests.

Each check builds a small seeded problem, reduces the output to a scalar with
a fixed random projection and returns ``{leaf name: max relative error}``.
Analytic gradients come from float32 parameters.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .convlstm import ConvLSTMParams, ConvLSTMState, Head, InputAttentionParams, attend_input, cell_step, classify_head
from .fusion import FusionParams, fuse
from .gradcheck import check_tensors
from .model import PRESETS, MGSTModel
from .nn import BatchNorm
from .tensor import Parameter, Tensor


def _proj(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _project(out: Tensor, weights: Tensor) -> Tensor:
    return ops.sum(ops.bmul(out, weights))


def _leaf(rng, shape, name, scale=1.0):
    return Parameter((rng.standard_normal(shape) * scale).astype(np.float32), name=name)


def check_conv2d(seed=0):
    rng = np.random.default_rng(seed)
    x, w, b = _leaf(rng, (2, 3, 7, 6), "x"), _leaf(rng, (4, 3, 3, 3), "w"), _leaf(rng, (4,), "b")
    spec = ops.ConvSpec((3, 3), (2, 1), (1, 0))
    proj = _proj(rng, (2, 4) + spec.output_shape((7, 6)))
    return check_tensors(lambda: _project(ops.conv2d(x, w, b, spec), proj), {"x": x, "w": w, "b": b})


def check_conv3d(seed=0):
    rng = np.random.default_rng(seed)
    x, w = _leaf(rng, (1, 2, 4, 6, 6), "x"), _leaf(rng, (3, 2, 3, 3, 3), "w")
    spec = ops.ConvSpec((3, 3, 3), (1, 2, 2), (1, 1, 1))
    proj = _proj(rng, (1, 3) + spec.output_shape((4, 6, 6)))
    return check_tensors(lambda: _project(ops.conv3d(x, w, None, spec), proj), {"x": x, "w": w})


def check_maxpool(seed=0):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (2, 2, 2, 7, 7), "x")
    spec = ops.ConvSpec((1, 3, 3), (1, 2, 2), (0, 1, 1))
    proj = _proj(rng, (2, 2) + spec.output_shape((2, 7, 7)))
    return check_tensors(lambda: _project(ops.maxpool(x, spec), proj), {"x": x})


def check_upsample(seed=0):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (1, 3, 2, 5, 4), "x")
    proj = _proj(rng, (1, 3, 2, 7, 9))
    return check_tensors(lambda: _project(ops.upsample_nearest(x, (7, 9)), proj), {"x": x})


def check_batchnorm(seed=0):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3)
    bn._buffers["running_mean"][:] = rng.standard_normal(3)
    bn._buffers["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3).astype(np.float32)
    bn.beta.data = rng.standard_normal(3).astype(np.float32)
    x = _leaf(rng, (2, 3, 2, 4, 4), "x")
    proj = _proj(rng, x.shape)
    leaves = {"x": x, "gamma": bn.gamma, "beta": bn.beta}
    return check_tensors(lambda: _project(bn(x, False), proj), leaves)


def check_fuse(seed=0):
    rng = np.random.default_rng(seed)
    p = FusionParams(4, rng)
    s, t = _leaf(rng, (2, 4, 3, 3, 3), "S"), _leaf(rng, (2, 4, 3, 3, 3), "T")
    proj = _proj(rng, s.shape)
    return check_tensors(lambda: _project(fuse(s, t, p), proj), {"S": s, "T": t, "W": p.W})


def check_attend_input(seed=0):
    rng = np.random.default_rng(seed)
    p = InputAttentionParams(3, 2, 3, rng)
    x, h = _leaf(rng, (2, 3, 3, 3), "x"), _leaf(rng, (2, 2, 3, 3), "h")
    proj = _proj(rng, x.shape)
    return check_tensors(lambda: _project(attend_input(x, h, p), proj),
                         {"x": x, "h": h, "W_xa": p.W_xa, "W_ha": p.W_ha})


def check_cell_step(seed=0):
    rng = np.random.default_rng(seed)
    p = ConvLSTMParams(3, 2, (3, 3), 3, rng)
    for name in ("W_ci", "W_cf", "W_co"):
        getattr(p, name).data = (rng.standard_normal((2, 3, 3)) * 0.5).astype(np.float32)
    x, c, h = _leaf(rng, (2, 3, 3, 3), "x"), _leaf(rng, (2, 2, 3, 3), "C"), _leaf(rng, (2, 2, 3, 3), "H")
    pc, ph = _proj(rng, c.shape), _proj(rng, h.shape)

    def loss():
        st = cell_step(x, ConvLSTMState(c, h), p)
        return ops.badd(_project(st.C, pc), _project(st.H, ph))

    leaves = {"x": x, "C": c, "H": h}
    leaves.update(dict(p.named_parameters()))
    return check_tensors(loss, leaves)


def check_classify_head(seed=0):
    rng = np.random.default_rng(seed)
    head = Head(2 * 2 * 2, 5, rng, std=0.5)
    hid = _leaf(rng, (3, 2, 4, 2, 2), "hidden")
    labels = np.array([0, 3, 4])
    out = {}
    for avg in ("logits", "probs"):
        rep = check_tensors(lambda: ops.cross_entropy(classify_head(hid, head.W, head.b, [4, 2, 3], avg), labels),
                            {"hidden": hid, "W": head.W, "b": head.b})
        out.update({f"{avg}:{k}": v for k, v in rep.items()})
    return out


def check_model(seed=0, preset="tiny", samples=2, max_per_tensor=3):
    """End-to-end loss against every parameter tensor (a random subset of entries each)."""
    rng = np.random.default_rng(seed)
    model = MGSTModel(PRESETS[preset](), seed)
    cfg = model.config
    videos = Tensor(rng.uniform(0, 1, (samples, 1, cfg.input.t, cfg.input.h, cfg.input.w)).astype(np.float32))
    labels = rng.integers(0, cfg.head.k, samples)
    # larger head weights make the loss sensitive to the whole network
    model.head.W.data = (model.head.W.data * 30).astype(np.float32)
    loss = lambda: ops.cross_entropy(model.forward_batch(videos, training=True), labels)  # noqa: E731
    return check_tensors(loss, dict(model.named_parameters()), max_per_tensor=max_per_tensor, seed=seed)


CHECKS: dict[str, Callable[..., dict[str, float]]] = {
    "conv2d": check_conv2d,
    "conv3d": check_conv3d,
    "maxpool": check_maxpool,
    "upsample": check_upsample,
    "batchnorm": check_batchnorm,
    "fuse": check_fuse,
    "attend_input": check_attend_input,
    "cell_step": check_cell_step,
    "classify_head": check_classify_head,
    "model": check_model,
}
