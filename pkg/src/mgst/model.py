"""Network assembly: stem -> {residual, dense} -> fusion -> Bi-ConvLSTM -> framewise head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from . import ops
from .blocks import DenseBranch, ResidualBranch, Stem
from .convlstm import BiLayer, Head, bilayer_forward, classify_head
from .fusion import ConcatFusion, FusionParams, fuse_with_mask, mask_from
from .nn import Module, _training
from .tensor import Tensor, get_default_dtype, no_grad

ABLATIONS = ("full", "2d-only", "3d-only", "concat-fusion", "no-input-attention", "plain-convlstm")


class ConfigError(ValueError):
    pass


@dataclass
class InputConfig:
    t: int
    h: int
    w: int


@dataclass
class StemConfig:
    channels: int
    kernel: tuple[int, int, int] = (5, 7, 7)
    out: tuple[int, int] = (24, 24)


@dataclass
class ResidualConfig:
    widths: list[int]
    blocks: list[int]
    strides: list[int]


@dataclass
class DenseConfig:
    blocks: list[int]
    growth: int
    bottleneck: int = 4
    compression: float = 0.5


@dataclass
class BranchConfig:
    features: int
    residual: ResidualConfig
    dense: DenseConfig


@dataclass
class FusionConfig:
    mask: str = "full"
    bias: bool = False
    condition: str = "t"


@dataclass
class RecurrentConfig:
    hidden: int
    kernel: int = 3
    layers: int = 2


@dataclass
class HeadConfig:
    k: int
    average: str = "logits"


@dataclass
class ModelConfig:
    preset: str
    input: InputConfig
    stem: StemConfig
    branches: BranchConfig
    recurrent: RecurrentConfig
    head: HeadConfig
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation: str = "full"
    bypass_recurrence: bool = False

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        base = PRESETS[d["preset"]]().to_dict() if d.get("preset") in PRESETS else {}
        merged = _merge(base, d)
        try:
            br = merged["branches"]
            return cls(
                preset=merged["preset"],
                input=InputConfig(**merged["input"]),
                stem=StemConfig(channels=merged["stem"]["channels"], kernel=tuple(merged["stem"]["kernel"]),
                                out=tuple(merged["stem"]["out"])),
                branches=BranchConfig(features=br["features"], residual=ResidualConfig(**br["residual"]),
                                      dense=DenseConfig(**br["dense"])),
                recurrent=RecurrentConfig(**merged["recurrent"]),
                head=HeadConfig(**merged["head"]),
                fusion=FusionConfig(**merged.get("fusion", {})),
                ablation=merged.get("ablation", "full"),
                bypass_recurrence=bool(merged.get("bypass_recurrence", False)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc

    def with_ablation(self, mode: str) -> "ModelConfig":
        return dataclasses.replace(self, ablation=mode)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def full_preset() -> ModelConfig:
    return ModelConfig(
        preset="full",
        input=InputConfig(29, 88, 88),
        stem=StemConfig(64, (5, 7, 7), (24, 24)),
        branches=BranchConfig(
            features=512,
            residual=ResidualConfig([64, 128, 256, 512], [3, 4, 6, 3], [1, 2, 2, 2]),
            dense=DenseConfig([6, 6, 6, 6], growth=32, bottleneck=4, compression=0.5),
        ),
        recurrent=RecurrentConfig(hidden=256, kernel=3),
        head=HeadConfig(k=500),
    )


def tiny_preset() -> ModelConfig:
    return ModelConfig(
        preset="tiny",
        input=InputConfig(8, 32, 32),
        stem=StemConfig(8, (5, 7, 7), (8, 8)),
        branches=BranchConfig(
            features=32,
            residual=ResidualConfig([8, 16, 32], [1, 1, 1], [1, 2, 2]),
            dense=DenseConfig([2, 2, 2], growth=8, bottleneck=2, compression=0.5),
        ),
        recurrent=RecurrentConfig(hidden=8, kernel=3),
        head=HeadConfig(k=8),
    )


def micro_preset() -> ModelConfig:
    """Few-thousand-parameter variant for exhaustive gradient checks."""
    return ModelConfig(
        preset="micro",
        input=InputConfig(3, 16, 16),
        stem=StemConfig(2, (3, 5, 5), (4, 4)),
        branches=BranchConfig(
            features=4,
            residual=ResidualConfig([4, 4], [1, 1], [1, 2]),
            dense=DenseConfig([1, 1], growth=2, bottleneck=2, compression=0.5),
        ),
        recurrent=RecurrentConfig(hidden=2, kernel=3),
        head=HeadConfig(k=3),
    )


PRESETS = {"full": full_preset, "tiny": tiny_preset, "micro": micro_preset}


def load_config(path) -> ModelConfig:
    """Read a YAML model config; keys not given fall back to the named preset."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if "model" in data:
        data = data["model"]
    if "preset" not in data:
        raise ConfigError("config needs a 'preset' key")
    return ModelConfig.from_dict(data)


# ---------------------------------------------------------------------------
# shape inference and census


def shape_chain(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Analytic feature shapes at each stage for one clip."""
    t, h, w = cfg.input.t, cfg.input.h, cfg.input.w
    kt, kh, kw = cfg.stem.kernel
    conv = ops.ConvSpec(cfg.stem.kernel, (1, 2, 2), (kt // 2, kh // 2, kw // 2))
    pool = ops.ConvSpec((1, 3, 3), (1, 2, 2), (0, 1, 1))
    c0 = cfg.stem.channels
    s_conv = conv.output_shape((t, h, w))
    s_pool = pool.output_shape(s_conv)
    sh, sw = cfg.stem.out
    res = cfg.branches.residual
    rh, rw = sh, sw
    for stride in res.strides:
        rh, rw = (rh + 2 - 3) // stride + 1, (rw + 2 - 3) // stride + 1
    dh, dw = sh, sw
    for _ in cfg.branches.dense.blocks[:-1]:
        dh, dw = dh // 2, dw // 2
    return {
        "input": (1, t, h, w),
        "stem_conv": (c0,) + s_conv,
        "stem_pool": (c0,) + s_pool,
        "stem": (c0, s_pool[0], sh, sw),
        "residual": (res.widths[-1], t, rh, rw),
        "dense": (cfg.branches.features, t, dh, dw),
        "fused": (cfg.branches.features, t, rh, rw),
    }


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of module construction."""

    def bn(c):
        return 2 * c

    def conv(cin, cout, k):
        return cin * cout * int(np.prod(k))

    mode = cfg.ablation
    c0 = cfg.stem.channels
    n = conv(1, c0, cfg.stem.kernel) + bn(c0)
    cf = cfg.branches.features
    if mode != "3d-only":
        res = cfg.branches.residual
        c = c0
        for width, count, stride in zip(res.widths, res.blocks, res.strides):
            for j in range(count):
                s = stride if j == 0 else 1
                n += conv(c, width, (3, 3)) + bn(width) + conv(width, width, (3, 3)) + bn(width)
                if s != 1 or c != width:
                    n += conv(c, width, (1, 1)) + bn(width)
                c = width
    if mode != "2d-only":
        d = cfg.branches.dense
        c = c0
        for i, count in enumerate(d.blocks):
            for _ in range(count):
                mid = d.bottleneck * d.growth
                n += bn(c) + conv(c, mid, (1,)) + bn(mid) + conv(mid, d.growth, (3, 3, 3))
                c += d.growth
            if i < len(d.blocks) - 1:
                nxt = max(1, int(c * d.compression))
                n += bn(c) + conv(c, nxt, (1,))
                c = nxt
        n += bn(c) + conv(c, cf, (1,))
    if mode in ("full", "no-input-attention", "plain-convlstm"):
        fz = cfg.fusion
        cout = cf if fz.mask == "full" else 1
        cin = cf if fz.condition == "t" else 2 * cf
        n += cin * cout + (cout if fz.bias else 0)
    elif mode == "concat-fusion":
        n += 2 * cf * cf
    _, _, fh, fw = shape_chain(cfg)["fused"]
    if cfg.bypass_recurrence:
        head_in = cf * fh * fw
    else:
        hid, k = cfg.recurrent.hidden, cfg.recurrent.kernel
        attention = mode not in ("no-input-attention", "plain-convlstm")
        peephole = mode != "plain-convlstm"
        cin = cf
        for _ in range(cfg.recurrent.layers):
            cell = 4 * conv(cin, hid, (k, k)) + 4 * conv(hid, hid, (k, k)) + 4 * hid
            if peephole:
                cell += 3 * hid * fh * fw
            n += 2 * cell
            if attention:
                n += conv(cin, cin, (k, k)) + conv(hid, cin, (k, k))
            cin = 2 * hid
        head_in = 2 * hid * fh * fw
    n += head_in * cfg.head.k + cfg.head.k
    return n


def validate(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}, got {cfg.ablation!r}")
    if cfg.head.average not in ("logits", "probs"):
        raise ConfigError(f"head.average must be 'logits' or 'probs', got {cfg.head.average!r}")
    res = cfg.branches.residual
    if not (len(res.widths) == len(res.blocks) == len(res.strides)):
        raise ConfigError("branches.residual: widths, blocks and strides need one entry per stage")
    if res.widths[-1] != cfg.branches.features:
        raise ConfigError(f"residual branch ends at {res.widths[-1]} channels, features is {cfg.branches.features}")
    chain = shape_chain(cfg)
    _, _, ph, pw = chain["stem_pool"]
    if cfg.stem.out[0] < ph or cfg.stem.out[1] < pw:
        raise ConfigError(f"stem output {cfg.stem.out} is smaller than the pooled map {ph}x{pw}")
    if chain["stem"][1] != cfg.input.t:
        raise ConfigError("stem must preserve the number of frames")
    sh, sw = cfg.stem.out
    for _ in cfg.branches.dense.blocks[:-1]:
        if sh % 2 or sw % 2:
            raise ConfigError(f"dense transitions cannot halve odd extent {sh}x{sw}")
        sh, sw = sh // 2, sw // 2
    if cfg.ablation in ("full", "concat-fusion", "no-input-attention", "plain-convlstm") and chain["residual"] != chain["dense"]:
        raise ConfigError(f"branch shape mismatch: residual {chain['residual']} vs dense {chain['dense']}")
    return chain


# ---------------------------------------------------------------------------
# model


class MGSTModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        chain = validate(cfg)
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        mode = cfg.ablation
        br = cfg.branches
        c0 = cfg.stem.channels
        self.stem = Stem(c0, cfg.stem.kernel, cfg.stem.out, rng)
        self.residual = None
        self.dense = None
        self.fusion = None
        if mode != "3d-only":
            self.residual = ResidualBranch(c0, br.residual.widths, br.residual.blocks, br.residual.strides, rng)
        if mode != "2d-only":
            self.dense = DenseBranch(c0, br.features, br.dense.blocks, br.dense.growth, br.dense.bottleneck,
                                     br.dense.compression, rng)
        if mode in ("full", "no-input-attention", "plain-convlstm"):
            self.fusion = FusionParams(br.features, rng, cfg.fusion.mask, cfg.fusion.bias, cfg.fusion.condition)
        elif mode == "concat-fusion":
            self.fusion = ConcatFusion(br.features, rng)
        fc, _, fh, fw = chain["fused"]
        rec = cfg.recurrent
        self.recurrent = []
        if cfg.bypass_recurrence:
            head_in = fc * fh * fw
        else:
            attention = mode not in ("no-input-attention", "plain-convlstm")
            peephole = mode != "plain-convlstm"
            cin = fc
            for _ in range(rec.layers):
                self.recurrent.append(BiLayer(cin, rec.hidden, (fh, fw), rec.kernel, rng, attention, peephole))
                cin = 2 * rec.hidden
            head_in = 2 * rec.hidden * fh * fw
        self.head = Head(head_in, cfg.head.k, rng)
        self.register_buffer("input_stats", np.array([0.0, 1.0], dtype=get_default_dtype()))
        self.chain = chain
        self.name_parameters()
        expected = expected_parameter_count(cfg)
        if self.num_parameters() != expected:
            raise ConfigError(f"parameter census {self.num_parameters()} != expected {expected}")

    @property
    def uses_attention(self) -> bool:
        return bool(self.recurrent) and self.recurrent[0].att is not None

    def set_input_stats(self, mean: float, std: float):
        self._buffers["input_stats"][:] = (mean, std)

    def routes(self) -> tuple[str, ...]:
        """Data paths this model can run: its own ablation plus any single-branch path it has weights for."""
        out = [self.config.ablation]
        for mode, branch in (("2d-only", self.residual), ("3d-only", self.dense)):
            if branch is not None and mode not in out:
                out.append(mode)
        return tuple(out)

    def route_parameters(self, route: str) -> list[str]:
        """Names of the parameters a forward pass along ``route`` touches."""
        skip = {"2d-only": ("dense.", "fusion."), "3d-only": ("residual.", "fusion.")}.get(route, ())
        return [n for n, _ in self.named_parameters() if not n.startswith(skip)]

    def features(self, videos: Tensor, training: bool, route: Optional[str] = None) -> dict[str, Tensor]:
        """Intermediate tensors of the front end for a batch ``[N, 1, T, H, W]``.

        ``route`` runs a single-branch path ("2d-only" / "3d-only") through a
        model built with both branches.
        """
        mode = route or self.config.ablation
        if mode not in self.routes():
            raise ValueError(f"route {mode!r} is not available; choose from {self.routes()}")
        mean, std = (float(v) for v in self._buffers["input_stats"])
        x = videos
        if mean != 0.0 or std != 1.0:
            x = ops.scale(ops.badd(x, Tensor(np.asarray(-mean, dtype=x.dtype))), 1.0 / std)
        out = {"stem": self.stem(x, training)}
        s = self.residual(out["stem"], training) if mode != "3d-only" else None
        t = self.dense(out["stem"], training) if mode != "2d-only" else None
        if s is not None:
            out["S"] = s
        if t is not None:
            out["T"] = t
        if mode == "2d-only":
            fused = s
        elif mode == "3d-only":
            fused = t
        elif mode == "concat-fusion":
            fused = self.fusion(s, t)
        else:
            mask = mask_from(t, self.fusion, s)
            out["mask"] = mask
            fused = fuse_with_mask(s, t, mask)
        out["fused"] = fused
        return out

    def forward_batch(self, videos, training: bool = False, lengths: Optional[Sequence[int]] = None,
                      attention_override: Optional[float] = None, return_features: bool = False,
                      route: Optional[str] = None):
        videos = videos if isinstance(videos, Tensor) else Tensor(videos)
        cfg = self.config
        if videos.ndim != 5 or videos.shape[1] != 1 or videos.shape[3:] != (cfg.input.h, cfg.input.w):
            raise ops.ShapeError(f"video batch shape {list(videos.shape)} does not match preset "
                                 f"[N, 1, T, {cfg.input.h}, {cfg.input.w}]")
        feats = self.features(videos, training, route)
        hidden = feats["fused"]
        if self.recurrent:
            hidden = bilayer_forward(hidden, self.recurrent, attention_override=attention_override,
                                     lengths=lengths, use_attention=True)
        feats["hidden"] = hidden
        logits = classify_head(hidden, self.head.W, self.head.b, lengths=lengths, average=cfg.head.average)
        if return_features:
            feats["logits"] = logits
            return feats
        return logits

    def forward(self, video, mode="eval", **kw) -> Tensor:
        """Single clip ``[1, T, H, W]`` -> logits ``[K]``."""
        video = video if isinstance(video, Tensor) else Tensor(video)
        if video.ndim != 4:
            raise ops.ShapeError(f"expected one clip [1, T, H, W], got shape {list(video.shape)}")
        out = self.forward_batch(video.reshape((1,) + video.shape), _training(mode), **kw)
        return out.reshape(out.shape[1:])

    __call__ = forward

    def export_mask(self, video) -> np.ndarray:
        if self.config.ablation not in ("full", "no-input-attention", "plain-convlstm"):
            raise ValueError(f"ablation {self.config.ablation!r} has no attention mask")
        video = video if isinstance(video, Tensor) else Tensor(video)
        with no_grad():
            feats = self.features(video.reshape((1,) + video.shape), training=False)
        return feats["mask"].data[0]


def build(config, seed: int = 0) -> MGSTModel:
    """Build from a :class:`ModelConfig` or a preset name."""
    if isinstance(config, str):
        if config not in PRESETS:
            raise ConfigError(f"unknown preset {config!r}; choose from {sorted(PRESETS)}")
        config = PRESETS[config]()
    return MGSTModel(config, seed)


def forward(model: MGSTModel, video, mode="eval") -> Tensor:
    return model.forward(video, mode)
