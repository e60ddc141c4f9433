"""Mini-batch training, evaluation, checkpoints and metric export."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from . import ops
from .codec import (BadMagicError, ExtentMismatchError, TruncatedPayloadError, VersionMismatchError,
                    read_tensor, write_tensor)
from .model import ConfigError, MGSTModel, ModelConfig
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, no_grad

SCHEDULES = ("end2end", "two-stage")
METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    schedule: str = "end2end"
    stage_epochs: int = 0  # per-branch epochs before fine-tuning in the two-stage schedule
    seed: int = 0
    record_time: bool = True  # False writes 0 in the seconds column so runs compare byte for byte

    def check(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0 or self.stage_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs, stage_epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        return self

    @property
    def total_epochs(self) -> int:
        extra = 2 * self.stage_epochs if self.schedule == "two-stage" else 0
        return self.epochs + extra

    def stage(self, epoch: int) -> Optional[str]:
        """Data path used in 1-based ``epoch``; ``None`` means the model's own."""
        if self.schedule == "two-stage":
            if epoch <= self.stage_epochs:
                return "2d-only"
            if epoch <= 2 * self.stage_epochs:
                return "3d-only"
        return None


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    """YAML with a ``model`` section (preset plus overrides) and an optional ``train`` section."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    model = data.get("model", {})
    if "preset" not in model:
        raise ConfigError(f"{path}: model.preset is required")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    train = data.get("train", {}) or {}
    unknown = set(train) - known
    if unknown:
        raise ConfigError(f"{path}: unknown train keys {sorted(unknown)}")
    return ModelConfig.from_dict(model), TrainConfig(**train).check()


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.train_acc), repr(self.val_acc), repr(self.seconds)]


def write_metrics(path, history: Sequence[EpochMetrics]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in history:
            w.writerow(m.row())


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["val_acc"]),
                         float(r["seconds"])) for r in rows]


# ---------------------------------------------------------------------------
# data checks


def check_data(model: MGSTModel, videos: np.ndarray, labels: np.ndarray, what: str = "data"):
    cfg = model.config
    if len(labels) == 0:
        raise ValueError(f"{what}: dataset is empty")
    if videos.ndim != 5 or videos.shape[1] != 1 or videos.shape[3:] != (cfg.input.h, cfg.input.w):
        raise ops.ShapeError(f"{what}: clips of shape {list(videos.shape[1:])} do not fit preset "
                             f"{cfg.preset!r} input [1, T, {cfg.input.h}, {cfg.input.w}]")
    if labels.min() < 0 or labels.max() >= cfg.head.k:
        raise ValueError(f"{what}: labels span [{labels.min()}, {labels.max()}] but the model has "
                         f"{cfg.head.k} classes")


def input_stats(videos: np.ndarray) -> tuple[float, float]:
    v = videos.astype(np.float64)
    return float(v.mean()), float(max(v.std(), 1e-6))


# ---------------------------------------------------------------------------
# evaluation


def predict(model: MGSTModel, videos: np.ndarray, batch_size: int = 32, route: Optional[str] = None) -> np.ndarray:
    """Eval-mode logits ``[N, K]``."""
    out = []
    with no_grad():
        for i in range(0, len(videos), batch_size):
            out.append(model.forward_batch(Tensor(videos[i:i + batch_size]), training=False, route=route).data)
    return np.concatenate(out)


def confusion_matrix(labels: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def evaluate(model: MGSTModel, videos: np.ndarray, labels: np.ndarray, classes: Optional[Sequence[int]] = None,
             batch_size: int = 32) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and confusion matrix (rows are true classes).

    ``classes`` restricts scoring to samples whose label is in the subset;
    predictions still range over all classes.
    """
    check_data(model, videos, labels, "eval")
    if classes is not None:
        keep = np.isin(labels, list(classes))
        videos, labels = videos[keep], labels[keep]
    pred = predict(model, videos, batch_size).argmax(axis=1)
    cm = confusion_matrix(labels, pred, model.config.head.k)
    return float(np.trace(cm) / cm.sum()), cm


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Holds everything that evolves during training, so it can be checkpointed."""

    def __init__(self, model: MGSTModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg.check()
        self.adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.history: list[EpochMetrics] = []

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def run_epoch(self, videos: np.ndarray, labels: np.ndarray, val: Optional[tuple[np.ndarray, np.ndarray]] = None
                  ) -> EpochMetrics:
        start = time.perf_counter()
        epoch = self.epoch + 1
        route = self.cfg.stage(epoch)
        params = self.model.parameters()
        frozen = frozenset()
        if route is not None:
            active = set(self.model.route_parameters(route))
            frozen = frozenset(p.name for p in params if p.name not in active)
        total_loss = 0.0
        correct = 0
        for idx in self._batches(len(labels)):
            x = videos[idx]
            if self.cfg.flip_prob > 0:
                flip = self.rng.random(len(idx)) < self.cfg.flip_prob
                x = np.where(flip[:, None, None, None, None], x[..., ::-1], x)
            y = labels[idx]
            logits = self.model.forward_batch(Tensor(x), training=True, route=route)
            loss = ops.cross_entropy(logits, y)
            grads = backward(loss, params)
            adam_step(params, grads, self.adam, frozen)
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        val_acc = float("nan")
        if val is not None:
            val_acc, _ = evaluate(self.model, val[0], val[1])
        seconds = time.perf_counter() - start if self.cfg.record_time else 0.0
        m = EpochMetrics(epoch, total_loss / len(labels), correct / len(labels), val_acc, round(seconds, 3))
        self.epoch = epoch
        self.history.append(m)
        return m


def train(model: MGSTModel, cfg: TrainConfig, videos: np.ndarray, labels: np.ndarray,
          val: Optional[tuple[np.ndarray, np.ndarray]] = None, out_dir=None, resume=None,
          until: Optional[int] = None, log: Optional[Callable[[EpochMetrics], None]] = None) -> Trainer:
    """Train to ``cfg.total_epochs`` (or ``until``), writing metrics and a checkpoint to ``out_dir``.

    ``resume`` is a checkpoint path; the model, optimiser, RNG and history are
    restored from it and training continues from the next epoch.
    """
    check_data(model, videos, labels, "train")
    if val is not None:
        check_data(model, val[0], val[1], "val")
    if cfg.schedule == "two-stage" and cfg.stage_epochs > 0 and not {"2d-only", "3d-only"} <= set(model.routes()):
        raise ConfigError("the two-stage schedule needs a model with both branches")
    if resume is not None:
        trainer = load_checkpoint(resume, model, cfg)
    else:
        trainer = Trainer(model, cfg)
        model.set_input_stats(*input_stats(videos))
    stop = cfg.total_epochs if until is None else min(until, cfg.total_epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while trainer.epoch < stop:
        m = trainer.run_epoch(videos, labels, val)
        if log is not None:
            log(m)
        if out is not None:
            write_metrics(out / "metrics.csv", trainer.history)
    if out is not None:
        write_metrics(out / "metrics.csv", trainer.history)
        save_checkpoint(out / "model.ckpt", trainer)
    return trainer


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: b"MGCK", u32 version, u32 header length, JSON header (sorted keys),
# then one MGT1 tensor per entry of header["tensors"], in that order.

CKPT_MAGIC = b"MGCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def checkpoint_bytes(trainer: Trainer) -> bytes:
    model = trainer.model
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [("param:" + n, p.data) for n, p in model.named_parameters()]
    tensors += [("buffer:" + n, b) for n, b in model.named_buffers()]
    for n in sorted(trainer.adam.m):
        tensors.append(("adam_m:" + n, trainer.adam.m[n]))
        tensors.append(("adam_v:" + n, trainer.adam.v[n]))
    header = {
        "preset": model.config.preset,
        "model": model.config.to_dict(),
        "model_seed": model.seed,
        "train": dataclasses.asdict(trainer.cfg),
        "epoch": trainer.epoch,
        "adam": trainer.adam.hyper(),
        "rng": trainer.rng.bit_generator.state,
        "history": [dataclasses.asdict(m) for m in trainer.history],
        "tensors": [name for name, _ in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
    buf.write(blob)
    for _, arr in tensors:
        write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(path, trainer: Trainer):
    Path(path).write_bytes(checkpoint_bytes(trainer))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw header and named tensors."""
    with open(path, "rb") as f:
        head = f.read(_CKPT_HEAD.size)
        if len(head) >= 4 and head[:4] != CKPT_MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (magic {head[:4]!r})")
        if len(head) < _CKPT_HEAD.size:
            raise TruncatedPayloadError(f"{path}: checkpoint header is truncated")
        _, version, size = _CKPT_HEAD.unpack(head)
        if version != CKPT_VERSION:
            raise VersionMismatchError(f"{path}: checkpoint version {version}, reader supports {CKPT_VERSION}")
        blob = f.read(size)
        if len(blob) != size:
            raise TruncatedPayloadError(f"{path}: checkpoint header is truncated")
        header = json.loads(blob)
        tensors = {name: read_tensor(f) for name in header["tensors"]}
        if f.read(1):
            raise ExtentMismatchError(f"{path}: trailing bytes after the last tensor")
    return header, tensors


def model_from_checkpoint(path) -> MGSTModel:
    header, tensors = read_checkpoint(path)
    model = MGSTModel(ModelConfig.from_dict(header["model"]), header["model_seed"])
    _restore_model(model, tensors)
    return model


def _restore_model(model: MGSTModel, tensors: dict[str, np.ndarray]):
    state = {k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith(("param:", "buffer:"))}
    model.load_state_dict(state, strict=True)


def load_checkpoint(path, model: MGSTModel, cfg: Optional[TrainConfig] = None) -> Trainer:
    """Restore ``model`` in place and return a trainer positioned after the saved epoch.

    The checkpoint must come from the same preset and architecture.  ``cfg``
    may extend the epoch budget; everything else is taken from the file.
    """
    header, tensors = read_checkpoint(path)
    if header["preset"] != model.config.preset:
        raise ConfigError(f"checkpoint preset {header['preset']!r} does not match model preset "
                          f"{model.config.preset!r}")
    if header["model"] != model.config.to_dict():
        raise ConfigError("checkpoint architecture differs from the model configuration")
    _restore_model(model, tensors)
    model.seed = header["model_seed"]
    saved = TrainConfig(**header["train"])
    if cfg is not None:
        saved = dataclasses.replace(saved, epochs=cfg.epochs, record_time=cfg.record_time)
    trainer = Trainer(model, saved)
    hyper = header["adam"]
    trainer.adam = AdamState(hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["t"])
    for name, arr in tensors.items():
        kind, _, pname = name.partition(":")
        if kind == "adam_m":
            trainer.adam.m[pname] = arr.copy()
        elif kind == "adam_v":
            trainer.adam.v[pname] = arr.copy()
    trainer.rng.bit_generator.state = header["rng"]
    trainer.epoch = header["epoch"]
    trainer.history = [EpochMetrics(**m) for m in header["history"]]
    return trainer
