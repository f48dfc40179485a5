"""SGD-with-momentum training with a step learning-rate schedule."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import Dataset, DataError
from .models import ModelGraph, forward
from .routing import MODES
from .seeding import stream
from .tensor import NonFiniteError, Tape, name_scope

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay_factor: float = 10.0
    decay_epochs: tuple[int, ...] = (80, 150)
    seed: int = 0
    shift_pixels: int = 4
    hflip: bool = True
    mode: str = "adaptive"
    weight_decay: float = 0.0
    eval_batch_size: int = 256
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_decay_factor <= 0:
            raise ValueError("lr_decay_factor must be > 0")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs must be strictly increasing, got {d}")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ValueError(f"decay epochs must lie in [0, {self.epochs}), got {d}")
        if self.shift_pixels < 0:
            raise ValueError("shift_pixels must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, where: str):
        self.epoch, self.batch, self.where = epoch, batch, where
        super().__init__(f"non-finite values at epoch {epoch}, batch {batch}, in {where or 'loss'}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr / cfg.lr_decay_factor ** drops


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float, momentum: float,
                      weight_decay: float = 0.0):
    """In place: ``v <- momentum * v - lr * g``; ``p <- p + v``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


# --- augmentation -----------------------------------------------------------------

def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a CHW image by (dy, dx) pixels, filling with zeros."""
    _, h, w = img.shape
    out = np.zeros_like(img)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def augment(image: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Random shift up to +-shift_pixels and a horizontal flip with p = 0.5."""
    s = cfg.shift_pixels
    dy, dx = (int(v) for v in rng.integers(-s, s + 1, size=2)) if s else (0, 0)
    flip = bool(rng.random() < 0.5) if cfg.hflip else False
    out = shift_image(image, dy, dx) if (dy or dx) else image.copy()
    return out[:, :, ::-1].copy() if flip else out


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    if not cfg.shift_pixels and not cfg.hflip:
        return images.copy()
    return np.stack([augment(img, rng, cfg) for img in images])


# --- metrics / reports ------------------------------------------------------------

@dataclass
class EvalResult:
    loss: float
    accuracy: float
    per_class_accuracy: np.ndarray
    n: int


def evaluate(model: ModelGraph, ds: Dataset, batch_size: int = 256) -> EvalResult:
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    classes = model.spec.classes
    total_loss, correct = 0.0, 0
    hits = np.zeros(classes)
    counts = np.zeros(classes)
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x = ds.normalized(idx).astype(model.dtype)
        y = ds.labels[idx]
        logits, _ = forward(model, x)
        total_loss += float(ops.cross_entropy_loss(logits, y).data) * len(idx)
        pred = logits.data.argmax(axis=1)
        ok = pred == y
        correct += int(ok.sum())
        np.add.at(hits, y, ok)
        np.add.at(counts, y, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return EvalResult(total_loss / len(ds), correct / len(ds), per_class, len(ds))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_time: float = field(default=0.0, compare=False)


CSV_HEADER = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "wall_time"]


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def best_val_error(self) -> float:
        return min(1.0 - e.val_acc for e in self.epochs)

    @property
    def best_epoch(self) -> int:
        return min(self.epochs, key=lambda e: (1.0 - e.val_acc, e.epoch)).epoch

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def summary(self) -> dict:
        """Deterministic summary (no wall-clock fields)."""
        return {
            "seed": self.seed,
            "epochs": len(self.epochs),
            "best_val_error": self.best_val_error,
            "best_epoch": self.best_epoch,
            "final_train_loss": self.final.train_loss,
            "final_train_acc": self.final.train_acc,
            "final_val_loss": self.final.val_loss,
            "final_val_acc": self.final.val_acc,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.val_loss),
                            repr(e.val_acc), f"{e.wall_time:.3f}"])

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# --- loop ---------------------------------------------------------------------------

def train_step(model: ModelGraph, x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    """Forward + backward on one batch; gradients land in ``param.grad``."""
    model.zero_grad()
    with Tape() as tape:
        logits, _ = forward(model, x)
        with name_scope("loss"):
            loss = ops.cross_entropy_loss(logits, y)
    tape.backward(loss)
    return float(loss.data), int((logits.data.argmax(axis=1) == y).sum())


def train(model: ModelGraph, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          out_dir=None, velocity: dict | None = None) -> TrainReport:
    """Run the full loop. Deterministic given ``cfg.seed``.

    With ``out_dir``, writes ``best.ckpt`` (best validation accuracy so far),
    ``last.ckpt``, optional ``epoch<k>.ckpt`` every ``checkpoint_every`` epochs,
    ``report.csv`` and ``summary.json``.
    """
    if len(train_ds) == 0:
        raise DataError("empty training set")
    if train_ds.mean is None:
        raise DataError("training set has no normalization stats")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model.input_mean, model.input_std = train_ds.mean, train_ds.std
    params = {k: t.data for k, t in model.params.items()}
    velocity = {} if velocity is None else velocity
    report = TrainReport(seed=cfg.seed)
    best_acc = -1.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(train_ds))
        aug_rng = stream(cfg.seed, "augment", epoch)
        seen, loss_sum, correct = 0, 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            raw = augment_batch(train_ds.images[idx], aug_rng, cfg)
            x = train_ds.normalize(raw).astype(model.dtype)
            y = train_ds.labels[idx]
            try:
                loss, hits = train_step(model, x, y)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, exc.scope or exc.op) from exc
            grads = {}
            for k, t in model.params.items():
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                if not np.isfinite(g).all():
                    raise TrainingDiverged(epoch, b, f"gradient of {k}")
                grads[k] = g
            sgd_momentum_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            seen += len(idx)
            loss_sum += loss * len(idx)
            correct += hits
        val = evaluate(model, val_ds, cfg.eval_batch_size)
        stats = EpochStats(epoch, lr, loss_sum / seen, correct / seen, val.loss, val.accuracy,
                           time.perf_counter() - t0)
        report.epochs.append(stats)
        log.info("epoch %d lr %.4g train loss %.4f acc %.4f | val loss %.4f acc %.4f (%.1fs)",
                 epoch, lr, stats.train_loss, stats.train_acc, val.loss, val.accuracy, stats.wall_time)
        if out is not None:
            if val.accuracy > best_acc:
                save_checkpoint(model, out / "best.ckpt", extra={"epoch": epoch})
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"epoch{epoch + 1}.ckpt", extra={"epoch": epoch})
        best_acc = max(best_acc, val.accuracy)
    if out is not None:
        save_checkpoint(model, out / "last.ckpt", extra={"epoch": cfg.epochs - 1})
        report.write_csv(out / "report.csv")
        report.write_summary(out / "summary.json")
    return report


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["decay_epochs"] = list(cfg.decay_epochs)
    return d
