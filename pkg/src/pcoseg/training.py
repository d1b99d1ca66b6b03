"""Training loop: binary cross-entropy, Adam updates, early stopping and
best-validation-Dice checkpointing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .unet import UNet, binarize, forward_probs, load_checkpoint, save_checkpoint

BCE_EPS = 1e-7
PREDICT_BATCH = 8


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 14
    steps_per_epoch: int = 25
    batch_size: int = 4
    learning_rate: float = 1e-4
    early_stop_patience: int | None = 4  # None disables early stopping
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1 or None")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_dice: float
    valid_iou: float
    valid_accuracy: float


@dataclass
class CheckpointRecord:
    path: Path
    epoch: int
    valid_dice: float
    valid_iou: float
    valid_accuracy: float
    history: list[EpochStats] = field(default_factory=list)


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy with probabilities clamped away
    from 0 and 1."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def _evaluate(model: UNet, images: list[np.ndarray], masks: list[np.ndarray]):
    """Validation loss plus mean Dice/IoU/accuracy of binarized predictions."""
    losses, dices, ious, accs = [], [], [], []
    for start in range(0, len(images), PREDICT_BATCH):
        batch = np.stack(images[start : start + PREDICT_BATCH])
        target = np.stack(masks[start : start + PREDICT_BATCH]).astype(np.float32)
        probs = forward_probs(model, batch)
        losses.append(float(bce_loss(torch.from_numpy(probs), torch.from_numpy(target))))
        for i in range(probs.shape[0]):
            pred = binarize(probs[i])
            truth = target[i].astype(np.uint8)
            dices.append(metrics.dice(pred, truth))
            ious.append(metrics.iou(pred, truth))
            accs.append(metrics.pixel_accuracy(pred, truth))
    return (
        float(np.mean(losses)),
        float(np.mean(dices)),
        float(np.mean(ious)),
        float(np.mean(accs)),
    )


def train_model(
    model: UNet,
    train_stream,
    valid_images: list[np.ndarray],
    valid_masks: list[np.ndarray],
    cfg: TrainConfig,
    checkpoint_path,
) -> CheckpointRecord:
    """Consume the augmented stream, validate each epoch, keep the best model.

    The checkpoint is replaced whenever validation Dice improves; training
    stops after cfg.epochs epochs or once Dice has not improved for
    cfg.early_stop_patience consecutive epochs.
    """
    if not valid_images:
        raise ValueError("validation set must not be empty")
    checkpoint_path = Path(checkpoint_path)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    stream = iter(train_stream)
    history: list[EpochStats] = []
    best = CheckpointRecord(
        path=checkpoint_path, epoch=-1, valid_dice=-1.0, valid_iou=0.0, valid_accuracy=0.0
    )
    epochs_without_improvement = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        step_losses = []
        for step in range(1, cfg.steps_per_epoch + 1):
            imgs, masks = next(stream)
            x = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32)).unsqueeze(1)
            y = torch.from_numpy(np.ascontiguousarray(masks, dtype=np.float32)).unsqueeze(1)
            optimizer.zero_grad()
            loss = bce_loss(model(x), y)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, step)
            loss.backward()
            optimizer.step()
            step_losses.append(value)

        valid_loss, valid_dice, valid_iou, valid_acc = _evaluate(
            model, valid_images, valid_masks
        )
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(step_losses)),
            valid_loss=valid_loss,
            valid_dice=valid_dice,
            valid_iou=valid_iou,
            valid_accuracy=valid_acc,
        )
        history.append(stats)

        if valid_dice > best.valid_dice:
            best.epoch = epoch
            best.valid_dice = valid_dice
            best.valid_iou = valid_iou
            best.valid_accuracy = valid_acc
            save_checkpoint(
                checkpoint_path,
                model,
                extra_meta={
                    "epoch": epoch,
                    "valid_dice": valid_dice,
                    "valid_iou": valid_iou,
                    "valid_accuracy": valid_acc,
                },
            )
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if (
                cfg.early_stop_patience is not None
                and epochs_without_improvement >= cfg.early_stop_patience
            ):
                break

    best.history = history
    return best


def predict(checkpoint, images) -> list:
    """Forward + binarize(0.5) each image through a saved checkpoint."""
    path = checkpoint.path if isinstance(checkpoint, CheckpointRecord) else checkpoint
    model, _ = load_checkpoint(path)
    out = []
    images = list(images)
    for start in range(0, len(images), PREDICT_BATCH):
        batch = np.stack(images[start : start + PREDICT_BATCH])
        probs = forward_probs(model, batch)
        for i in range(probs.shape[0]):
            out.append(binarize(probs[i]))
    return out


HISTORY_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_dice", "valid_iou", "valid_accuracy")


def write_history_csv(path, history: list[EpochStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for s in history:
            writer.writerow(
                [
                    s.epoch,
                    f"{s.train_loss:.6f}",
                    f"{s.valid_loss:.6f}",
                    f"{s.valid_dice:.6f}",
                    f"{s.valid_iou:.6f}",
                    f"{s.valid_accuracy:.6f}",
                ]
            )


def read_history_csv(path) -> list[EpochStats]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    valid_loss=float(row["valid_loss"]),
                    valid_dice=float(row["valid_dice"]),
                    valid_iou=float(row["valid_iou"]),
                    valid_accuracy=float(row["valid_accuracy"]),
                )
            )
    return rows
