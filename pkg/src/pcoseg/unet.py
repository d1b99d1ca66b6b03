"""Symmetric encoder-decoder segmentation network and checkpoint container."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .groundtruth import PREDICTED, Mask

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointMismatchError(RuntimeError):
    """Checkpoint config or format does not match what the caller expects."""


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 64
    input_size: int = 128
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.input_size % (2**self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by 2^depth = {2 ** self.depth}"
            )

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Contracting path with doubled feature maps per pooling, expanding path
    with halved feature maps per up-convolution and skip concatenations, and a
    1x1 logistic head.  Same-padded convolutions keep output size == input size.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_channels()
        self.encoders = nn.ModuleList()
        ch = config.in_channels
        for w in widths:
            self.encoders.append(_double_conv(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.bottleneck = _double_conv(ch, ch * 2)
        ch = ch * 2
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.upconvs.append(nn.ConvTranspose2d(ch, w, kernel_size=2, stride=2))
            self.decoders.append(_double_conv(2 * w, w))
            ch = w
        self.head = nn.Conv2d(ch, 1, kernel_size=1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected NCHW input with {self.config.in_channels} channel(s)")
        if x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ValueError(
                f"expected {self.config.input_size}x{self.config.input_size} input, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x))


def build_unet(config: UNetConfig) -> UNet:
    return UNet(config)


def forward_probs(model: UNet, batch: np.ndarray) -> np.ndarray:
    """Run a [N,H,W] float batch through the model; returns [N,H,W] probabilities."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 2:
        batch = batch[None]
    x = torch.from_numpy(batch).unsqueeze(1)
    model.eval()
    with torch.no_grad():
        probs = model(x)
    return probs.squeeze(1).numpy()


def binarize(probs: np.ndarray, threshold: float = 0.5) -> Mask:
    """Threshold a probability map into a predicted mask (prob >= threshold)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    probs = np.asarray(probs)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("probability map has values outside [0, 1]")
    return Mask((probs >= threshold).astype(np.uint8), source=PREDICTED)


# ---------------------------------------------------------------------------
# checkpoint container: npz with a JSON meta record plus named parameter arrays


def save_checkpoint(path, model: UNet, extra_meta: dict | None = None):
    """Atomically write config + named parameters; extra_meta rides along."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays = {
        f"param/{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data["__meta__"]))


def load_checkpoint(path, expected_config: UNetConfig | None = None):
    """Rebuild the model from a checkpoint; returns (model, meta).

    Fails loudly when the stored format version or config does not match.
    """
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointMismatchError(
                f"checkpoint format {meta.get('format_version')} != "
                f"{CHECKPOINT_FORMAT_VERSION}"
            )
        config = UNetConfig(**meta["config"])
        if expected_config is not None and config != expected_config:
            raise CheckpointMismatchError(
                f"checkpoint config {config} does not match expected {expected_config}"
            )
        state = {
            name[len("param/") :]: torch.from_numpy(data[name])
            for name in data.files
            if name.startswith("param/")
        }
    model = UNet(config)
    model.load_state_dict(state)
    model.eval()
    return model, meta
