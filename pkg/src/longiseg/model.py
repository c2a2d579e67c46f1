"""2D dense-block encoder-decoder backbone for per-slice segmentation.

The default preset follows the 56-layer fully convolutional DenseNet layout:
a 3x3 stem, five dense-block + transition-down stages, a bottleneck block,
five transition-up + dense-block stages with skip connections, and a 1x1
classifier head. Growth rate 12, four layers per dense block. The output
head applies a per-pixel softmax over the three classes so predictions are
valid probability maps; training minimizes mean squared error against the
one-hot ground truth with Adam (AMSGrad variant).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NUM_CLASSES, NUM_INPUT_CHANNELS

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    in_channels: int = NUM_INPUT_CHANNELS
    out_classes: int = NUM_CLASSES
    first_channels: int = 48
    growth_rate: int = 12
    layers_per_block: int = 4
    n_pool: int = 5
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.in_channels != NUM_INPUT_CHANNELS:
            raise ValueError(f"in_channels is fixed to {NUM_INPUT_CHANNELS}")
        if self.out_classes != NUM_CLASSES:
            raise ValueError(f"out_classes is fixed to {NUM_CLASSES}")

    @classmethod
    def fc_densenet56(cls, seed: int = 0) -> "BackboneConfig":
        return cls(seed=seed)

    @classmethod
    def tiny(cls, seed: int = 0) -> "BackboneConfig":
        """Two dense layers per block, one pooling stage; for small-scale checks."""
        return cls(
            first_channels=8,
            growth_rate=4,
            layers_per_block=2,
            n_pool=1,
            dropout=0.0,
            seed=seed,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    refine_probability: float = 0.5
    edit_cap: int = 20
    samples_per_epoch: int = 480
    val_slices_per_patient: int = 12
    zero_reference: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.refine_probability <= 1.0:
            raise ValueError("refine_probability must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class _DenseLayer(nn.Sequential):
    def __init__(self, in_ch, growth, dropout):
        layers = [
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, growth, 3, padding=1, bias=True),
        ]
        if dropout > 0:
            layers.append(nn.Dropout2d(dropout))
        super().__init__(*layers)


class _DenseBlock(nn.Module):
    """Dense block; ``keep_input=False`` returns only the newly grown features."""

    def __init__(self, in_ch, growth, n_layers, dropout, keep_input=True):
        super().__init__()
        self.keep_input = keep_input
        self.layers = nn.ModuleList(
            _DenseLayer(in_ch + i * growth, growth, dropout) for i in range(n_layers)
        )
        self.out_channels = (in_ch if keep_input else 0) + n_layers * growth

    def forward(self, x):
        features = [x]
        new = []
        for layer in self.layers:
            out = layer(torch.cat(features, 1) if len(features) > 1 else x)
            features.append(out)
            new.append(out)
        if self.keep_input:
            return torch.cat(features, 1)
        return torch.cat(new, 1)


class _TransitionDown(nn.Sequential):
    def __init__(self, channels, dropout):
        layers = [
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1, bias=True),
        ]
        if dropout > 0:
            layers.append(nn.Dropout2d(dropout))
        layers.append(nn.MaxPool2d(2))
        super().__init__(*layers)


class FCDenseNet(nn.Module):
    """Fully convolutional DenseNet emitting per-pixel class probabilities.

    Inputs whose spatial size is not a multiple of 2**n_pool are reflect-
    padded symmetrically and the output is cropped back, so output size
    always equals input size.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        g, n = cfg.growth_rate, cfg.layers_per_block
        self.stem = nn.Conv2d(cfg.in_channels, cfg.first_channels, 3, padding=1)

        ch = cfg.first_channels
        self.down_blocks = nn.ModuleList()
        self.down_transitions = nn.ModuleList()
        skip_channels = []
        for _ in range(cfg.n_pool):
            block = _DenseBlock(ch, g, n, cfg.dropout, keep_input=True)
            self.down_blocks.append(block)
            ch = block.out_channels
            skip_channels.append(ch)
            self.down_transitions.append(_TransitionDown(ch, cfg.dropout))

        self.bottleneck = _DenseBlock(ch, g, n, cfg.dropout, keep_input=False)
        new_ch = self.bottleneck.out_channels

        self.up_transitions = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in range(cfg.n_pool):
            self.up_transitions.append(
                nn.ConvTranspose2d(new_ch, new_ch, 3, stride=2, padding=1, output_padding=1)
            )
            last = i == cfg.n_pool - 1
            block = _DenseBlock(
                new_ch + skip_channels[-1 - i], g, n, cfg.dropout, keep_input=last
            )
            self.up_blocks.append(block)
            new_ch = block.out_channels

        self.head = nn.Conv2d(new_ch, cfg.out_classes, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input of shape (n, {self.cfg.in_channels}, h, w), "
                f"got {tuple(x.shape)}"
            )
        h, w = x.shape[2], x.shape[3]
        mult = 2**self.cfg.n_pool
        ph = (-h) % mult
        pw = (-w) % mult
        if ph or pw:
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="reflect")

        x = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.down_transitions):
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, block in zip(self.up_transitions, self.up_blocks):
            x = up(x)
            x = torch.cat([x, skips.pop()], 1)
            x = block(x)
        logits = self.head(x)
        if ph or pw:
            logits = logits[:, :, ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w]
        return torch.softmax(logits, dim=1)


def build_model(cfg: BackboneConfig) -> FCDenseNet:
    """Construct the backbone with reproducible initialization."""
    torch.manual_seed(cfg.seed)
    return FCDenseNet(cfg)


def mse_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over pixels and classes of (prob - onehot(label))^2."""
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ValueError(
            f"prediction shape {tuple(probs.shape)} does not match labels "
            f"{tuple(labels.shape)}"
        )
    onehot = F.one_hot(labels.long(), probs.shape[1]).permute(0, 3, 1, 2)
    return ((probs - onehot.to(probs.dtype)) ** 2).mean()


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, amsgrad=True)


def freeze_batchnorm(model) -> None:
    """Switch BatchNorm layers to running statistics, leaving dropout etc. in
    training mode. Refinement-pass batches have a different channel
    distribution than first-round batches; training them against the running
    statistics keeps the trained function identical to the inference one."""
    for module in model.modules():
        if isinstance(module, nn.BatchNorm2d):
            module.eval()


def training_step(
    model, optimizer, stacks: torch.Tensor, labels: torch.Tensor, bn_eval: bool = False
) -> float:
    """One gradient update; aborts on a non-finite loss."""
    model.train()
    if bn_eval:
        freeze_batchnorm(model)
    optimizer.zero_grad()
    probs = model(stacks)
    loss = mse_loss(probs, labels)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise RuntimeError(
            f"non-finite training loss {value}; "
            f"input range [{float(stacks.min()):.3g}, {float(stacks.max()):.3g}], "
            f"batch size {stacks.shape[0]}"
        )
    loss.backward()
    optimizer.step()
    return value


class TorchSliceModel:
    """Inference wrapper: numpy slice stacks in, numpy probabilities out."""

    def __init__(self, net: FCDenseNet, zero_reference: bool = False, batch_size: int = 16):
        self.net = net
        self.zero_reference = zero_reference
        self.batch_size = batch_size

    def predict_stacks(self, stacks: np.ndarray, context=None) -> np.ndarray:
        stacks = np.asarray(stacks, dtype=np.float32)
        if self.zero_reference:
            stacks = stacks.copy()
            stacks[:, 0:3] = 0.0
        self.net.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(stacks), self.batch_size):
                batch = torch.from_numpy(stacks[start : start + self.batch_size])
                outs.append(self.net(batch).numpy())
        return np.concatenate(outs, axis=0)


def save_checkpoint(path, net: FCDenseNet, train_cfg=None, epoch=None, val_dice=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": asdict(net.cfg),
        "state_dict": net.state_dict(),
        "train": asdict(train_cfg) if isinstance(train_cfg, TrainConfig) else train_cfg,
        "epoch": epoch,
        "val_dice": val_dice,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a checkpoint; returns (TorchSliceModel, metadata dict)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    cfg = BackboneConfig(**payload["backbone"])
    net = FCDenseNet(cfg)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    zero_ref = bool((payload.get("train") or {}).get("zero_reference", False))
    meta = {k: payload.get(k) for k in ("train", "epoch", "val_dice", "format_version")}
    return TorchSliceModel(net, zero_reference=zero_ref), meta
