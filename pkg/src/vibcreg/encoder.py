"""Light-weight 1D ResNet backbone."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

# Shortest series the default stem + four stride-2 stages accept.
MIN_LENGTH = 8


class SeriesTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Channel plan of the residual encoder.

    The representation dimension is the channel count of the last stage.
    """

    in_channels: int = 1
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: int = 1
    kernel_size: int = 3
    stem_kernel_size: int = 7
    min_length: int = MIN_LENGTH

    def __post_init__(self) -> None:
        if self.kernel_size % 2 == 0 or self.stem_kernel_size % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    @property
    def representation_dim(self) -> int:
        return self.stage_channels[-1]


class BasicBlock1d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(in_ch, out_ch, kernel_size, stride=stride, padding=pad, bias=False)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, kernel_size, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm1d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm1d(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNet1d(nn.Module):
    """Stem conv + max-pool, residual stages with stride-2 entries, global average pool.

    Maps B x C x L to B x D with D = ``cfg.representation_dim``.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        first = cfg.stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv1d(cfg.in_channels, first, cfg.stem_kernel_size, stride=2,
                      padding=cfg.stem_kernel_size // 2, bias=False),
            nn.BatchNorm1d(first),
            nn.ReLU(inplace=True),
            nn.MaxPool1d(kernel_size=3, stride=2, padding=1),
        )
        blocks = []
        in_ch = first
        for out_ch in cfg.stage_channels:
            for i in range(cfg.blocks_per_stage):
                blocks.append(BasicBlock1d(in_ch, out_ch, cfg.kernel_size, stride=2 if i == 0 else 1))
                in_ch = out_ch
        self.stages = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool1d(1)

    @property
    def representation_dim(self) -> int:
        return self.cfg.representation_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] < self.cfg.min_length:
            raise SeriesTooShortError(
                f"series length {x.shape[-1]} is below the encoder minimum of {self.cfg.min_length}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        return self.pool(self.stages(self.stem(x))).flatten(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encode(encoder: nn.Module, x, batch_size: int = 512) -> Tensor:
    """Inference-mode representations of a SeriesBatch, array or tensor.

    Restores the module's previous train/eval mode afterwards.
    """
    values = x if isinstance(x, (Tensor, np.ndarray)) else x.values
    values = torch.as_tensor(values, dtype=next(encoder.parameters()).dtype)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            chunks = [encoder(values[i:i + batch_size]) for i in range(0, len(values), batch_size)]
    finally:
        encoder.train(was_training)
    return torch.cat(chunks) if chunks else torch.empty(0, encoder.representation_dim)
