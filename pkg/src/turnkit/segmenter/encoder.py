"""Multi-scale causal convolution (MSCC) encoder.

A pointwise input projection followed by residual blocks. Each block runs
1-D convolutions at several dilations with left padding ``(k - 1) * d`` so
every output frame depends only on current and past inputs, then fuses the
branches with a 1x1 convolution, ReLU and dropout.

The segmenter uses depthwise branch convolutions (lightweight); the
distillation student reuses the same block with dense branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class MsccConfig:
    input_dim: int = 32
    proj_dim: int = 128
    num_blocks: int = 4
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 4)
    dropout: float = 0.1
    depthwise: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.num_blocks < 1:
            raise ValueError("kernel and num_blocks must be positive")
        if not self.dilations:
            raise ValueError("at least one dilation branch required")

    @property
    def receptive_field(self) -> int:
        """Frames of left context a single output frame can see."""
        return 1 + self.num_blocks * (self.kernel - 1) * max(self.dilations)


class CausalConv1d(nn.Module):
    """Conv1d with explicit left padding of (kernel - 1) * dilation zeros."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, dilation: int = 1,
                 depthwise: bool = False):
        super().__init__()
        groups = in_ch if depthwise else 1
        if depthwise and in_ch != out_ch:
            raise ValueError("depthwise branches require in_ch == out_ch")
        self.pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, dilation=dilation, groups=groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, C, T]
        return self.conv(F.pad(x, (self.pad, 0)))


class MsccBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilations: tuple[int, ...],
                 dropout: float = 0.0, depthwise: bool = True):
        super().__init__()
        self.branches = nn.ModuleList([
            CausalConv1d(channels, channels, kernel, d, depthwise=depthwise)
            for d in dilations
        ])
        self.fuse = nn.Conv1d(channels * len(dilations), channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, C, T]
        y = torch.cat([branch(x) for branch in self.branches], dim=1)
        y = self.dropout(torch.relu(self.fuse(y)))
        return x + y


class MsccEncoder(nn.Module):
    """Input projection + stacked MSCC blocks; [B, T, in] -> [B, T, proj]."""

    def __init__(self, cfg: MsccConfig | None = None):
        super().__init__()
        self.cfg = cfg or MsccConfig()
        self.input_proj = nn.Conv1d(self.cfg.input_dim, self.cfg.proj_dim, 1)
        self.blocks = nn.ModuleList([
            MsccBlock(self.cfg.proj_dim, self.cfg.kernel, self.cfg.dilations,
                      self.cfg.dropout, self.cfg.depthwise)
            for _ in range(self.cfg.num_blocks)
        ])

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 3 or frames.shape[-1] != self.cfg.input_dim:
            raise ValueError(
                f"expected [B, T, {self.cfg.input_dim}], got {tuple(frames.shape)}"
            )
        x = frames.transpose(1, 2)
        x = self.input_proj(x)
        for block in self.blocks:
            x = block(x)
        return x.transpose(1, 2)


def mscc_forward(encoder: MsccEncoder, frames: torch.Tensor) -> torch.Tensor:
    """Encode a feature sequence; output length equals input length."""
    return encoder(frames)
