"""Iterative embedding peeling with soft quantization and stop signals.

From a residual representation r_0, repeatedly extract a gated embedding,
quantize it onto a 1/128 grid, and subtract it from the residual:

    h_i = tanh(embed(r_{i-1}))      g_i = sigmoid(gate(r_{i-1}))
    z_i = quantize(g_i * h_i)       s_i = sigmoid(stop(r_{i-1}))
    r_i = r_{i-1} - z_i

The subtraction telescopes: r_0 - z_1 - ... - z_K - r_K == 0 exactly when
evaluated in that order. Heads are shared across iterations. ``s_i`` is the
per-frame stop signal; at inference a peel takes part in clustering only if
no earlier stop fired (first i with s_i > 0.5 terminates the stack).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import MsccConfig, MsccEncoder

QUANT_LEVELS = 128


def soft_quant(x: torch.Tensor, levels: int = QUANT_LEVELS, mode: str = "infer") -> torch.Tensor:
    """Quantize onto the grid {m / levels : |m| <= levels}.

    ``infer`` returns the hard grid value round(clamp(x * levels)) / levels.
    ``train`` keeps that forward value but passes gradients through unchanged
    (straight-through estimator).
    """
    if levels != QUANT_LEVELS:
        raise ValueError(f"quantizer is fixed at {QUANT_LEVELS} levels")
    hard = torch.round(torch.clamp(x * levels, -levels, levels)) / levels
    if mode == "infer":
        return hard
    if mode == "train":
        return x + (hard - x).detach()
    raise ValueError(f"unknown soft_quant mode {mode!r}")


@dataclass(frozen=True)
class PeelConfig:
    dim: int = 128            # residual width; embeddings share it
    num_peels: int = 3
    quant_levels: int = QUANT_LEVELS

    def __post_init__(self):
        if self.num_peels < 1:
            raise ValueError("num_peels must be >= 1")


@dataclass
class PeelOutputs:
    """Peeling results: K embedding tracks, stop signals, and residuals."""

    r0: torch.Tensor       # [B, T, E] initial residual
    z: torch.Tensor        # [B, K, T, E] peel embeddings
    s: torch.Tensor        # [B, K, T] stop signals in [0, 1]
    r_final: torch.Tensor  # [B, T, E] residual after K peels


class PeelHeads(nn.Module):
    """Embedding / gate / stop heads shared across peel iterations."""

    def __init__(self, dim: int):
        super().__init__()
        self.embed = nn.Linear(dim, dim)
        self.gate = nn.Linear(dim, dim)
        self.stop = nn.Linear(dim, 1)


def peel_forward(r0: torch.Tensor, heads: PeelHeads, num_peels: int,
                 mode: str = "infer") -> PeelOutputs:
    """Run ``num_peels`` peeling iterations on the residual sequence r0."""
    if num_peels < 1:
        raise ValueError("num_peels must be >= 1")
    r = r0
    zs, ss = [], []
    for _ in range(num_peels):
        h = torch.tanh(heads.embed(r))
        g = torch.sigmoid(heads.gate(r))
        s = torch.sigmoid(heads.stop(r)).squeeze(-1)
        z = soft_quant(g * h, mode=mode)
        r = r - z
        zs.append(z)
        ss.append(s)
    return PeelOutputs(r0=r0, z=torch.stack(zs, dim=1), s=torch.stack(ss, dim=1),
                       r_final=r)


class SegmenterModel(nn.Module):
    """MSCC encoder + residual projection + peeling stack."""

    def __init__(self, encoder_cfg: MsccConfig | None = None,
                 peel_cfg: PeelConfig | None = None):
        super().__init__()
        self.encoder_cfg = encoder_cfg or MsccConfig()
        self.peel_cfg = peel_cfg or PeelConfig(dim=self.encoder_cfg.proj_dim)
        if self.peel_cfg.dim != self.encoder_cfg.proj_dim:
            raise ValueError("peel dim must match encoder projection width")
        self.encoder = MsccEncoder(self.encoder_cfg)
        self.residual_proj = nn.Linear(self.encoder_cfg.proj_dim, self.peel_cfg.dim)
        self.heads = PeelHeads(self.peel_cfg.dim)

    def forward(self, mfcc: torch.Tensor, mode: str = "infer") -> PeelOutputs:
        hidden = self.encoder(mfcc)
        r0 = self.residual_proj(hidden)
        return peel_forward(r0, self.heads, self.peel_cfg.num_peels, mode=mode)

    def active_peels(self, stops: torch.Tensor) -> torch.Tensor:
        """Boolean mask [..., K] of peels strictly before the first stop.

        The stop signal marks its own slot as empty, so the first index with
        s > 0.5 and everything after it are inactive.
        """
        stopped = stops > 0.5
        return torch.cumsum(stopped.to(torch.int32), dim=-1) == 0
