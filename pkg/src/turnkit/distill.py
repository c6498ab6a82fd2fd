"""Task-specific distillation of external 768-D speech features.

A small teacher network compresses ingested 768-D feature sequences to 32-D
(per speaker); a causal MFCC-based student learns to match it through an
L1 + L2 + cosine loss with detached targets. During training the turn model
consumes a cosine-scheduled mix of teacher and student features, ending at
pure student; inference always uses the student.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

from .containers import read_feature_dump, write_feature_dump
from .segmenter.encoder import MsccBlock

TEACHER_DIM = 768
COMPRESSED_DIM = 32
TEACHER_RATE_HZ = 50.0
FRAME_RATE_HZ = 100.0


class TeacherCompressor(nn.Module):
    """768 -> 32 MLP with a linear residual skip; layer norm after the skip."""

    def __init__(self, hidden: tuple[int, int] = (512, 256)):
        super().__init__()
        h1, h2 = hidden
        self.fc1 = nn.Linear(TEACHER_DIM, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, COMPRESSED_DIM)
        self.skip = nn.Linear(TEACHER_DIM, COMPRESSED_DIM)
        self.norm = nn.LayerNorm(COMPRESSED_DIM)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != TEACHER_DIM:
            raise ValueError(f"expected {TEACHER_DIM}-D teacher features, got {feats.shape[-1]}")
        y = self.fc3(torch.relu(self.fc2(torch.relu(self.fc1(feats)))))
        return self.norm(y + self.skip(feats))


class StudentEncoder(nn.Module):
    """Causal 20-D MFCC -> 32-D compressor shared across speakers.

    Three multiscale causal convolution blocks (dense branches, width 64)
    with residual connections, then a pointwise map to 32-D.
    """

    def __init__(self, width: int = 64, num_blocks: int = 3, kernel: int = 3,
                 dilations: tuple[int, ...] = (1, 4)):
        super().__init__()
        self.width = width
        self.kernel = kernel
        self.dilations = dilations
        self.num_blocks = num_blocks
        self.input_proj = nn.Conv1d(20, width, 1)
        self.blocks = nn.ModuleList([
            MsccBlock(width, kernel, dilations, dropout=0.0, depthwise=False)
            for _ in range(num_blocks)
        ])
        self.output_proj = nn.Conv1d(width, COMPRESSED_DIM, 1)

    @property
    def receptive_field(self) -> int:
        return 1 + self.num_blocks * (self.kernel - 1) * max(self.dilations)

    def forward(self, mfcc: torch.Tensor) -> torch.Tensor:
        if mfcc.shape[-1] != 20:
            raise ValueError(f"student expects 20-D MFCCs, got {mfcc.shape[-1]}")
        x = mfcc.transpose(-1, -2)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        x = self.input_proj(x)
        for block in self.blocks:
            x = block(x)
        x = self.output_proj(x)
        x = x.transpose(-1, -2)
        return x[0] if squeeze else x


@dataclass
class MixSchedule:
    """Cosine decay of the teacher fraction: 1 at step 0, 0 after warmup."""

    warmup_steps: int = 10_000
    step: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    def teacher_fraction(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        frac = min(max(s, 0) / self.warmup_steps, 1.0)
        return 0.5 * (1.0 + math.cos(math.pi * frac))

    def advance(self) -> None:
        self.step += 1


@dataclass(frozen=True)
class DistillLossWeights:
    l1: float = 0.5
    l2: float = 0.3
    cosine: float = 0.2


def distill_loss(student: torch.Tensor, teacher: torch.Tensor,
                 weights: DistillLossWeights = DistillLossWeights()) -> torch.Tensor:
    """Weighted L1 + L2 + (1 - cosine) match of student to detached teacher.

    Frames where either side has zero norm contribute the maximum cosine
    penalty of 1. No gradient reaches teacher parameters through this term.
    """
    if student.shape != teacher.shape:
        raise ValueError("student and teacher sequences must align")
    target = teacher.detach()
    diff = student - target
    l1 = diff.abs().mean()
    l2 = diff.square().mean()
    ns = student.norm(dim=-1)
    nt = target.norm(dim=-1)
    denom = ns * nt
    cos = (student * target).sum(dim=-1) / denom.clamp_min(1e-12)
    degenerate = denom == 0
    n_deg = int(degenerate.sum().item())
    if n_deg:
        logger.warning("distill_loss: %d zero-norm frames took the max cosine penalty", n_deg)
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    cos_term = (1.0 - cos).mean()
    return weights.l1 * l1 + weights.l2 * l2 + weights.cosine * cos_term


def mix_features(student: torch.Tensor, teacher: torch.Tensor,
                 schedule: MixSchedule, inference: bool = False) -> torch.Tensor:
    """Blend teacher and student features per the schedule.

    The inference path forces a pure student output.
    """
    if student.shape != teacher.shape:
        raise ValueError("student and teacher sequences must align")
    lam = 0.0 if inference else schedule.teacher_fraction()
    if lam == 0.0:
        return student
    return lam * teacher + (1.0 - lam) * student


def align_teacher_to_frames(feats: np.ndarray, num_frames: int,
                            teacher_rate: float = TEACHER_RATE_HZ,
                            frame_rate: float = FRAME_RATE_HZ) -> np.ndarray:
    """Repeat lower-rate teacher frames onto the 100 Hz grid (causal).

    Each teacher frame is repeated frame_rate / teacher_rate times; the tail
    is padded by repeating the last frame, and the result is cut to
    ``num_frames``.
    """
    repeat = int(round(frame_rate / teacher_rate))
    if repeat < 1:
        raise ValueError("teacher rate above frame rate is unsupported")
    if len(feats) == 0:
        return np.zeros((num_frames, feats.shape[1] if feats.ndim == 2 else TEACHER_DIM),
                        dtype=np.float32)
    up = np.repeat(feats, repeat, axis=0)
    if len(up) < num_frames:
        pad = np.repeat(up[-1:], num_frames - len(up), axis=0)
        up = np.concatenate([up, pad], axis=0)
    return up[:num_frames].astype(np.float32)


def write_teacher_features(path, feats: np.ndarray,
                           rate_hz: float = TEACHER_RATE_HZ) -> None:
    if feats.ndim != 2 or feats.shape[1] != TEACHER_DIM:
        raise ValueError(f"teacher features must be [T, {TEACHER_DIM}]")
    write_feature_dump(path, feats, fields="speech_encoder", rate_hz=rate_hz)


def read_teacher_features(path) -> tuple[np.ndarray, float]:
    data, meta = read_feature_dump(path)
    if data.shape[1] != TEACHER_DIM:
        raise ValueError(
            f"{path}: expected {TEACHER_DIM} columns, found {data.shape[1]}"
        )
    return data, meta["rate_hz"]
