"""Analytic per-frame compute and memory accounting.

Counts multiply-accumulates from configured shapes, never from timing:
linear layers as in*out, convolution taps as k*in*out per dilation branch
(k*channels when depthwise), LSTMs as 4*(in+hidden)*hidden per layer, FFTs
as (N/2)*log2(N) complex MACs scaled by 4 real MACs each, and mel/DCT
stages as dense matrix products.

The neural figure covers the turn-model inference path with each weight
matrix counted once per frame (the stack is shared by both speakers; the
accounting is weight-fetch bound, matching the deployment budget). The
feature figure covers the DSP front-end for both channels plus the
segmenter forward, which runs upstream of the turn model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .distill import StudentEncoder, TeacherCompressor
from .eot import NUM_CLASSES, NUM_HORIZONS, EotConfig
from .features import PITCH_WINDOW
from .segmenter.encoder import MsccConfig
from .segmenter.peeling import PeelConfig


def linear_macs(n_in: int, n_out: int) -> int:
    return n_in * n_out


def conv_branch_macs(kernel: int, channels_in: int, channels_out: int,
                     depthwise: bool) -> int:
    if depthwise:
        return kernel * channels_in
    return kernel * channels_in * channels_out


def lstm_macs(n_in: int, hidden: int, layers: int) -> int:
    total = 0
    for layer in range(layers):
        layer_in = n_in if layer == 0 else hidden
        total += 4 * (layer_in + hidden) * hidden
    return total


def fft_macs(n_fft: int, real_per_complex: int = 4) -> int:
    return int((n_fft / 2) * math.log2(n_fft)) * real_per_complex


def mscc_encoder_macs(cfg: MsccConfig) -> int:
    total = linear_macs(cfg.input_dim, cfg.proj_dim)
    per_block = sum(
        conv_branch_macs(cfg.kernel, cfg.proj_dim, cfg.proj_dim, cfg.depthwise)
        for _ in cfg.dilations
    ) + linear_macs(cfg.proj_dim * len(cfg.dilations), cfg.proj_dim)
    return total + cfg.num_blocks * per_block


def student_macs(student_cfg: dict) -> int:
    width = student_cfg["width"]
    total = linear_macs(20, width)
    per_block = sum(
        conv_branch_macs(student_cfg["kernel"], width, width, False)
        for _ in student_cfg["dilations"]
    ) + linear_macs(width * len(student_cfg["dilations"]), width)
    total += student_cfg["num_blocks"] * per_block
    total += linear_macs(width, 32)
    return total


@dataclass(frozen=True)
class AccountingConfig:
    """Shapes of the default system, the source of every count below."""

    mscc: MsccConfig = field(default_factory=MsccConfig)
    peel: PeelConfig = field(default_factory=PeelConfig)
    eot: EotConfig = field(default_factory=EotConfig)
    student: dict = field(default_factory=lambda: {
        "width": 64, "num_blocks": 3, "kernel": 3, "dilations": (1, 4)})
    teacher_hidden: tuple[int, int] = (512, 256)
    n_fft: int = 512
    n_mels: int = 64
    frame_window: int = 320
    pitch_window: int = PITCH_WINDOW
    pitch_lag_min: int = 40
    pitch_lag_max: int = 267


@dataclass
class ComplexityReport:
    macs_per_frame_features: int
    macs_per_frame_neural: int
    param_count: int
    activation_bytes: int
    breakdown: dict

    @property
    def macs_total(self) -> int:
        return self.macs_per_frame_features + self.macs_per_frame_neural

    def to_dict(self) -> dict:
        return {
            "macs_per_frame_features": self.macs_per_frame_features,
            "macs_per_frame_neural": self.macs_per_frame_neural,
            "macs_total": self.macs_total,
            "param_count": self.param_count,
            "activation_bytes": self.activation_bytes,
            "breakdown": self.breakdown,
        }


def _mfcc_chain_macs(cfg: AccountingConfig, dct_out: int) -> int:
    n_bins = cfg.n_fft // 2 + 1
    return (cfg.frame_window                 # analysis window multiply
            + fft_macs(cfg.n_fft)
            + n_bins                         # power spectrum
            + n_bins * cfg.n_mels            # mel filtering, dense product
            + cfg.n_mels * dct_out           # DCT as a matrix product
            + dct_out)                       # running CMN update


def _pitch_macs(cfg: AccountingConfig) -> int:
    total = 0
    for lag in range(cfg.pitch_lag_min, cfg.pitch_lag_max + 1):
        total += cfg.pitch_window - lag      # lagged inner product
    total += 2 * cfg.pitch_window            # energy cumsums
    total += 3 * (cfg.pitch_lag_max - cfg.pitch_lag_min + 1)  # normalization
    return total


def _segmenter_macs(cfg: AccountingConfig) -> int:
    total = mscc_encoder_macs(cfg.mscc)
    total += linear_macs(cfg.peel.dim, cfg.peel.dim)  # residual projection
    per_peel = (2 * linear_macs(cfg.peel.dim, cfg.peel.dim)
                + linear_macs(cfg.peel.dim, 1))
    total += cfg.peel.num_peels * per_peel
    total += cfg.peel.num_peels * 3 * cfg.peel.dim    # cosine + centroid update
    return total


def _neural_macs(cfg: AccountingConfig) -> dict:
    c = cfg.eot
    return {
        "student": student_macs(cfg.student),
        "fusion_mlp": linear_macs(c.fused_in, c.mlp_hidden)
                      + linear_macs(c.mlp_hidden, c.mlp_out),
        "lstm": lstm_macs(c.mlp_out, c.lstm_hidden, c.lstm_layers),
        "horizon0_head": linear_macs(c.lstm_hidden, NUM_CLASSES),
        "partner_adapter": linear_macs(c.compressed_dim, c.partner_adapted_dim),
        "future_head": linear_macs(c.future_head_in, c.future_head_out),
    }


def _param_counts(cfg: AccountingConfig) -> dict:
    """Parameter totals from configured shapes (biases included)."""
    import torch

    from .eot import EotModel
    from .segmenter.peeling import SegmenterModel

    with torch.no_grad():
        seg = SegmenterModel(cfg.mscc, cfg.peel)
        student = StudentEncoder(cfg.student["width"], cfg.student["num_blocks"],
                                 cfg.student["kernel"], cfg.student["dilations"])
        teacher = TeacherCompressor(cfg.teacher_hidden)
        eot = EotModel(cfg.eot)
    count = lambda m: sum(p.numel() for p in m.parameters())
    return {
        "segmenter": count(seg),
        "student": count(student),
        "teacher": count(teacher),
        "eot": count(eot),
    }


def _activation_bytes(cfg: AccountingConfig) -> int:
    """Steady-state streaming footprint, constant in stream length."""
    f32 = 4
    per_channel_samples = cfg.pitch_window + 160
    sample_rings = 2 * per_channel_samples * f32
    seg_window = cfg.mscc.receptive_field
    seg_ring = seg_window * cfg.mscc.input_dim * f32
    seg_acts = seg_window * cfg.mscc.proj_dim * (cfg.mscc.num_blocks + 2) * f32
    stu_window = 1 + cfg.student["num_blocks"] * (cfg.student["kernel"] - 1) \
        * max(cfg.student["dilations"])
    stu_ring = 2 * stu_window * 20 * f32
    stu_acts = 2 * stu_window * cfg.student["width"] * (cfg.student["num_blocks"] + 2) * f32
    lstm_state = 2 * cfg.eot.lstm_layers * 2 * cfg.eot.lstm_hidden * f32
    vote_ring = NUM_HORIZONS * 2 * NUM_HORIZONS * NUM_CLASSES * f32
    return (sample_rings + seg_ring + seg_acts + stu_ring + stu_acts
            + lstm_state + vote_ring)


def count_macs(cfg: AccountingConfig | None = None) -> ComplexityReport:
    """Assemble the per-frame compute budget for the configured system."""
    cfg = cfg or AccountingConfig()
    mfcc20 = _mfcc_chain_macs(cfg, 20)
    mfcc32 = _mfcc_chain_macs(cfg, 32)
    pitch = _pitch_macs(cfg)
    vad = cfg.frame_window + 5
    segmenter = _segmenter_macs(cfg)
    features_breakdown = {
        "mfcc20_two_channels": 2 * mfcc20,
        "mfcc32_user_channel": mfcc32,
        "pitch_two_channels": 2 * pitch,
        "vad_two_channels": 2 * vad,
        "segmenter": segmenter,
    }
    neural_breakdown = _neural_macs(cfg)
    params = _param_counts(cfg)
    report = ComplexityReport(
        macs_per_frame_features=sum(features_breakdown.values()),
        macs_per_frame_neural=sum(neural_breakdown.values()),
        param_count=sum(params.values()),
        activation_bytes=_activation_bytes(cfg),
        breakdown={
            "features": features_breakdown,
            "neural": neural_breakdown,
            "params": params,
        },
    )
    return report
