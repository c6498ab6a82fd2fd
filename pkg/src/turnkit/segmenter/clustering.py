"""Online clustering of the primary speaker centroid.

The centroid initializes on the first active frames of the stream (the
engaged user), then follows a momentum moving average over embeddings whose
cosine similarity exceeds the acceptance threshold. The centroid is
renormalized to unit length after every accepted update so the cosine
geometry stays stable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DECISION_PRIMARY = "primary"
DECISION_NON_PRIMARY = "non_primary"
DECISION_INACTIVE = "inactive"


@dataclass(frozen=True)
class ClusterConfig:
    cosine_threshold: float = 0.7
    momentum: float = 0.9
    init_frames: int = 30

    def __post_init__(self):
        if not 0.0 < self.cosine_threshold < 1.0:
            raise ValueError("cosine_threshold must lie in (0, 1)")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


@dataclass
class FrameDecision:
    frame: int
    rho: float
    decision: str
    peel_index: int  # -1 when no peel was selected


@dataclass
class PrimaryTrack:
    """Mutable per-stream clustering state."""

    centroid: np.ndarray | None = None
    init_buffer: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.centroid is not None

    def log(self, frame: int, rho: float, decision: str, peel_index: int = -1) -> None:
        self.decisions.append(FrameDecision(frame, float(rho), decision, peel_index))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _finalize_init(track: PrimaryTrack) -> None:
    mean = np.mean(np.stack(track.init_buffer), axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0:
        track.centroid = (mean / norm).astype(np.float32)
        track.init_buffer = []
    # an all-cancelling buffer keeps collecting frames


def cluster_step(z_t: np.ndarray, track: PrimaryTrack, cfg: ClusterConfig,
                 vad_t: int) -> str:
    """Advance the primary-speaker track by one frame.

    Returns the decision: ``inactive`` when VAD is 0, ``primary`` when the
    embedding matched (or is being used to initialize) the centroid, and
    ``non_primary`` otherwise. The centroid only moves on accepted frames.
    """
    z_t = np.asarray(z_t, dtype=np.float32)
    if not vad_t:
        return DECISION_INACTIVE
    if float(np.linalg.norm(z_t)) == 0.0:
        return DECISION_NON_PRIMARY
    if not track.initialized:
        track.init_buffer.append(z_t)
        if len(track.init_buffer) >= cfg.init_frames:
            _finalize_init(track)
        return DECISION_PRIMARY
    rho = _cosine(z_t, track.centroid)
    if rho > cfg.cosine_threshold:
        updated = cfg.momentum * track.centroid + (1.0 - cfg.momentum) * z_t
        norm = np.linalg.norm(updated)
        if norm > 0:
            track.centroid = (updated / norm).astype(np.float32)
        return DECISION_PRIMARY
    return DECISION_NON_PRIMARY


def select_primary_peel(z_frame: np.ndarray, track: PrimaryTrack, cfg: ClusterConfig,
                        vad_t: int = 1,
                        active: np.ndarray | None = None) -> tuple[int | None, float]:
    """Pick the peel closest to the centroid for one frame.

    ``z_frame`` is [K, E]; ``active`` optionally masks out stopped peels.
    Returns (index, best_rho); index is None when no active peel exceeds the
    threshold or the frame is inactive. Exact ties resolve to the lowest
    index.
    """
    if not track.initialized:
        raise ValueError("primary track not initialized")
    z_frame = np.asarray(z_frame, dtype=np.float32)
    if not vad_t:
        return None, 0.0
    k = z_frame.shape[0]
    mask = np.ones(k, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    rhos = np.full(k, -np.inf, dtype=np.float64)
    for i in range(k):
        if mask[i] and np.linalg.norm(z_frame[i]) > 0:
            rhos[i] = _cosine(z_frame[i], track.centroid)
    if not np.isfinite(rhos).any():
        return None, 0.0
    best = int(np.argmax(rhos))  # argmax returns the first (lowest) max index
    best_rho = float(rhos[best])
    if best_rho > cfg.cosine_threshold:
        return best, best_rho
    return None, best_rho


def write_decisions_csv(path, decisions: list) -> None:
    """Dump per-frame clustering decisions: frame_index, rho, decision, peel_index."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "rho", "decision", "peel_index"])
        for d in decisions:
            writer.writerow([d.frame, f"{d.rho:.6f}", d.decision, d.peel_index])
