"""Hierarchical end-of-turn model.

Per speaker, 23-D base features and a 32-D compressed representation fuse
through a 55->256->128 MLP into a 2-layer LSTM. A linear horizon-0 head
predicts the current 5-class state from self-features only; the future head
additionally sees the partner's compressed features (adapted 32->8) and the
self horizon-0 logits, emitting 3x5 logits for the next three frames. Both
speakers share all weights; outputs stack to [2, T, 4, 5].

Horizon-0 is structurally isolated from the partner channel: nothing on its
compute path reads the other speaker's inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_CLASSES = 5
NUM_HORIZONS = 4
LOOKAHEAD = NUM_HORIZONS - 1  # training truncation: labels exist up to t + 3


class TurnState(IntEnum):
    INITIAL = 0
    SPEECH = 1
    INTERIM = 2
    FINAL = 3
    BACKCHANNEL = 4


# vote tie-break, highest priority first
VOTE_PRIORITY = (TurnState.FINAL, TurnState.BACKCHANNEL, TurnState.SPEECH,
                 TurnState.INTERIM, TurnState.INITIAL)

DEFAULT_HORIZON_WEIGHTS = (1.0, 0.5, 0.25, 0.1)


@dataclass(frozen=True)
class EotConfig:
    base_dim: int = 23
    compressed_dim: int = 32
    mlp_hidden: int = 256
    mlp_out: int = 128
    lstm_layers: int = 2
    lstm_hidden: int = 128
    lstm_dropout: float = 0.1
    mlp_dropout: float = 0.1
    partner_adapted_dim: int = 8
    partner_dropout: float = 0.2

    @property
    def fused_in(self) -> int:
        return self.base_dim + self.compressed_dim

    @property
    def future_head_in(self) -> int:
        return self.lstm_hidden + self.partner_adapted_dim + NUM_CLASSES

    @property
    def future_head_out(self) -> int:
        return (NUM_HORIZONS - 1) * NUM_CLASSES


class EotModel(nn.Module):
    def __init__(self, cfg: EotConfig | None = None):
        super().__init__()
        self.cfg = cfg or EotConfig()
        c = self.cfg
        self.fusion_hidden = nn.Linear(c.fused_in, c.mlp_hidden)
        self.fusion_out = nn.Linear(c.mlp_hidden, c.mlp_out)
        self.fusion_dropout = nn.Dropout(c.mlp_dropout)
        self.lstm = nn.LSTM(c.mlp_out, c.lstm_hidden, num_layers=c.lstm_layers,
                            batch_first=True, dropout=c.lstm_dropout)
        self.h0_head = nn.Linear(c.lstm_hidden, NUM_CLASSES)
        self.partner_adapter = nn.Linear(c.compressed_dim, c.partner_adapted_dim)
        self.partner_dropout = nn.Dropout(c.partner_dropout)
        self.future_head = nn.Linear(c.future_head_in, c.future_head_out)

    # --- building blocks -------------------------------------------------

    def fuse_features(self, base: torch.Tensor, compressed: torch.Tensor) -> torch.Tensor:
        """[..., 23] + [..., 32] -> [..., 128] via the fusion MLP."""
        c = self.cfg
        if base.shape[-1] != c.base_dim or compressed.shape[-1] != c.compressed_dim:
            raise ValueError(
                f"expected trailing dims ({c.base_dim}, {c.compressed_dim}), got "
                f"({base.shape[-1]}, {compressed.shape[-1]})"
            )
        x = torch.cat([base, compressed], dim=-1)
        h = self.fusion_dropout(torch.relu(self.fusion_hidden(x)))
        return self.fusion_out(h)

    def lstm_forward(self, fused: torch.Tensor, state=None):
        """Run the recurrent core over [N, T, 128]; returns (out, state)."""
        return self.lstm(fused, state)

    def horizon0_head(self, lstm_out: torch.Tensor) -> torch.Tensor:
        """Immediate-state logits from self-features only."""
        return self.h0_head(lstm_out)

    def future_heads(self, lstm_out: torch.Tensor, partner_compressed: torch.Tensor,
                     h0_logits: torch.Tensor) -> torch.Tensor:
        """Logits for horizons t+1..t+3, shape [..., 3, 5].

        Concatenation order is fixed: self LSTM output (128), adapted partner
        features (8), self horizon-0 logits (5).
        """
        adapted = self.partner_dropout(self.partner_adapter(partner_compressed))
        x = torch.cat([lstm_out, adapted, h0_logits], dim=-1)
        out = self.future_head(x)
        return out.reshape(*out.shape[:-1], NUM_HORIZONS - 1, NUM_CLASSES)

    # --- whole-conversation forward --------------------------------------

    def forward_conversation(self, base: torch.Tensor, compressed: torch.Tensor,
                             training: bool = False) -> torch.Tensor:
        """Forward both speakers over a conversation.

        ``base`` is [B, 2, T, 23], ``compressed`` [B, 2, T, 32] (unbatched
        [2, T, *] also accepted). Output is [B, 2, T', 4, 5] with
        T' = T - 3 in training mode and T' = T otherwise.
        """
        squeeze = base.ndim == 3
        if squeeze:
            base, compressed = base[None], compressed[None]
        if base.shape[:3] != compressed.shape[:3]:
            raise ValueError("base and compressed sequences must align")
        b, s, t, _ = base.shape
        if s != 2:
            raise ValueError("expected exactly two speakers")
        fused = self.fuse_features(base, compressed)
        lstm_out, _ = self.lstm_forward(fused.reshape(b * s, t, -1))
        lstm_out = lstm_out.reshape(b, s, t, -1)
        h0 = self.horizon0_head(lstm_out)
        partner = compressed.flip(1)  # swap speaker axis
        fut = self.future_heads(lstm_out, partner, h0)
        logits = torch.cat([h0.unsqueeze(-2), fut], dim=-2)  # [B, 2, T, 4, 5]
        if training:
            if t <= LOOKAHEAD:
                raise ValueError(f"need more than {LOOKAHEAD} frames to train")
            logits = logits[:, :, : t - LOOKAHEAD]
        return logits[0] if squeeze else logits

    # --- streaming --------------------------------------------------------

    def init_stream(self, batch: int = 2) -> "StreamState":
        c = self.cfg
        h = torch.zeros(c.lstm_layers, batch, c.lstm_hidden)
        return StreamState(hidden=(h, h.clone()), ring=[])

    def step(self, base_t: torch.Tensor, compressed_t: torch.Tensor,
             state: "StreamState") -> tuple[torch.Tensor, "StreamState"]:
        """Advance one frame. ``base_t`` [2, 23], ``compressed_t`` [2, 32].

        Returns logits [2, 4, 5] for this frame and mutates the stream state
        (recurrent state plus the horizon ring used for vote decoding).
        """
        fused = self.fuse_features(base_t, compressed_t)  # [2, 128]
        out, hidden = self.lstm(fused.unsqueeze(1), state.hidden)
        state.hidden = hidden
        lstm_out = out[:, 0]
        h0 = self.horizon0_head(lstm_out)
        fut = self.future_heads(lstm_out, compressed_t.flip(0), h0)
        logits = torch.cat([h0.unsqueeze(1), fut], dim=1)  # [2, 4, 5]
        state.push(logits)
        return logits, state


@dataclass
class StreamState:
    """Streaming context: LSTM state and the last few frames of logits."""

    hidden: tuple[torch.Tensor, torch.Tensor]
    ring: list  # most recent last; holds up to NUM_HORIZONS entries of [2, 4, 5]

    def push(self, logits: torch.Tensor) -> None:
        self.ring.append(logits.detach())
        if len(self.ring) > NUM_HORIZONS:
            self.ring.pop(0)

    def votes_for_current_frame(self, speaker: int) -> list[torch.Tensor]:
        """Logit rows targeting the newest frame: h0 from t, h1 from t-1, ..."""
        votes = []
        n = len(self.ring)
        for h in range(min(n, NUM_HORIZONS)):
            votes.append(self.ring[n - 1 - h][speaker, h])
        return votes


# --- losses and decoding ---------------------------------------------------


def toeplitz_loss(logits: torch.Tensor, labels: torch.Tensor,
                  horizon_weights=DEFAULT_HORIZON_WEIGHTS,
                  class_weights=None) -> torch.Tensor:
    """Multi-horizon cross-entropy against shifted labels.

    ``logits`` is [B, 2, Tv, 4, 5] (or unbatched [2, Tv, 4, 5]); ``labels``
    is [B, 2, T] with T >= Tv + 3. Horizon h compares logits[..., h, :]
    against labels shifted left by h; per-horizon terms are weighted
    cross-entropies averaged over frames and speakers, then combined with
    the horizon weights.
    """
    if logits.ndim == 4:
        logits, labels = logits[None], labels[None]
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError("labels must lie in {0..4}")
    b, s, tv = logits.shape[:3]
    if labels.shape[2] < tv + LOOKAHEAD:
        raise ValueError("label track too short for the prediction lookahead")
    if class_weights is None:
        cw = torch.ones(NUM_CLASSES, dtype=logits.dtype, device=logits.device)
    else:
        cw = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    log_probs = F.log_softmax(logits, dim=-1)
    total = logits.sum() * 0.0
    for h, wh in enumerate(horizon_weights):
        target = labels[:, :, h: h + tv]
        lp = log_probs[:, :, :, h, :].gather(-1, target.unsqueeze(-1)).squeeze(-1)
        weights = cw[target]
        total = total + wh * (-(weights * lp).sum() / target.numel())
    return total


def majority_vote_decode(votes: list[torch.Tensor]) -> tuple[TurnState, np.ndarray]:
    """Majority vote over the available horizon predictions for one frame.

    ``votes`` holds one [5] logit vector per available horizon. Ties break
    by class priority Final > Backchannel > Speech > Interim > Initial.
    Returns (state, per-class vote share).
    """
    if not votes:
        raise ValueError("need at least one vote")
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for v in votes:
        counts[int(torch.argmax(v).item())] += 1
    best = counts.max()
    for cls in VOTE_PRIORITY:
        if counts[cls] == best:
            return cls, counts / counts.sum()
    raise AssertionError("unreachable")


def final_score(votes: list[torch.Tensor]) -> float:
    """Mean softmax probability of Final over the available horizon votes."""
    if not votes:
        raise ValueError("need at least one vote")
    probs = [float(F.softmax(v, dim=-1)[TurnState.FINAL].item()) for v in votes]
    return float(np.mean(probs))
