"""Training objectives for the segmenter.

Six losses combine during training: permutation-invariant BCE over peel
activities, a large-margin cosine classification loss, supervised
contrastive attraction, a VAD-masked triplet consistency between mixture
and clean embeddings, a peel-diversity penalty, and a Jensen-Shannon
consistency term across augmented views.
"""

from __future__ import annotations

import logging
from itertools import permutations

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

_BCE_EPS = 1e-7
MAX_PIT_SOURCES = 4


def pit_bce_loss(peel_activities: torch.Tensor, ref_masks: torch.Tensor
                 ) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant binary cross-entropy over peel activities.

    ``peel_activities`` [K, T] are probabilities, ``ref_masks`` [K, T] binary.
    Returns (min over all K! row assignments of the mean BCE, argmin
    permutation mapping peel row i -> reference row perm[i]).
    """
    if peel_activities.shape != ref_masks.shape:
        raise ValueError("predictions and reference masks must share [K, T]")
    k = peel_activities.shape[0]
    if k > MAX_PIT_SOURCES:
        raise ValueError(f"refusing factorial search over K={k} > {MAX_PIT_SOURCES}")
    p = peel_activities.clamp(_BCE_EPS, 1.0 - _BCE_EPS)
    m = ref_masks.to(p.dtype)
    # pairwise BCE of peel row i against reference row j, averaged over time
    per_pair = -(m[None, :, :] * torch.log(p[:, None, :])
                 + (1.0 - m[None, :, :]) * torch.log(1.0 - p[:, None, :])).mean(dim=2)
    best_loss, best_perm = None, None
    for perm in permutations(range(k)):
        loss = per_pair[range(k), list(perm)].mean()
        if best_loss is None or loss.item() < best_loss.item():
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


class CosFaceLoss(nn.Module):
    """Large-margin cosine loss over learned per-speaker weight directions."""

    def __init__(self, embed_dim: int, num_speakers: int,
                 margin: float = 0.35, scale: float = 30.0):
        super().__init__()
        self.margin = margin
        self.scale = scale
        self.weight = nn.Parameter(torch.empty(num_speakers, embed_dim))
        nn.init.xavier_normal_(self.weight)

    def forward(self, embeddings: torch.Tensor, speaker_ids: torch.Tensor) -> torch.Tensor:
        if torch.unique(speaker_ids).numel() < 2:
            raise ValueError("cosface needs at least two distinct speakers per batch")
        emb = F.normalize(embeddings, dim=-1)
        w = F.normalize(self.weight, dim=-1)
        cos = emb @ w.t()
        margins = torch.zeros_like(cos)
        margins.scatter_(1, speaker_ids.view(-1, 1), self.margin)
        return F.cross_entropy(self.scale * (cos - margins), speaker_ids)


def supcon_loss(embeddings: torch.Tensor, speaker_ids: torch.Tensor,
                temperature: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss on L2-normalized embeddings.

    Anchors without any positive are excluded from the mean.
    """
    n = embeddings.shape[0]
    emb = F.normalize(embeddings, dim=-1)
    sim = emb @ emb.t() / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=emb.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    pos = (speaker_ids.view(-1, 1) == speaker_ids.view(1, -1)) & ~self_mask
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    if not has_pos.any():
        raise ValueError("no anchor has a positive partner")
    masked_logprob = torch.where(pos, log_prob, torch.zeros_like(log_prob))
    mean_pos_logprob = masked_logprob.sum(dim=1)[has_pos] / n_pos[has_pos]
    return -mean_pos_logprob.mean()


def _cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine; rows with zero norm on either side give 0."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    denom = na * nb
    cos = (a * b).sum(dim=-1) / denom.clamp_min(1e-12)
    return torch.where(denom > 0, cos, torch.zeros_like(cos))


def triplet_consistency_loss(mix_peels: torch.Tensor, clean_refs: torch.Tensor,
                             negative_refs: torch.Tensor, vad_mask: torch.Tensor,
                             margin: float = 0.2) -> tuple[torch.Tensor, int]:
    """Hinge on cosine distances between mixture and clean embeddings.

    Per VAD-active frame: max(0, d(anchor, positive) - d(anchor, negative)
    + margin) with d = 1 - cos. Returns (loss, active frame count); the loss
    is 0 when no frame is active.
    """
    active = vad_mask.bool()
    count = int(active.sum().item())
    if count == 0:
        return mix_peels.sum() * 0.0, 0
    a, p, ng = mix_peels[active], clean_refs[active], negative_refs[active]
    d_pos = 1.0 - _cosine_rows(a, p)
    d_neg = 1.0 - _cosine_rows(a, ng)
    return torch.relu(d_pos - d_neg + margin).mean(), count


def peel_diversity_loss(peels: torch.Tensor) -> torch.Tensor:
    """Penalize cosine alignment between different peels.

    ``peels`` is [K, T, E]; the loss is the mean of max(0, cos(z_i, z_j))^2
    over frames and pairs i < j where both peels are nonzero.
    """
    k = peels.shape[0]
    if k < 2:
        raise ValueError("diversity needs at least two peels")
    terms, total = [], 0
    norms = peels.norm(dim=-1)
    for i in range(k):
        for j in range(i + 1, k):
            both = (norms[i] > 0) & (norms[j] > 0)
            if both.any():
                cos = _cosine_rows(peels[i][both], peels[j][both])
                terms.append(torch.relu(cos).square().sum())
                total += int(both.sum().item())
    if total == 0:
        return peels.sum() * 0.0
    return torch.stack([t for t in terms]).sum() / total


def js_consistency_loss(pred_clean: torch.Tensor, pred_aug1: torch.Tensor,
                        pred_aug2: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence of three per-frame distributions vs their mean.

    Inputs are [T, C] probability rows; rows that do not sum to 1 are
    renormalized defensively (logged). The result lies in [0, log 3].
    """
    preds = [pred_clean, pred_aug1, pred_aug2]
    fixed = 0
    normed = []
    for p in preds:
        p = p.clamp_min(0.0)
        sums = p.sum(dim=-1, keepdim=True)
        bad = (sums.squeeze(-1) - 1.0).abs() > 1e-4
        fixed += int(bad.sum().item())
        normed.append(p / sums.clamp_min(1e-12))
    if fixed:
        logger.warning("js_consistency_loss renormalized %d rows", fixed)
    mean = (normed[0] + normed[1] + normed[2]) / 3.0
    log_mean = torch.log(mean.clamp_min(1e-12))
    div = 0.0
    for p in normed:
        log_p = torch.log(p.clamp_min(1e-12))
        kl = torch.where(p > 0, p * (log_p - log_mean), torch.zeros_like(p)).sum(dim=-1)
        div = div + kl
    return (div / 3.0).mean()
