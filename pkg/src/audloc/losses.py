"""Training objectives: rank-weighted contrastive losses between motion and
non-motion region features, intra-video map smoothness, and the supervised
frame-classification loss, composed into the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS_NORM = 1e-8  # clamp for vector norms in cosine similarity
EPS_LOG = 1e-6  # guard for the log singularities at similarity +-1


@dataclass(frozen=True)
class LossWeights:
    action: float = 1.0
    contrastive: float = 0.01
    temporal: float = 0.002
    ce: float = 1.0
    focal: float = 0.1
    rank_alpha: float = 1.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("action", "contrastive", "temporal", "ce", "focal", "rank_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def cosine(u: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Cosine similarity with norms clamped to EPS_NORM."""
    nu = torch.linalg.vector_norm(u).clamp_min(EPS_NORM)
    nw = torch.linalg.vector_norm(w).clamp_min(EPS_NORM)
    return (u * w).sum() / (nu * nw)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True).clamp_min(EPS_NORM)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True).clamp_min(EPS_NORM)
    return (a / na) @ (b / nb).T


def negative_contrast(f_motion: torch.Tensor, f_non: torch.Tensor) -> torch.Tensor:
    """Push motion-region vectors away from non-motion-region vectors.

    -(1/k^2) sum_pq log(1 - <F^m_p, F^n_q>), with the log argument clamped
    to [EPS_LOG, 1] so the loss is finite at similarity 1 and exactly zero
    for orthogonal or anti-aligned pairs.
    """
    if f_motion.shape[0] != f_non.shape[0]:
        raise ValueError("motion and non-motion sets must have equal size")
    sims = _cosine_matrix(f_motion, f_non)
    return -torch.log(torch.clamp(1.0 - sims, EPS_LOG, 1.0)).mean()


def _pair_similarities(feats: torch.Tensor) -> torch.Tensor:
    """Off-diagonal cosine similarities in fixed p-major pair order."""
    k = feats.shape[0]
    sims = _cosine_matrix(feats, feats)
    mask = ~torch.eye(k, dtype=torch.bool, device=feats.device)
    return sims[mask]  # row-major: (0,1), (0,2), ..., (1,0), ...


def rank_weights(similarities: torch.Tensor, alpha: float) -> torch.Tensor:
    """exp(-alpha * rank), rank 0 for the largest similarity; ties keep the
    fixed pair-index order for determinism."""
    order = torch.argsort(-similarities, stable=True)
    ranks = torch.empty_like(order)
    ranks[order] = torch.arange(order.numel(), device=order.device)
    return torch.exp(-alpha * ranks.to(similarities.dtype))


def positive_contrast(feats: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Pull same-region vectors together, penalizing low-similarity pairs
    more via descending-rank weights (weights are treated as constants)."""
    k = feats.shape[0]
    if k < 2:
        raise ValueError(f"positive contrast needs at least 2 vectors, got {k}")
    sims = _pair_similarities(feats)
    weights = rank_weights(sims.detach(), alpha)
    logs = torch.log(torch.clamp(sims, EPS_LOG, 1.0))
    return -(weights * logs).sum() / (k * (k - 1))


def contrastive_total(
    f_motion: torch.Tensor, f_non: torch.Tensor, alpha: float = 1.0
) -> torch.Tensor:
    """Negative contrast plus the two positive-contrast terms."""
    return (
        negative_contrast(f_motion, f_non)
        + positive_contrast(f_motion, alpha)
        + positive_contrast(f_non, alpha)
    )


def temporal_smoothness(maps: torch.Tensor) -> torch.Tensor:
    """Sum over i of the Frobenius norm of D_{i+2} + D_i - 2 D_{i+1}.

    maps: [k, H', W'] discriminative maps of consecutive frames of one
    video; zero for constant maps and for per-frame-linear ramps.
    """
    if maps.shape[0] < 3:
        raise ValueError(f"temporal smoothness needs >= 3 maps, got {maps.shape[0]}")
    second = maps[2:] + maps[:-2] - 2.0 * maps[1:-1]
    return torch.linalg.vector_norm(second.flatten(1), dim=1).sum()


def action_loss(
    probs: torch.Tensor, soft_targets: torch.Tensor, weights: LossWeights = LossWeights()
) -> torch.Tensor:
    """Supervised frame loss: soft-target cross-entropy plus focal loss.

    Cross-entropy uses the Gaussian-softened target pair (1-g, g); the
    focal term uses the hard binarized labels (g >= 0.5) with focusing
    parameter gamma. Both average over frames.
    """
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"probs must be [k, 2], got {tuple(probs.shape)}")
    if soft_targets.shape[0] != probs.shape[0]:
        raise ValueError("targets must align with probability rows")
    g = soft_targets
    logp = torch.log(torch.clamp(probs, 1e-12, 1.0))
    ce = -((1.0 - g) * logp[:, 0] + g * logp[:, 1]).mean()
    hard = (g >= 0.5).long()
    p_true = probs.gather(1, hard.unsqueeze(1)).squeeze(1)
    focal = -((1.0 - p_true) ** weights.focal_gamma * torch.log(torch.clamp(p_true, 1e-12, 1.0))).mean()
    return weights.ce * ce + weights.focal * focal


def total_loss(
    action: torch.Tensor,
    contrastive: torch.Tensor,
    temporal: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Weighted sum of the three objectives (defaults 1, 0.01, 0.002)."""
    return (
        weights.action * action
        + weights.contrastive * contrastive
        + weights.temporal * temporal
    )
