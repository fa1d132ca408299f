"""Evaluation metrics: Recall, Precision, F1, NME, PME, MAE, OBO.

All metrics share one event matcher: a maximum-cardinality matching between
predicted and ground-truth frames under a +-window tolerance that, among
maximum matchings, minimizes the total frame distance (dynamic programming
over the two sorted lists; non-crossing matchings are optimal on a line).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class EventMatching:
    pairs: list[tuple[int, int]]  # (pred_frame, gt_frame)
    unmatched_pred: list[int]
    unmatched_gt: list[int]

    @property
    def total_distance(self) -> int:
        return sum(abs(p - g) for p, g in self.pairs)


@dataclass(frozen=True)
class MetricsReport:
    recall: float
    precision: float
    f1: float
    nme: float
    pme: float | None  # None when no video has a matched pair
    pme_zero_match_videos: int
    mae: float
    obo: float
    per_video: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "nme": self.nme,
            "pme": self.pme,
            "pme_zero_match_videos": self.pme_zero_match_videos,
            "mae": self.mae,
            "obo": self.obo,
            "per_video": self.per_video,
        }
        return json.dumps(doc, indent=2) + "\n"


def _check_sorted_unique(frames: list[int], name: str) -> None:
    for a, b in zip(frames, frames[1:]):
        if b <= a:
            raise ValueError(f"{name} event list must be strictly increasing, got {frames}")


def match_events(pred: list[int], gt: list[int], window: int = 2) -> EventMatching:
    """Optimal tolerance-window matching of two sorted event-frame lists."""
    pred = [int(p) for p in pred]
    gt = [int(g) for g in gt]
    _check_sorted_unique(pred, "pred")
    _check_sorted_unique(gt, "gt")
    n, m = len(pred), len(gt)
    # dp[i][j]: best (pairs, -distance) for pred[:i] vs gt[:j], maximizing
    # pair count and then minimizing total distance
    NEG = (-1, 0)
    dp = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    choice = [[0] * (m + 1) for _ in range(n + 1)]  # 1 skip pred, 2 skip gt, 3 match
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 and j == 0:
                continue
            best, how = NEG, 0
            if i > 0:
                cand = dp[i - 1][j]
                if cand > best:
                    best, how = cand, 1
            if j > 0:
                cand = dp[i][j - 1]
                if cand > best:
                    best, how = cand, 2
            if i > 0 and j > 0 and abs(pred[i - 1] - gt[j - 1]) <= window:
                pairs, negd = dp[i - 1][j - 1]
                cand = (pairs + 1, negd - abs(pred[i - 1] - gt[j - 1]))
                if cand > best:
                    best, how = cand, 3
            dp[i][j] = best
            choice[i][j] = how

    pairs: list[tuple[int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        how = choice[i][j]
        if how == 3:
            pairs.append((pred[i - 1], gt[j - 1]))
            i, j = i - 1, j - 1
        elif how == 1:
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    matched_pred = {p for p, _ in pairs}
    matched_gt = {g for _, g in pairs}
    return EventMatching(
        pairs=pairs,
        unmatched_pred=[p for p in pred if p not in matched_pred],
        unmatched_gt=[g for g in gt if g not in matched_gt],
    )


def frame_prf(matchings: list[EventMatching]) -> tuple[float, float, float]:
    """Recall, precision and F1 pooled over all videos' matchings.

    0/0 counts as 0 for precision and recall; F1 is 0 when P + R == 0.
    """
    tp = sum(len(m.pairs) for m in matchings)
    total_gt = sum(len(m.pairs) + len(m.unmatched_gt) for m in matchings)
    total_pred = sum(len(m.pairs) + len(m.unmatched_pred) for m in matchings)
    recall = tp / total_gt if total_gt else 0.0
    precision = tp / total_pred if total_pred else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return recall, precision, f1


def nme(pred_counts: list[int], gt_counts: list[int]) -> float:
    """Mean absolute difference of per-video event counts (unnormalized)."""
    if not pred_counts or len(pred_counts) != len(gt_counts):
        raise ValueError("need one predicted and one GT count per video, N >= 1")
    return sum(abs(c - g) for c, g in zip(pred_counts, gt_counts)) / len(pred_counts)


def pme(matchings: list[EventMatching]) -> tuple[float | None, int]:
    """Mean over videos of the mean matched-pair frame distance.

    Videos without any matched pair are excluded from the mean and returned
    separately as a zero-match count; when every video is zero-match the
    mean is undefined and reported as None.
    """
    per_video = []
    zero = 0
    for m in matchings:
        if m.pairs:
            per_video.append(m.total_distance / len(m.pairs))
        else:
            zero += 1
    if not per_video:
        return None, zero
    return sum(per_video) / len(per_video), zero


def mae_obo(pred_counts: list[int], gt_counts: list[int]) -> tuple[float, float]:
    """Counting metrics: |c - c_gt| / c_gt averaged over videos with at
    least one GT event, and the fraction of videos off by at most one."""
    if not pred_counts or len(pred_counts) != len(gt_counts):
        raise ValueError("need one predicted and one GT count per video, N >= 1")
    obo = sum(1 for c, g in zip(pred_counts, gt_counts) if abs(c - g) <= 1) / len(pred_counts)
    mae_terms = [abs(c - g) / g for c, g in zip(pred_counts, gt_counts) if g >= 1]
    mae = sum(mae_terms) / len(mae_terms) if mae_terms else 0.0
    return mae, obo


def compute_report(
    events: list[tuple[str, list[int], list[int]]], window: int = 2
) -> MetricsReport:
    """Full metric suite from per-video (id, predicted, GT) event lists."""
    matchings = []
    per_video = []
    pred_counts, gt_counts = [], []
    for vid, pred, gt in events:
        m = match_events(pred, gt, window)
        matchings.append(m)
        pred_counts.append(len(pred))
        gt_counts.append(len(gt))
        per_video.append(
            {
                "id": vid,
                "pred_events": list(pred),
                "gt_events": list(gt),
                "matched_pairs": [list(p) for p in m.pairs],
            }
        )
    recall, precision, f1 = frame_prf(matchings)
    pme_value, zero = pme(matchings)
    mae, obo = mae_obo(pred_counts, gt_counts)
    return MetricsReport(
        recall=recall,
        precision=precision,
        f1=f1,
        nme=nme(pred_counts, gt_counts),
        pme=pme_value,
        pme_zero_match_videos=zero,
        mae=mae,
        obo=obo,
        per_video=per_video,
    )
