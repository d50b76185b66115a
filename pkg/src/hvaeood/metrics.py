"""Threshold-free detection metrics over ID and OOD score sets.

Convention: in-distribution is the positive class and a higher score means
more in-distribution.  All metrics reduce to integer pair/threshold counting
followed by one division, so they are invariant under any strictly
increasing transform of the scores and admit exact brute-force oracles.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class MetricReport:
    """The four detection metrics plus their higher-is-better average."""

    auroc: float
    auprc: float
    fpr80: float
    fpr95: float
    normalized_mean: float
    n_id: int
    n_ood: int

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "fpr80": self.fpr80,
            "fpr95": self.fpr95,
            "normalized_mean": self.normalized_mean,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
        }


def _check(id_scores: Sequence[float], ood_scores: Sequence[float]) -> None:
    if len(id_scores) == 0 or len(ood_scores) == 0:
        raise ValueError("both score sets must be non-empty")


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Tie-aware pair statistic [#(id > ood) + 0.5 #(id == ood)] / (n m)."""
    _check(id_scores, ood_scores)
    ood_sorted = sorted(ood_scores)
    gt = 0
    eq = 0
    for s in id_scores:
        lo = bisect_left(ood_sorted, s)
        hi = bisect_right(ood_sorted, s)
        gt += lo
        eq += hi - lo
    return (2 * gt + eq) / (2 * len(id_scores) * len(ood_scores))


def _threshold_blocks(id_scores, ood_scores):
    """Unique scores descending with cumulative (tp, fp) counts at >= each."""
    id_sorted = sorted(id_scores, reverse=True)
    ood_sorted = sorted(ood_scores, reverse=True)
    values = sorted(set(id_scores) | set(ood_scores), reverse=True)
    blocks = []
    ti = to = 0
    for v in values:
        while ti < len(id_sorted) and id_sorted[ti] >= v:
            ti += 1
        while to < len(ood_sorted) and ood_sorted[to] >= v:
            to += 1
        blocks.append((v, ti, to))
    return blocks


def auprc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Average precision with tie blocks scored at block-end precision."""
    _check(id_scores, ood_scores)
    ap = 0.0
    prev_tp = 0
    for _, tp, fp in _threshold_blocks(id_scores, ood_scores):
        if tp > prev_tp:
            ap += (tp - prev_tp) * (tp / (tp + fp))
        prev_tp = tp
    return ap / len(id_scores)


def fpr_at_tpr(id_scores: Sequence[float], ood_scores: Sequence[float],
               tpr_level: float) -> float:
    """OOD fraction above the loosest threshold reaching the target ID recall.

    The threshold is the largest score t with #(id >= t)/n_id >= tpr_level,
    i.e. the ceil(level * n_id)-th largest ID score.
    """
    _check(id_scores, ood_scores)
    if not (0.0 < tpr_level <= 1.0):
        raise ValueError(f"tpr level must lie in (0, 1], got {tpr_level}")
    n = len(id_scores)
    need = math.ceil(tpr_level * n)
    t = sorted(id_scores, reverse=True)[need - 1]
    hits = sum(1 for s in ood_scores if s >= t)
    return hits / len(ood_scores)


def summary(id_scores: Sequence[float], ood_scores: Sequence[float]) -> MetricReport:
    """All four metrics plus normalized mean = mean(auroc, auprc, 1-fpr80, 1-fpr95)."""
    a = auroc(id_scores, ood_scores)
    p = auprc(id_scores, ood_scores)
    f80 = fpr_at_tpr(id_scores, ood_scores, 0.80)
    f95 = fpr_at_tpr(id_scores, ood_scores, 0.95)
    return MetricReport(
        auroc=a, auprc=p, fpr80=f80, fpr95=f95,
        normalized_mean=(a + p + (1.0 - f80) + (1.0 - f95)) / 4.0,
        n_id=len(id_scores), n_ood=len(ood_scores),
    )
