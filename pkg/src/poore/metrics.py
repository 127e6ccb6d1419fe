"""Rank-based OOD detection metrics.  IND is the positive class throughout."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError


def _split(scores, is_ood) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    if scores.shape != is_ood.shape or scores.ndim != 1:
        raise ValueError("scores and is_ood must be aligned vectors")
    ind, ood = scores[~is_ood], scores[is_ood]
    if ind.size == 0 or ood.size == 0:
        raise ConfigError("need at least one IND and one OOD score")
    return ind, ood


def auroc(scores, is_ood) -> float:
    """P(IND score > OOD score), ties counted one half (Mann-Whitney U)."""
    ind, ood = _split(scores, is_ood)
    ranks = rankdata(np.concatenate([ind, ood]))
    u = ranks[:ind.size].sum() - ind.size * (ind.size + 1) / 2
    return float(u / (ind.size * ood.size))


def fpr_at_recall(scores, is_ood, recall: float = 0.90) -> float:
    """Fraction of OOD scores at or above the largest threshold keeping ``recall`` of IND."""
    if not 0.0 < recall <= 1.0:
        raise ValueError("recall must lie in (0, 1]")
    ind, ood = _split(scores, is_ood)
    n = ind.size
    # smallest k with k/n >= recall, using the same float comparison as the definition
    k = min(n, max(1, int(np.ceil(recall * n))))
    while k > 1 and (k - 1) / n >= recall:
        k -= 1
    while k < n and k / n < recall:
        k += 1
    threshold = np.sort(ind)[::-1][k - 1]
    return float(np.mean(ood >= threshold))
