"""Attack success measures."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def image_loss(x_rec, x_orig) -> float:
    """Euclidean distance between a reconstruction and the true input."""
    a = np.asarray(x_rec, dtype=np.float64)
    b = np.asarray(x_orig, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def auc(scores, labels) -> float:
    """Area under the ROC curve in Mann-Whitney form; tied pairs count one half.

    Computed from average ranks: ``(R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg)``.
    The numerator is an integer or half-integer, so the result is exact for
    any realistic sample size.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
