"""ROC/AUC machinery and paired statistical comparisons.

AUC is the Mann-Whitney statistic (ties get half credit), the DeLong test
uses mid-rank placement values for the fast O(N log N) variance estimate,
and the Wilcoxon signed-rank test enumerates the exact null distribution up
to n = 20 paired differences (average ranks; doubled to stay integral), with
a tie-corrected normal approximation beyond.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata


@dataclass
class RocResult:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov_ab: float
    z: float
    p: float


@dataclass
class WilcoxonResult:
    w: float            # min(W+, W-)
    w_plus: float
    w_minus: float
    p: float
    n_used: int         # pairs remaining after dropping zero differences
    exact: bool


def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n_pos, n_neg


def roc_auc(scores, labels) -> RocResult:
    """ROC curve and AUC; AUC equals pair counting with 0.5 credit for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos, n_neg = _check_binary(labels)

    ranks = rankdata(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tp = np.cumsum(sorted_labels)[distinct]
    fp = np.cumsum(1 - sorted_labels)[distinct]
    thresholds = np.r_[np.inf, sorted_scores[distinct]]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocResult(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=float(auc))


def micro_average_roc(per_cutoff_scores, per_cutoff_labels) -> RocResult:
    """Pool (score, label) pairs across cutoffs into one binary problem.

    Cutoffs whose labels are single-class are excluded with a warning.
    """
    if len(per_cutoff_scores) != len(per_cutoff_labels):
        raise ValueError("need one label list per score list")
    pooled_scores, pooled_labels = [], []
    for i, (s, l) in enumerate(zip(per_cutoff_scores, per_cutoff_labels)):
        l = np.asarray(l)
        if l.size == 0 or (l == l.flat[0]).all():
            warnings.warn(f"cutoff {i} has a single class and is excluded from pooling")
            continue
        pooled_scores.append(np.asarray(s, dtype=float))
        pooled_labels.append(l)
    if not pooled_scores:
        raise ValueError("no cutoff with both classes present")
    return roc_auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))


def placement_values(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample placements: v10 over positives, v01 over negatives.

    v10[i] is the fraction of negatives scored below positive i (ties count
    one half); v01[j] symmetric. Computed from mid-ranks in O(N log N).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    both = np.r_[pos, neg]
    ranks_all = rankdata(both)
    v10 = (ranks_all[:n_pos] - rankdata(pos)) / n_neg
    v01 = 1.0 - (ranks_all[n_pos:] - rankdata(neg)) / n_pos
    return v10, v01


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    """Two-sided DeLong test for two correlated ROC curves on shared samples."""
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    labels = np.asarray(labels)
    if scores_a.shape != scores_b.shape or scores_a.shape != labels.shape:
        raise ValueError("scores_a, scores_b, and labels must share one length")
    n_pos, n_neg = _check_binary(labels)
    if n_pos < 2 or n_neg < 2:
        raise ValueError("DeLong variance needs at least two samples per class")

    v10 = np.stack([placement_values(s, labels)[0] for s in (scores_a, scores_b)])
    v01 = np.stack([placement_values(s, labels)[1] for s in (scores_a, scores_b)])
    aucs = v10.mean(axis=1)
    s10 = np.cov(v10)          # 2x2, ddof=1
    s01 = np.cov(v01)
    s = s10 / n_pos + s01 / n_neg
    var_diff = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])

    delta = float(aucs[0] - aucs[1])
    if var_diff <= 0:
        z = 0.0 if delta == 0.0 else np.sign(delta) * np.inf
        p = 1.0 if delta == 0.0 else 0.0
    else:
        z = delta / np.sqrt(var_diff)
        p = float(2.0 * (1.0 - norm.cdf(abs(z))))
    return DelongResult(auc_a=float(aucs[0]), auc_b=float(aucs[1]),
                        var_a=float(s[0, 0]), var_b=float(s[1, 1]),
                        cov_ab=float(s[0, 1]), z=float(z), p=p)


_EXACT_LIMIT = 20


def _exact_signed_rank_p(doubled_ranks: np.ndarray, doubled_w_plus: int) -> float:
    """Exact two-sided p by enumerating sign assignments via subset-sum counts.

    Ranks are doubled so average ranks from ties stay integral.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    n_assignments = 2.0 ** doubled_ranks.size
    p_low = counts[:doubled_w_plus + 1].sum() / n_assignments
    p_high = counts[doubled_w_plus:].sum() / n_assignments
    return min(1.0, 2.0 * min(p_low, p_high))


def wilcoxon_signed_rank(pairs, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired values.

    Zero differences are dropped; |differences| are ranked with average
    ranks. `method` is "auto" (exact up to 20 remaining pairs, then a
    tie-corrected normal approximation), "exact", or "approx".
    """
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (a, b) tuples")
    diffs = arr[:, 0] - arr[:, 1]
    diffs = diffs[diffs != 0]
    n = diffs.size
    if n == 0:
        warnings.warn("all paired differences are zero; p = 1")
        return WilcoxonResult(w=0.0, w_plus=0.0, w_minus=0.0, p=1.0, n_used=0, exact=True)

    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)

    if method == "exact" or (method == "auto" and n <= _EXACT_LIMIT):
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_signed_rank_p(doubled, int(round(2.0 * w_plus)))
        return WilcoxonResult(w=w, w_plus=w_plus, w_minus=w_minus, p=p, n_used=n, exact=True)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        warnings.warn("degenerate variance in normal approximation; p = 1")
        return WilcoxonResult(w=w, w_plus=w_plus, w_minus=w_minus, p=1.0, n_used=n, exact=False)
    z = (w_plus - mean) / np.sqrt(var)
    p = float(2.0 * (1.0 - norm.cdf(abs(z))))
    return WilcoxonResult(w=w, w_plus=w_plus, w_minus=w_minus, p=min(1.0, p),
                          n_used=n, exact=False)
