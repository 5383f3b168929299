"""Impression-level ranking metrics.

Rankings sort by descending score; equal scores keep their original
candidate order. Undefined cases (no positive, or a single class for AUC)
return ``None`` so callers can count them as skipped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InputError


def _prepare(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise InputError(f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    return (labels > 0).astype(np.int64), scores


def ranking(scores) -> np.ndarray:
    """Candidate indices best-first; ties broken by original position."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def auc(labels, scores):
    """Mann-Whitney AUC: share of (pos, neg) pairs ordered correctly, ties count half."""
    y, s = _prepare(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mrr(labels, scores):
    """Mean of 1/rank over every positive in the impression."""
    y, s = _prepare(labels, scores)
    if y.sum() == 0:
        return None
    ordered = y[ranking(s)]
    ranks = np.nonzero(ordered)[0] + 1
    return float(np.mean(1.0 / ranks))


def ndcg_at_k(labels, scores, k):
    """Binary-gain nDCG over the top ``k`` positions."""
    y, s = _prepare(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    top = y[ranking(s)][:k]
    dcg = float(np.sum(top * discounts[: len(top)]))
    idcg = float(np.sum(discounts[: min(n_pos, k)]))
    return dcg / idcg


@dataclass
class MetricReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_impressions: int
    n_skipped_auc: int = 0
    n_skipped_no_positive: int = 0
    n_skipped_unresolved: int = 0

    def as_dict(self):
        return asdict(self)


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def report(pairs, n_unresolved=0) -> MetricReport:
    """Unweighted means over impressions of per-impression metrics.

    ``pairs`` is an iterable of ``(labels, scores)``. Single-class impressions
    are left out of the AUC mean; impressions without a positive are left out
    of every mean.
    """
    aucs, mrrs, n5, n10 = [], [], [], []
    n = skipped_auc = skipped_pos = 0
    for labels, scores in pairs:
        n += 1
        a = auc(labels, scores)
        if a is None:
            skipped_auc += 1
        else:
            aucs.append(a)
        m = mrr(labels, scores)
        if m is None:
            skipped_pos += 1
            continue
        mrrs.append(m)
        n5.append(ndcg_at_k(labels, scores, 5))
        n10.append(ndcg_at_k(labels, scores, 10))
    return MetricReport(_mean(aucs), _mean(mrrs), _mean(n5), _mean(n10), n, skipped_auc, skipped_pos, n_unresolved)
