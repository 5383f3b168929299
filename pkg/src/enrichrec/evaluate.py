"""Scoring held-out impressions and summarising them with ranking metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import MAX_HISTORY, NewsFeatures, history_rows
from .metrics import MetricReport, report


@dataclass
class ImpressionScores:
    impression_id: str
    news_ids: list
    labels: np.ndarray
    scores: np.ndarray


def news_embedding_table(model, features: NewsFeatures, chunk=256) -> np.ndarray:
    """Inference-mode embedding of every article; row 0 stays zero."""
    table = np.zeros((len(features), model.config.news_dim), dtype=np.float32)
    rows = np.arange(1, len(features))
    for start in range(0, len(rows), chunk):
        part = rows[start : start + chunk]
        table[part] = model.encode_news(features, part).data
    return table


def score_impressions(model, features, impressions, max_history=MAX_HISTORY, table=None, chunk=128):
    """Score every candidate of every resolvable impression.

    Impressions naming a candidate missing from ``features`` are skipped.

    Returns:
        ``(list of ImpressionScores, n_unresolved)``.
    """
    if table is None:
        table = news_embedding_table(model, features)
    usable, unresolved = [], 0
    for imp in impressions:
        if all(n in features.row_of for n, _ in imp.candidates):
            usable.append(imp)
        else:
            unresolved += 1
    out = []
    for start in range(0, len(usable), chunk):
        part = usable[start : start + chunk]
        hist = [history_rows(imp, features, max_history) for imp in part]
        rows = np.stack([h[0] for h in hist])
        mask = np.stack([h[1] for h in hist])
        users = model.encode_user(Tensor(table[rows]), mask).data
        for imp, user in zip(part, users):
            ids = [n for n, _ in imp.candidates]
            cands = table[features.rows(ids)]
            scores = np.sum(cands.astype(np.float64) * user.astype(np.float64), axis=-1)
            out.append(ImpressionScores(imp.impression_id, ids, np.array(imp.labels, dtype=np.int64), scores))
    return out, unresolved


def oracle_scores(impressions):
    """Scores equal to the labels, for checking the metric plumbing."""
    return [
        ImpressionScores(imp.impression_id, [n for n, _ in imp.candidates], np.array(imp.labels),
                         np.array(imp.labels, dtype=np.float64))
        for imp in impressions
    ]


def evaluate(model, features, impressions, max_history=MAX_HISTORY, oracle=False):
    """Returns ``(MetricReport, list of ImpressionScores)``."""
    if oracle:
        scored, unresolved = oracle_scores(impressions), 0
    else:
        scored, unresolved = score_impressions(model, features, impressions, max_history)
    rep: MetricReport = report(((s.labels, s.scores) for s in scored), n_unresolved=unresolved)
    return rep, scored


def dump_predictions(scored, path):
    """One JSON line per impression: ids, labels and scores in candidate order."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in scored:
            fh.write(json.dumps({
                "impression_id": s.impression_id,
                "news_ids": s.news_ids,
                "labels": s.labels.tolist(),
                "scores": [float(v) for v in s.scores],
            }) + "\n")
