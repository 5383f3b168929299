"""Independent numpy/loop oracles and tiny fixtures shared by the test modules."""

import math

import numpy as np

from enrichrec.data import (
    Entity,
    Impression,
    NewsRecord,
    build_index,
    build_news_features,
    build_vocabulary,
    random_embeddings,
)
from enrichrec.model import ModelConfig, NewsRecModel


def naive_conv(x, w, b):
    window, d_in, d_out = w.shape
    pad = (window - 1) // 2
    T = x.shape[0]
    out = np.zeros((T, d_out))
    for i in range(T):
        for o in range(d_out):
            acc = b[o]
            for k in range(window):
                j = i - pad + k
                if 0 <= j < T:
                    for c in range(d_in):
                        acc += x[j, c] * w[k, c, o]
            out[i, o] = max(acc, 0.0)
    return out


def naive_additive(x, W, b, q, mask=None):
    n = x.shape[0]
    mask = [True] * n if mask is None else list(mask)
    scores = []
    for i in range(n):
        s = 0.0
        for a in range(W.shape[0]):
            h = b[a] + sum(W[a, c] * x[i, c] for c in range(x.shape[1]))
            s += q[a] * math.tanh(h)
        scores.append(s)
    real = [i for i in range(n) if mask[i]]
    top = max(scores[i] for i in real)
    exps = {i: math.exp(scores[i] - top) for i in real}
    total = sum(exps.values())
    weights = [exps[i] / total if i in exps else 0.0 for i in range(n)]
    pooled = [sum(weights[i] * x[i, c] for i in range(n)) for c in range(x.shape[1])]
    return np.array(weights), np.array(pooled)


def naive_self_attention(x, wq, wk, wv, mask, heads=1):
    q, k, v = x @ wq, x @ wk, x @ wv
    n, d = v.shape
    dh = d // heads
    out = np.zeros((n, d))
    real = [j for j in range(n) if mask[j]]
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = {j: float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh) for j in real}
            top = max(s.values())
            e = {j: math.exp(s[j] - top) for j in real}
            z = sum(e.values())
            for j in real:
                out[i, sl] += e[j] / z * v[j, sl]
    return out


def tiny_config(**overrides):
    base = dict(word_dim=6, entity_dim=4, category_dim=3, news_dim=5, attention_dim=4, heads=2)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_world(seed=0, config=None, n_news=4, n_users=2):
    """A few articles, two users and a float-valued model small enough for finite differences."""
    rng = np.random.default_rng(seed)
    words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"]
    news = []
    for i in range(n_news):
        title = " ".join(rng.choice(words, size=int(rng.integers(2, 5))))
        ents = [Entity(f"E{j}", f"Q{j + 1}") for j in rng.choice(4, size=int(rng.integers(0, 3)), replace=False)]
        news.append(NewsRecord(f"N{i}", ["sport", "money"][i % 2], "sub", title, "", ents))
    vocab = build_vocabulary(n.title for n in news)
    ent_index = build_index(f"Q{j + 1}" for j in range(4))
    cat_index = build_index(["sport", "money", "sub"])
    feats = build_news_features(news, vocab, ent_index, cat_index, max_tokens=6, max_entities=3)
    config = config or tiny_config()
    model = NewsRecModel.create(
        config, random_embeddings(vocab, config.word_dim, seed), random_embeddings(ent_index, config.entity_dim, seed + 1),
        len(cat_index), seed=seed,
    )
    impressions = []
    for u in range(n_users):
        hist = [f"N{j}" for j in rng.choice(n_news, size=2, replace=False)]
        cands = [(f"N{j}", int(k == 0)) for k, j in enumerate(rng.permutation(n_news))]
        impressions.append(Impression(str(u), f"U{u}", "t", hist, cands))
    return news, feats, model, impressions
