"""Synthetic MIND-format corpora with planted topic structure.

Every user prefers one or two topics; clicked candidates come from those
topics and skipped ones from the rest, so a content model can separate them.
Also writes matching GloVe / TransE / Wikidata fixture files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Entity, Impression, NewsRecord, write_behaviors_tsv, write_news_tsv

TOPICS = ["sports", "finance", "health", "travel", "science", "music", "weather", "autos"]
_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "r", "s", "x", "m", "l"]

US = {"id": "Q30", "label": "United States", "aliases": ["U.S.", "US", "USA", "United States of America"]}


@dataclass
class SyntheticCorpus:
    news: list
    impressions: list
    topic_of: dict  # news_id -> topic index
    words: list  # per-topic word lists
    entities: list  # Wikidata-style fixture entries
    entity_topic: dict  # qid -> topic index


def _pseudo_words(rng, n, taken, capital=False):
    out = []
    while len(out) < n:
        word = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.integers(2, 4)))
        word += rng.choice(_CODAS)
        if capital:
            word = word.capitalize()
        if word.lower() not in taken:
            taken.add(word.lower())
            out.append(word)
    return out


def make_corpus(
    n_news=100,
    n_impressions=200,
    n_topics=5,
    words_per_topic=20,
    entities_per_topic=6,
    n_users=None,
    title_len=(5, 9),
    entities_in_title=True,
    cold_fraction=0.05,
    seed=0,
) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    taken = set()
    words = [_pseudo_words(rng, words_per_topic, taken) for _ in range(n_topics)]
    entities, entity_topic, topic_entities = [US], {"Q30": -1}, []
    next_qid = 1000
    for t in range(n_topics):
        group = []
        for name in _pseudo_words(rng, entities_per_topic, taken, capital=True):
            ent = {"id": f"Q{next_qid}", "label": name, "aliases": [name.upper()]}
            next_qid += 1
            entities.append(ent)
            entity_topic[ent["id"]] = t
            group.append(ent)
        topic_entities.append(group)

    news, topic_of = [], {}
    cursor = [0] * n_topics  # cycle through words so every word is used
    for i in range(n_news):
        t = i % n_topics
        n_words = int(rng.integers(title_len[0], title_len[1] + 1))
        title_words = []
        for _ in range(n_words):
            title_words.append(words[t][cursor[t] % len(words[t])])
            cursor[t] += 1
        rng.shuffle(title_words)
        ents = []
        if entities_in_title:
            picks = rng.choice(len(topic_entities[t]), size=2, replace=False)
            ents = [topic_entities[t][j] for j in picks]
            title_words.insert(int(rng.integers(0, len(title_words) + 1)), ents[0]["label"])
            title_words.append(ents[1]["label"])
            if i % 7 == 0:
                title_words.insert(0, "U.S." if i % 14 == 0 else "United States")
                ents.append(US)
        else:
            ents = [topic_entities[t][int(rng.integers(len(topic_entities[t])))]]
        # MIND annotates only some entities; keep the first one.
        annotated = [Entity(ents[0]["label"], ents[0]["id"], 1.0)]
        news_id = f"N{i + 1}"
        abstract = " ".join(rng.choice(words[t], size=6))
        sub = f"{TOPICS[t % len(TOPICS)]}-{int(rng.integers(2))}"
        news.append(NewsRecord(news_id, TOPICS[t % len(TOPICS)], sub, " ".join(title_words), abstract, annotated))
        topic_of[news_id] = t

    by_topic = [[n.news_id for n in news if topic_of[n.news_id] == t] for t in range(n_topics)]
    n_users = n_users or max(1, n_impressions // 4)
    likes = [rng.choice(n_topics, size=int(rng.integers(1, 3)), replace=False).tolist() for _ in range(n_users)]
    histories = []
    for u in range(n_users):
        pool = [nid for t in likes[u] for nid in by_topic[t]]
        histories.append(rng.choice(pool, size=min(len(pool), int(rng.integers(3, 12))), replace=False).tolist())

    impressions = []
    for k in range(n_impressions):
        u = int(rng.integers(n_users))
        liked = set(likes[u])
        pos_pool = [nid for t in liked for nid in by_topic[t] if nid not in histories[u]] or [
            nid for t in liked for nid in by_topic[t]
        ]
        neg_pool = [nid for t in range(n_topics) if t not in liked for nid in by_topic[t]]
        n_pos = int(rng.integers(1, 3))
        n_neg = int(rng.integers(3, 10))
        cands = [(nid, 1) for nid in rng.choice(pos_pool, size=min(n_pos, len(pos_pool)), replace=False)]
        if neg_pool:
            cands += [(nid, 0) for nid in rng.choice(neg_pool, size=min(n_neg, len(neg_pool)), replace=False)]
        order = rng.permutation(len(cands))
        cands = [(str(cands[j][0]), cands[j][1]) for j in order]
        history = [] if rng.random() < cold_fraction else list(histories[u])
        minute = k % 60
        impressions.append(Impression(str(k + 1), f"U{u + 1}", f"11/{11 + k % 4}/2019 9:{minute:02d}:00 AM", history, cands))
    return SyntheticCorpus(news, impressions, topic_of, words, entities, entity_topic)


def topic_vectors(rng, n_topics, dim, spread=1.0):
    return rng.normal(0, spread, size=(n_topics, dim))


def write_glove(corpus: SyntheticCorpus, path, dim=50, coverage=0.9, seed=0):
    """GloVe-format text file: topic centroid + noise per word."""
    rng = np.random.default_rng(seed + 101)
    centroids = topic_vectors(rng, len(corpus.words), dim, 0.3)
    lines = []
    for t, group in enumerate(corpus.words):
        for w in group:
            if rng.random() < coverage:
                vec = centroids[t] + rng.normal(0, 0.1, dim)
                lines.append(w + " " + " ".join(f"{v:.5f}" for v in vec))
    for ent in corpus.entities:
        vec = rng.normal(0, 0.1, dim)
        lines.append(ent["label"].lower().split()[0] + " " + " ".join(f"{v:.5f}" for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_entity_vectors(corpus: SyntheticCorpus, path, dim=100, seed=0):
    """TransE-style ``.vec`` for the entities MIND itself annotated."""
    rng = np.random.default_rng(seed + 202)
    centroids = topic_vectors(rng, len(corpus.words) + 1, dim, 0.3)
    annotated = sorted({e.wikidata_id for n in corpus.news for e in n.title_entities}, key=lambda q: int(q[1:]))
    lines = []
    for qid in annotated:
        vec = centroids[corpus.entity_topic[qid]] + rng.normal(0, 0.1, dim)
        lines.append(qid + "\t" + "\t".join(f"{v:.6f}" for v in vec) + "\t")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_fixture(out_dir, n_news=100, n_impressions=200, word_dim=50, seed=0, **corpus_kwargs) -> dict:
    """Write news/behaviors/embeddings/wikidata fixture files; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(n_news=n_news, n_impressions=n_impressions, seed=seed, **corpus_kwargs)
    paths = {
        "news": out / "news.tsv",
        "behaviors": out / "behaviors.tsv",
        "glove": out / "glove.txt",
        "entity_vec": out / "entity_embedding.vec",
        "wikidata_fixture": out / "wikidata.json",
    }
    write_news_tsv(corpus.news, paths["news"])
    write_behaviors_tsv(corpus.impressions, paths["behaviors"])
    write_glove(corpus, paths["glove"], dim=word_dim, seed=seed)
    write_entity_vectors(corpus, paths["entity_vec"], seed=seed)
    with open(paths["wikidata_fixture"], "w", encoding="utf-8") as fh:
        json.dump({"entities": corpus.entities}, fh, indent=1)
    return {k: str(v) for k, v in paths.items()}
