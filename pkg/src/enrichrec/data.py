"""MIND-format readers, vocabularies, embedding loaders and example builders."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PAD, OOV = 0, 1
PAD_TOKEN, OOV_TOKEN = "<pad>", "<oov>"

MAX_TITLE_TOKENS = 40
MAX_HISTORY = 50
MAX_ENTITIES = 10

ENTITY_SOURCES = ("original", "enriched", "union")

csv.field_size_limit(1 << 27)


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class Entity:
    name: str
    wikidata_id: str
    confidence: float = 1.0


@dataclass
class NewsRecord:
    news_id: str
    category: str
    subcategory: str
    title: str
    abstract: str = ""
    title_entities: list = field(default_factory=list)
    url: str = ""
    abstract_entities: list = field(default_factory=list)


@dataclass
class EnrichedNews:
    news_id: str
    enriched_title: str
    enriched_entities: list = field(default_factory=list)
    prompt_version: str = ""


@dataclass
class Impression:
    impression_id: str
    user_id: str
    timestamp: str
    history: list
    candidates: list  # (news_id, label) pairs

    @property
    def labels(self):
        return [label for _, label in self.candidates]


@dataclass
class ParseStats:
    rows: int = 0
    rejected: int = 0
    bad_entities: int = 0


def _is_punct(ch):
    return unicodedata.category(ch).startswith("P")


def _strip_punct(token):
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = _strip_punct(raw)
        if tok:
            out.append(tok)
    return out


def truncate_text(text: str, max_tokens: int = MAX_TITLE_TOKENS) -> str:
    """Keep whitespace words until ``max_tokens`` real tokens have been seen."""
    kept, count = [], 0
    for word in text.split():
        n = len(tokenize(word))
        if count + n > max_tokens:
            break
        kept.append(word)
        count += n
    return " ".join(kept)


# ---------------------------------------------------------------- TSV io


def _parse_entities(cell, stats):
    cell = cell.strip()
    if not cell:
        return []
    try:
        raw = json.loads(cell)
        return [
            Entity(item.get("Label", ""), item["WikidataId"], float(item.get("Confidence", 1.0)))
            for item in raw
        ]
    except (ValueError, TypeError, KeyError, AttributeError):
        stats.bad_entities += 1
        return []


def _read_rows(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return fh.read().split("\n")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def parse_news_tsv(path, stats: ParseStats | None = None) -> list[NewsRecord]:
    """Read a MIND ``news.tsv``. Rows with the wrong column count are rejected."""
    stats = stats if stats is not None else ParseStats()
    records, seen = [], set()
    for line in _read_rows(path):
        line = line.rstrip("\r")
        if not line:
            continue
        stats.rows += 1
        cols = line.split("\t")
        if len(cols) != 8:
            stats.rejected += 1
            continue
        news_id, cat, subcat, title, abstract, url, t_ents, a_ents = cols
        if not title.strip() or news_id in seen:
            stats.rejected += 1
            continue
        seen.add(news_id)
        records.append(
            NewsRecord(
                news_id=news_id,
                category=cat,
                subcategory=subcat,
                title=title,
                abstract=abstract,
                title_entities=_parse_entities(t_ents, stats),
                url=url,
                abstract_entities=_parse_entities(a_ents, stats),
            )
        )
    if stats.rejected or stats.bad_entities:
        log.warning("%s: %d rows rejected, %d malformed entity cells", path, stats.rejected, stats.bad_entities)
    return records


def _entities_json(entities):
    return json.dumps(
        [{"Label": e.name, "WikidataId": e.wikidata_id, "Confidence": e.confidence} for e in entities],
        ensure_ascii=False,
    )


def write_news_tsv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for r in records:
            cols = [
                r.news_id, r.category, r.subcategory, r.title, r.abstract, r.url,
                _entities_json(r.title_entities), _entities_json(r.abstract_entities),
            ]
            fh.write("\t".join(cols) + "\n")


def parse_behaviors_tsv(path, stats: ParseStats | None = None) -> list[Impression]:
    """Read a MIND ``behaviors.tsv``; malformed candidate tokens reject the row."""
    stats = stats if stats is not None else ParseStats()
    out = []
    for line in _read_rows(path):
        line = line.rstrip("\r")
        if not line:
            continue
        stats.rows += 1
        cols = line.split("\t")
        if len(cols) != 5:
            stats.rejected += 1
            continue
        imp_id, user, ts, history, shown = cols
        candidates = []
        for tok in shown.split():
            news_id, sep, label = tok.rpartition("-")
            if not sep or not news_id or label not in ("0", "1"):
                candidates = None
                break
            candidates.append((news_id, int(label)))
        if not candidates:
            stats.rejected += 1
            continue
        out.append(Impression(imp_id, user, ts, history.split(), candidates))
    if stats.rejected:
        log.warning("%s: %d impressions rejected", path, stats.rejected)
    return out


def write_behaviors_tsv(impressions, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for imp in impressions:
            shown = " ".join(f"{n}-{label}" for n, label in imp.candidates)
            fh.write("\t".join([imp.impression_id, imp.user_id, imp.timestamp, " ".join(imp.history), shown]) + "\n")


ENRICHED_HEADER = ["NewsID", "EnrichedTitle", "EnrichedEntities", "PromptVersion"]


def write_enriched_tsv(items, path):
    """Model-agnostic enriched corpus: header + one row per article."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(ENRICHED_HEADER) + "\n")
        for item in items:
            ents = json.dumps(
                [{"name": e.name, "qid": e.wikidata_id} for e in item.enriched_entities], ensure_ascii=False
            )
            title = " ".join(item.enriched_title.split())
            fh.write("\t".join([item.news_id, title, ents, item.prompt_version]) + "\n")


def read_enriched_tsv(path) -> dict[str, EnrichedNews]:
    lines = [line.rstrip("\r") for line in _read_rows(path) if line.strip()]
    if not lines or lines[0].split("\t") != ENRICHED_HEADER:
        raise InputError(f"{path}: missing enriched-corpus header {ENRICHED_HEADER}")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
        try:
            ents = [Entity(e["name"], e["qid"]) for e in json.loads(cols[2])]
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad entity JSON") from exc
        out[cols[0]] = EnrichedNews(cols[0], cols[1], ents, cols[3])
    return out


# ---------------------------------------------------------------- vocabularies


def build_vocabulary(texts, min_count: int = 1) -> dict[str, int]:
    """Token -> row index, 0 = pad, 1 = OOV, then by count desc, token asc."""
    counts = Counter(tok for text in texts for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    vocab = {PAD_TOKEN: PAD, OOV_TOKEN: OOV}
    for tok in kept:
        vocab[tok] = len(vocab)
    return vocab


def build_index(keys, reserve_oov=True) -> dict[str, int]:
    """Sorted id map for entities or categories with pad (and OOV) reserved."""
    index = {PAD_TOKEN: PAD}
    if reserve_oov:
        index[OOV_TOKEN] = OOV
    for key in sorted(set(keys)):
        if key not in index:
            index[key] = len(index)
    return index


def vocab_hash(vocab: dict) -> str:
    ordered = sorted(vocab.items(), key=lambda kv: kv[1])
    return hashlib.sha256(json.dumps(ordered, ensure_ascii=False).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    id_map: dict
    matrix: np.ndarray
    trainable_mask: np.ndarray
    coverage: float = 0.0

    @property
    def dim(self):
        return self.matrix.shape[1]


def _random_table(id_map, dim, seed):
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.1, 0.1, size=(len(id_map), dim)).astype(np.float32)
    matrix[PAD] = 0.0
    mask = np.ones(len(id_map), dtype=bool)
    mask[PAD] = False
    return matrix, mask


def _load_vectors(path, id_map, seed, sep=None, expected_dim=None):
    vectors, dim = {}, None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read embeddings {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = [p for p in line.rstrip("\n").split(sep) if p != ""]
            if not parts:
                continue
            key, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if expected_dim is not None and dim != expected_dim:
                    raise InputError(f"{path}: vectors have dim {dim}, configured dim is {expected_dim}")
            elif len(values) != dim:
                raise InputError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            if key in id_map and key not in vectors:
                vectors[key] = np.asarray(values, dtype=np.float32)
    if dim is None:
        raise InputError(f"{path}: no vectors found")
    matrix, mask = _random_table(id_map, dim, seed)
    for key, vec in vectors.items():
        matrix[id_map[key]] = vec
    real = [k for k, i in id_map.items() if i != PAD and k != OOV_TOKEN]
    coverage = sum(k in vectors for k in real) / len(real) if real else 1.0
    return EmbeddingTable(dict(id_map), matrix, mask, coverage)


def load_word_embeddings(path, vocab, seed=0, dim=None) -> EmbeddingTable:
    """GloVe text vectors for ``vocab``; missing tokens get seeded uniform(-0.1, 0.1) rows."""
    table = _load_vectors(path, vocab, seed, expected_dim=dim)
    log.info("word embeddings: %d rows, dim %d, coverage %.3f", len(vocab), table.dim, table.coverage)
    return table


def load_entity_embeddings(path, entity_index, seed=1, dim=None) -> EmbeddingTable:
    """TransE ``.vec`` rows (tab separated) for known QIDs; new entities start random."""
    table = _load_vectors(path, entity_index, seed, sep="\t", expected_dim=dim)
    log.info("entity embeddings: %d rows, dim %d, coverage %.3f", len(entity_index), table.dim, table.coverage)
    return table


def random_embeddings(id_map, dim, seed=0) -> EmbeddingTable:
    matrix, mask = _random_table(id_map, dim, seed)
    return EmbeddingTable(dict(id_map), matrix, mask, 0.0)


# ---------------------------------------------------------------- news features


def news_entities(record, enriched, source="enriched"):
    """Entity list fed to the model for one article, deduplicated by QID."""
    if source not in ENTITY_SOURCES:
        raise InputError(f"entity_source must be one of {ENTITY_SOURCES}, got {source!r}")
    original = list(record.title_entities)
    if enriched is None:
        picked = original
    elif source == "original":
        picked = original
    elif source == "enriched":
        picked = list(enriched.enriched_entities)
    else:
        picked = list(enriched.enriched_entities) + original
    seen, out = set(), []
    for e in picked:
        if e.wikidata_id and e.wikidata_id not in seen:
            seen.add(e.wikidata_id)
            out.append(e)
    return out


def news_title(record, enriched, use_enriched=True):
    if use_enriched and enriched is not None:
        return enriched.enriched_title
    return record.title


@dataclass
class NewsFeatures:
    """Padded per-article inputs; row 0 is an all-padding pseudo article."""

    row_of: dict
    tokens: np.ndarray
    token_mask: np.ndarray
    entities: np.ndarray
    entity_mask: np.ndarray
    category: np.ndarray
    subcategory: np.ndarray

    def __len__(self):
        return len(self.row_of) + 1

    def rows(self, news_ids):
        return np.array([self.row_of[n] for n in news_ids], dtype=np.int64)

    def save(self, path):
        np.savez(
            path, news_ids=np.array(sorted(self.row_of, key=self.row_of.get)), tokens=self.tokens,
            token_mask=self.token_mask, entities=self.entities, entity_mask=self.entity_mask,
            category=self.category, subcategory=self.subcategory,
        )

    @classmethod
    def load(cls, path):
        z = np.load(path)
        row_of = {str(n): i + 1 for i, n in enumerate(z["news_ids"])}
        return cls(row_of, z["tokens"], z["token_mask"], z["entities"], z["entity_mask"], z["category"], z["subcategory"])


def build_news_features(
    corpus,
    vocab,
    entity_index,
    category_index,
    enriched=None,
    entity_source="enriched",
    use_enriched_title=True,
    max_tokens=MAX_TITLE_TOKENS,
    max_entities=MAX_ENTITIES,
) -> NewsFeatures:
    enriched = enriched or {}
    n = len(corpus) + 1
    tokens = np.zeros((n, max_tokens), dtype=np.int64)
    entities = np.zeros((n, max_entities), dtype=np.int64)
    category = np.zeros(n, dtype=np.int64)
    subcategory = np.zeros(n, dtype=np.int64)
    row_of = {}
    for row, rec in enumerate(corpus, start=1):
        row_of[rec.news_id] = row
        enr = enriched.get(rec.news_id)
        ids = [vocab.get(t, OOV) for t in tokenize(news_title(rec, enr, use_enriched_title))][:max_tokens]
        # An empty title still needs one real position for attention.
        tokens[row, : len(ids) or 1] = ids or [OOV]
        ents = [entity_index[e.wikidata_id] for e in news_entities(rec, enr, entity_source) if e.wikidata_id in entity_index]
        ents = ents[:max_entities]
        entities[row, : len(ents)] = ents
        category[row] = category_index.get(rec.category, OOV)
        subcategory[row] = category_index.get(rec.subcategory, OOV)
    return NewsFeatures(row_of, tokens, tokens != PAD, entities, entities != PAD, category, subcategory)


# ---------------------------------------------------------------- examples


@dataclass
class TrainingExample:
    """One positive click plus K sampled negatives.

    Histories and candidates are stored as rows into a :class:`NewsFeatures`
    table; :meth:`grids` materialises the padded token/entity grids.
    """

    impression_id: str
    history: np.ndarray
    history_mask: np.ndarray
    candidates: np.ndarray
    target_index: int = 0

    def grids(self, features: NewsFeatures):
        h, c = self.history, self.candidates
        return {
            "history_tokens": features.tokens[h],
            "history_token_mask": features.token_mask[h],
            "history_entities": features.entities[h],
            "history_entity_mask": features.entity_mask[h],
            "history_mask": self.history_mask,
            "candidate_tokens": features.tokens[c],
            "candidate_token_mask": features.token_mask[c],
            "candidate_entities": features.entities[c],
            "candidate_entity_mask": features.entity_mask[c],
        }


def impression_rng(seed, impression_id):
    """Per-impression generator, independent of how the input is sharded."""
    digest = hashlib.sha256(f"{seed}:{impression_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def history_rows(impression, features, max_history=MAX_HISTORY):
    known = [n for n in impression.history if n in features.row_of]
    dropped = len(impression.history) - len(known)
    known = known[-max_history:]
    rows = np.zeros(max_history, dtype=np.int64)
    rows[: len(known)] = features.rows(known)
    return rows, rows != 0, dropped


@dataclass
class ExampleStats:
    examples: int = 0
    cold_users: int = 0
    no_positive: int = 0
    no_negative: int = 0
    dropped_news: int = 0


def make_training_examples(impressions, features, k=4, seed=0, max_history=MAX_HISTORY, stats=None):
    """Yield one :class:`TrainingExample` per clicked candidate.

    Negatives come from the same impression's non-clicked candidates: without
    replacement when at least ``k`` exist, with replacement otherwise.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    stats = stats if stats is not None else ExampleStats()
    for imp in impressions:
        hist, hmask, dropped = history_rows(imp, features, max_history)
        stats.dropped_news += dropped
        if not hmask.any():
            stats.cold_users += 1
            continue
        shown = [(n, y) for n, y in imp.candidates if n in features.row_of]
        stats.dropped_news += len(imp.candidates) - len(shown)
        positives = [n for n, y in shown if y == 1]
        negatives = [n for n, y in shown if y == 0]
        if not positives:
            stats.no_positive += 1
            continue
        if not negatives:
            stats.no_negative += 1
            continue
        rng = impression_rng(seed, imp.impression_id)
        neg_rows = features.rows(negatives)
        for pos in positives:
            picked = rng.choice(neg_rows, size=k, replace=len(neg_rows) < k)
            cands = np.concatenate([[features.row_of[pos]], picked]).astype(np.int64)
            stats.examples += 1
            yield TrainingExample(imp.impression_id, hist, hmask, cands, 0)
