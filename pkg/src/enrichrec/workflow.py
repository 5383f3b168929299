"""Pipeline steps behind the CLI verbs, usable directly from Python.

Layout under ``run_dir``::

    enriched.tsv, enrich_cache.jsonl      enrich
    preprocess/                           vocabularies, embeddings, features, examples
    checkpoints/best.ckpt (+ .json)       train
    train_log.jsonl                       train
    eval/metrics.json, predictions.jsonl  evaluate
    <verb>.resolved.cfg                   per-verb config snapshot
    manifest.json                         outputs of every verb with sha256
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, write_snapshot
from .data import (
    EmbeddingTable,
    ExampleStats,
    NewsFeatures,
    ParseStats,
    TrainingExample,
    build_index,
    build_news_features,
    build_vocabulary,
    load_entity_embeddings,
    load_word_embeddings,
    make_training_examples,
    news_title,
    parse_behaviors_tsv,
    parse_news_tsv,
    random_embeddings,
    read_enriched_tsv,
    vocab_hash,
    write_enriched_tsv,
)
from .enrichment import (
    Enricher,
    EnrichmentCache,
    FixtureWikidataClient,
    HttpLlmClient,
    LiveWikidataClient,
    MockLlmClient,
    PROMPT_VERSION,
)
from .errors import ConfigError, InputError
from .evaluate import dump_predictions, evaluate
from .model import ModelConfig, NewsRecModel
from .trainer import train

log = logging.getLogger(__name__)

# Keys whose values shape the preprocessed artifacts.
PREPROCESS_KEYS = (
    "news", "behaviors", "dev_news", "dev_behaviors", "glove", "entity_vec", "enriched", "seed", "k",
    "max_title_tokens", "max_history", "max_entities", "min_count", "entity_source", "prompting_mode",
    "use_enriched_title", "word_dim", "entity_dim",
)


class LockError(RuntimeError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def record(cfg: RunConfig, verb: str, outputs: dict) -> Path:
    """Write the verb's config snapshot and add it to the run manifest."""
    run_dir = Path(cfg.run_dir)
    snapshot = write_snapshot(cfg, run_dir / f"{verb}.resolved.cfg")
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"runs": []}
    entry = {"verb": verb, "time": time.strftime("%Y-%m-%dT%H:%M:%S"), "config": snapshot.name, "outputs": {}}
    for name, path in outputs.items():
        path = Path(path)
        if path.is_file():
            entry["outputs"][name] = {"path": os.path.relpath(path, run_dir), "sha256": _sha256(path)}
    manifest["runs"].append(entry)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return snapshot


@contextmanager
def directory_lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is locked by another command (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------- inputs


def _read_news(path):
    stats = ParseStats()
    news = parse_news_tsv(path, stats)
    if stats.rejected:
        log.warning("%s: %d malformed news rows skipped", path, stats.rejected)
    return news


def _read_behaviors(path):
    stats = ParseStats()
    imps = parse_behaviors_tsv(path, stats)
    if stats.rejected:
        log.warning("%s: %d malformed behavior rows skipped", path, stats.rejected)
    return imps


def all_news(cfg: RunConfig):
    """Train news plus dev news, deduplicated by id, train first."""
    news = _read_news(cfg.require("news"))
    if cfg.dev_news:
        seen = {n.news_id for n in news}
        news += [n for n in _read_news(cfg.require("dev_news")) if n.news_id not in seen]
    return news


def needs_enriched(cfg: RunConfig) -> bool:
    return cfg.use_enriched_title or cfg.entity_source != "original"


def load_enriched(cfg: RunConfig) -> dict:
    if not needs_enriched(cfg):
        return {}
    path = cfg.path("enriched")
    if not path.exists():
        raise ConfigError(f"config key 'enriched' points to missing file {path}; run 'enrich' first")
    enriched = read_enriched_tsv(path)
    want = f"{PROMPT_VERSION}/{cfg.prompting_mode}"
    stale = {e.prompt_version for e in enriched.values()} - {want}
    if stale:
        raise ConfigError(f"{path} was produced with {sorted(stale)} but prompting_mode asks for {want}")
    return enriched


def dev_inputs(cfg: RunConfig):
    """Dev impressions; without a dev set the train behaviors are reused."""
    if cfg.dev_behaviors:
        return _read_behaviors(cfg.require("dev_behaviors"))
    log.warning("no dev_behaviors configured; evaluating on the training impressions")
    return _read_behaviors(cfg.require("behaviors"))


# ---------------------------------------------------------------- enrich


def make_enricher(cfg: RunConfig, cache: EnrichmentCache) -> Enricher:
    if cfg.llm_provider == "mock":
        client = MockLlmClient(seed=cfg.llm_seed, fail_rate=cfg.llm_fail_rate)
    else:
        client = HttpLlmClient(cfg.llm_model, cfg.llm_base_url, requests_per_minute=cfg.llm_requests_per_minute)
    if cfg.wikidata == "fixture":
        wikidata = FixtureWikidataClient.from_file(cfg.require("wikidata_fixture"))
    else:
        wikidata = LiveWikidataClient(requests_per_minute=cfg.wikidata_requests_per_minute)
    return Enricher(client, wikidata, cache, max_entities=cfg.max_entities, max_tokens=cfg.max_title_tokens,
                    temperature=cfg.llm_temperature)


def run_enrich(cfg: RunConfig) -> dict:
    news = all_news(cfg)
    cache_path = cfg.path("cache")
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    enricher = make_enricher(cfg, EnrichmentCache(cache_path))
    items = enricher.enrich_corpus(news, cfg.prompting_mode, workers=cfg.enrich_workers)
    out = cfg.path("enriched")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_enriched_tsv(items, out)
    summary = {"articles": len(items), "enriched": str(out), **enricher.stats.as_dict()}
    record(cfg, "enrich", {"enriched": out, "cache": cache_path})
    return summary


# ---------------------------------------------------------------- preprocess


@dataclass
class Prepared:
    vocab: dict
    entity_index: dict
    category_index: dict
    words: EmbeddingTable
    entities: EmbeddingTable
    features: NewsFeatures
    examples: list
    example_stats: ExampleStats

    def vocabs(self):
        return {"words": self.vocab, "entities": self.entity_index, "categories": self.category_index}


def build_vocabs(cfg: RunConfig, train_news, news, enriched):
    titles = [news_title(n, enriched.get(n.news_id), cfg.use_enriched_title) for n in train_news]
    vocab = build_vocabulary(titles, cfg.min_count)
    qids = {e.wikidata_id for n in news for e in n.title_entities}
    qids |= {e.wikidata_id for item in enriched.values() for e in item.enriched_entities}
    entity_index = build_index(q for q in qids if q)
    category_index = build_index([n.category for n in news] + [n.subcategory for n in news])
    return vocab, entity_index, category_index


def features_for(cfg: RunConfig, news, enriched, vocabs) -> NewsFeatures:
    return build_news_features(
        news, vocabs["words"], vocabs["entities"], vocabs["categories"], enriched, cfg.entity_source,
        cfg.use_enriched_title, cfg.max_title_tokens, cfg.max_entities,
    )


def prepare(cfg: RunConfig) -> Prepared:
    """Everything training needs, built in memory from the configured files."""
    train_news = _read_news(cfg.require("news"))
    news = all_news(cfg)
    enriched = load_enriched(cfg)
    glove = cfg.require("glove")
    vocab, entity_index, category_index = build_vocabs(cfg, train_news, news, enriched)
    try:
        words = load_word_embeddings(glove, vocab, seed=cfg.seed, dim=cfg.word_dim)
    except InputError as exc:
        raise ConfigError(f"config key 'glove': {exc}") from exc
    if cfg.entity_vec:
        entities = load_entity_embeddings(cfg.require("entity_vec"), entity_index, seed=cfg.seed + 1, dim=cfg.entity_dim)
    else:
        entities = random_embeddings(entity_index, cfg.entity_dim, seed=cfg.seed + 1)
    features = features_for(cfg, news, enriched, {"words": vocab, "entities": entity_index, "categories": category_index})
    stats = ExampleStats()
    examples = list(make_training_examples(_read_behaviors(cfg.require("behaviors")), features, cfg.k, cfg.seed,
                                           cfg.max_history, stats))
    return Prepared(vocab, entity_index, category_index, words, entities, features, examples, stats)


def _prep_dir(cfg):
    return Path(cfg.run_dir) / "preprocess"


def _preprocess_key(cfg) -> dict:
    return {k: getattr(cfg, k) for k in PREPROCESS_KEYS}


def save_prepared(cfg: RunConfig, prep: Prepared) -> dict:
    d = _prep_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    paths = {name: d / f"{name}.json" for name in ("words", "entities", "categories")}
    for name, vocab in prep.vocabs().items():
        paths[name].write_text(json.dumps(sorted(vocab.items(), key=lambda kv: kv[1]), ensure_ascii=False))
    paths["word_emb"], paths["entity_emb"] = d / "word_emb.npy", d / "entity_emb.npy"
    np.save(paths["word_emb"], prep.words.matrix)
    np.save(paths["entity_emb"], prep.entities.matrix)
    paths["features"] = d / "features.npz"
    prep.features.save(paths["features"])
    paths["examples"] = d / "examples.npz"
    ex = prep.examples
    np.savez(
        paths["examples"],
        impression_id=np.array([e.impression_id for e in ex]),
        history=np.stack([e.history for e in ex]) if ex else np.zeros((0, cfg.max_history), np.int64),
        history_mask=np.stack([e.history_mask for e in ex]) if ex else np.zeros((0, cfg.max_history), bool),
        candidates=np.stack([e.candidates for e in ex]) if ex else np.zeros((0, cfg.k + 1), np.int64),
    )
    paths["meta"] = d / "meta.json"
    paths["meta"].write_text(json.dumps({
        "inputs": _preprocess_key(cfg),
        "vocab_hashes": {k: vocab_hash(v) for k, v in prep.vocabs().items()},
        "example_stats": asdict(prep.example_stats),
        "word_coverage": prep.words.coverage,
        "entity_coverage": prep.entities.coverage,
    }, indent=1))
    return paths


def load_prepared(cfg: RunConfig) -> Prepared:
    d = _prep_dir(cfg)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"no preprocessed data under {d}; run 'preprocess' first")
    meta = json.loads(meta_path.read_text())
    now = _preprocess_key(cfg)
    changed = sorted(k for k in now if meta["inputs"].get(k) != now[k])
    if changed:
        raise ConfigError(f"preprocessed data in {d} was built with different {changed}; rerun 'preprocess'")
    vocabs = {name: {k: i for k, i in json.loads((d / f"{name}.json").read_text())} for name in ("words", "entities", "categories")}
    words_m, ents_m = np.load(d / "word_emb.npy"), np.load(d / "entity_emb.npy")

    def table(id_map, m):
        mask = np.ones(len(m), bool)
        mask[0] = False
        return EmbeddingTable(id_map, m, mask)

    z = np.load(d / "examples.npz")
    examples = [
        TrainingExample(str(i), h, hm, c, 0)
        for i, h, hm, c in zip(z["impression_id"], z["history"], z["history_mask"], z["candidates"])
    ]
    return Prepared(vocabs["words"], vocabs["entities"], vocabs["categories"], table(vocabs["words"], words_m),
                    table(vocabs["entities"], ents_m), NewsFeatures.load(d / "features.npz"), examples,
                    ExampleStats(**meta["example_stats"]))


def run_preprocess(cfg: RunConfig) -> dict:
    prep = prepare(cfg)
    paths = save_prepared(cfg, prep)
    record(cfg, "preprocess", paths)
    return {
        "news": len(prep.features) - 1, "vocab": len(prep.vocab), "entities": len(prep.entity_index),
        "categories": len(prep.category_index), "word_coverage": round(prep.words.coverage, 4),
        **asdict(prep.example_stats),
    }


# ---------------------------------------------------------------- train / evaluate


def checkpoint_path(cfg: RunConfig) -> Path:
    return cfg.path("checkpoint_dir") / "best.ckpt"


def run_train(cfg: RunConfig):
    cfg.require("glove")
    prep = load_prepared(cfg)
    if not prep.examples:
        raise ConfigError("preprocessing produced no training examples")
    tcfg = cfg.train_config()
    model = NewsRecModel.create(tcfg.model_config(), prep.words, prep.entities, len(prep.category_index), seed=cfg.seed)
    dev_imps = dev_inputs(cfg)
    ckpt_dir = cfg.path("checkpoint_dir")
    log_path = Path(cfg.run_dir) / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    with directory_lock(ckpt_dir):
        result = train(tcfg, model, prep.features, prep.examples, dev_features=prep.features,
                       dev_impressions=dev_imps, out_dir=ckpt_dir, vocabs=prep.vocabs(), log_path=log_path)
    record(cfg, "train", {"checkpoint": checkpoint_path(cfg), "log": log_path})
    return result


def load_model(cfg: RunConfig, checkpoint=None):
    """Model and vocabularies from a checkpoint; refuses a vocab that differs from preprocessing."""
    path = Path(checkpoint) if checkpoint else checkpoint_path(cfg)
    expected = None
    meta_path = _prep_dir(cfg) / "meta.json"
    if meta_path.exists():
        expected = json.loads(meta_path.read_text())["vocab_hashes"]
    tensors, config, vocabs, _ = load_checkpoint(path, expected)
    model = NewsRecModel.from_state(ModelConfig(**config["model"]), tensors)
    return model, vocabs, config


def run_evaluate(cfg: RunConfig, checkpoint=None, oracle=False, dump=None):
    impressions = dev_inputs(cfg)
    if oracle:
        rep, scored = evaluate(None, None, impressions, oracle=True)
    else:
        model, vocabs, _ = load_model(cfg, checkpoint)
        features = features_for(cfg, all_news(cfg), load_enriched(cfg), vocabs)
        rep, scored = evaluate(model, features, impressions, cfg.max_history)
    out_dir = Path(cfg.run_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / ("metrics_oracle.json" if oracle else "metrics.json")
    metrics_path.write_text(json.dumps(rep.as_dict(), indent=1))
    outputs = {"metrics": metrics_path}
    if dump:
        dump_path = Path(dump) if isinstance(dump, (str, Path)) else out_dir / "predictions.jsonl"
        dump_predictions(scored, dump_path)
        outputs["predictions"] = dump_path
    record(cfg, "evaluate", outputs)
    return rep, scored


def run_predict(cfg: RunConfig, impression_id: str, checkpoint=None, oracle=False):
    impressions = [imp for imp in dev_inputs(cfg) if imp.impression_id == impression_id]
    if not impressions:
        raise InputError(f"impression id {impression_id!r} not found")
    if oracle:
        _, scored = evaluate(None, None, impressions, oracle=True)
    else:
        model, vocabs, _ = load_model(cfg, checkpoint)
        features = features_for(cfg, all_news(cfg), load_enriched(cfg), vocabs)
        _, scored = evaluate(model, features, impressions, cfg.max_history)
        if not scored:
            raise InputError(f"impression {impression_id!r} names news missing from the corpus")
    s = scored[0]
    order = np.argsort(-s.scores, kind="stable")
    return [{"news_id": s.news_ids[i], "score": float(s.scores[i]), "label": int(s.labels[i])} for i in order]
