"""Hierarchical prompting: direct title -> entity exploration -> refined title."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..data import MAX_ENTITIES, MAX_TITLE_TOKENS, EnrichedNews, Entity, tokenize, truncate_text
from . import prompts
from .cache import EnrichmentCache
from .llm import LlmError
from .wikidata import QID, WikidataError, accept

log = logging.getLogger(__name__)

MODES = ("direct", "entity", "hierarchical")
SEARCH_VERSION = "wbsearchentities-v1"
SHARED = "*"  # news_id used for verification keys shared across articles

_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


@dataclass
class EntityCandidate:
    surface_name: str
    canonical_name: str | None = None
    wikidata_id: str | None = None

    def __post_init__(self):
        if self.wikidata_id is not None and not QID.match(self.wikidata_id):
            raise ValueError(f"not a Wikidata item id: {self.wikidata_id!r}")

    @property
    def verified(self):
        return self.wikidata_id is not None


@dataclass
class EnrichmentStats:
    client_calls: int = 0
    cache_hits: int = 0
    client_errors: int = 0
    fallbacks: dict = field(default_factory=lambda: {"direct": 0, "explore": 0, "refine": 0})
    wikidata_calls: int = 0
    verify_failures: int = 0
    dropped_entities: int = 0
    merged_aliases: int = 0

    def as_dict(self):
        return dict(self.__dict__, fallbacks=dict(self.fallbacks))


class Enricher:
    """Runs the enrichment steps for single articles or a whole corpus."""

    def __init__(
        self,
        client,
        wikidata,
        cache: EnrichmentCache | None = None,
        max_entities: int = MAX_ENTITIES,
        max_tokens: int = MAX_TITLE_TOKENS,
        retries: int = 3,
        temperature: float = 0.0,
        prompt_version: str = prompts.PROMPT_VERSION,
    ):
        self.client = client
        self.wikidata = wikidata
        self.cache = cache if cache is not None else EnrichmentCache()
        self.max_entities = max_entities
        self.max_tokens = max_tokens
        self.retries = retries
        self.temperature = temperature
        self.prompt_version = prompt_version
        self.stats = EnrichmentStats()

    # -- llm plumbing ---------------------------------------------------------

    def _ask(self, news_id, step, prompt, max_tokens):
        hit = self.cache.get(news_id, step, self.prompt_version)
        if hit is not None:
            self.stats.cache_hits += 1
            return hit
        for attempt in range(self.retries):
            self.stats.client_calls += 1
            try:
                text = self.client.complete(prompt, max_tokens=max_tokens, temperature=self.temperature)
            except LlmError as exc:
                self.stats.client_errors += 1
                log.debug("%s/%s attempt %d failed: %s", news_id, step, attempt + 1, exc)
                continue
            if text and text.strip():
                self.cache.put(news_id, step, self.prompt_version, text)
                return text
        return None

    def _title_from(self, raw):
        if raw is None:
            return None
        lines = [line.strip() for line in raw.strip().splitlines() if line.strip()]
        if not lines:
            return None
        title = truncate_text(lines[0], self.max_tokens)
        return title if tokenize(title) else None

    # -- steps ----------------------------------------------------------------

    def direct_prompt(self, news) -> str:
        """Step 1: a fresh candidate title; the original title on failure."""
        raw = self._ask(news.news_id, "direct", prompts.direct(news), max_tokens=2 * self.max_tokens)
        title = self._title_from(raw)
        if title is None:
            self.stats.fallbacks["direct"] += 1
            log.info("%s: direct prompt failed, keeping original title", news.news_id)
            return truncate_text(news.title, self.max_tokens)
        return title

    def explore_entities(self, news) -> list[EntityCandidate]:
        """Step 2: entity names proposed by the LLM, deduplicated case-insensitively."""
        raw = self._ask(news.news_id, "explore", prompts.explore(news, self.max_entities), max_tokens=256)
        if raw is None:
            self.stats.fallbacks["explore"] += 1
            return []
        seen, out = set(), []
        for line in raw.splitlines():
            name = _BULLET.sub("", line).strip()
            if not name or name.casefold() in seen:
                continue
            seen.add(name.casefold())
            out.append(EntityCandidate(name))
            if len(out) == self.max_entities:
                break
        return out

    def verify_entity(self, candidate: EntityCandidate) -> EntityCandidate:
        """Resolve a surface name to a Wikidata item; unverified on any failure."""
        step = f"verify:{candidate.surface_name}"
        cached = self.cache.get(SHARED, step, SEARCH_VERSION)
        if cached is None:
            self.stats.wikidata_calls += 1
            try:
                hits = self.wikidata.search(candidate.surface_name)
            except WikidataError as exc:
                self.stats.verify_failures += 1
                log.warning("verification of %r failed: %s", candidate.surface_name, exc)
                return EntityCandidate(candidate.surface_name)
            cached = json.dumps(hits, ensure_ascii=False)
            self.cache.put(SHARED, step, SEARCH_VERSION, cached)
        top = accept(candidate.surface_name, json.loads(cached))
        if top is None:
            return EntityCandidate(candidate.surface_name)
        return EntityCandidate(candidate.surface_name, top.get("label") or candidate.surface_name, top["id"])

    def verified_entities(self, candidates) -> list[Entity]:
        """Verify candidates, drop the unverifiable, merge aliases sharing a QID."""
        out, seen = [], set()
        for cand in candidates:
            res = self.verify_entity(cand)
            if not res.verified:
                self.stats.dropped_entities += 1
                continue
            if res.wikidata_id in seen:
                self.stats.merged_aliases += 1
                continue
            seen.add(res.wikidata_id)
            out.append(Entity(res.canonical_name, res.wikidata_id))
        return out

    def hierarchical_refine(self, candidate_title: str, entities, news) -> str:
        """Step 3: final title from candidate + verified entities, capped at max_tokens."""
        names = [e.name for e in entities]
        prompt = prompts.refine(news, candidate_title, names, self.max_tokens)
        title = self._title_from(self._ask(news.news_id, "refine", prompt, max_tokens=2 * self.max_tokens))
        if title is None:
            self.stats.fallbacks["refine"] += 1
            return truncate_text(candidate_title, self.max_tokens)
        return title

    # -- corpus ---------------------------------------------------------------

    def enrich_one(self, news, mode: str = "hierarchical") -> EnrichedNews:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        version = f"{self.prompt_version}/{mode}"
        candidate = self.direct_prompt(news)
        if mode == "direct":
            ents, seen = [], set()
            for e in news.title_entities:
                if e.wikidata_id and e.wikidata_id not in seen:
                    seen.add(e.wikidata_id)
                    ents.append(Entity(e.name, e.wikidata_id))
            return EnrichedNews(news.news_id, candidate, ents, version)
        ents = self.verified_entities(self.explore_entities(news))
        if mode == "entity":
            title = truncate_text(" ".join([candidate] + [e.name for e in ents]), self.max_tokens)
        else:
            title = self.hierarchical_refine(candidate, ents, news)
        return EnrichedNews(news.news_id, title, ents, version)

    def enrich_corpus(self, corpus, mode: str = "hierarchical", workers: int = 1) -> list[EnrichedNews]:
        """One :class:`EnrichedNews` per article, in input order.

        Resumable: anything already in the cache is not asked again.
        """
        if workers <= 1:
            return [self.enrich_one(n, mode) for n in corpus]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda n: self.enrich_one(n, mode), corpus))
