"""Wikidata entity search: live HTTP client, offline fixture, acceptance rule."""

from __future__ import annotations

import json
import re
import threading
import time
import unicodedata

from .llm import RateLimiter

API_URL = "https://www.wikidata.org/w/api.php"
QID = re.compile(r"^Q[0-9]+$")


class WikidataError(RuntimeError):
    pass


def normalize_name(name: str) -> str:
    """Case-fold, drop punctuation, collapse whitespace: 'U.S.' -> 'us'."""
    kept = "".join(ch for ch in name.lower() if not unicodedata.category(ch).startswith("P"))
    return " ".join(kept.split())


def hit_names(hit: dict) -> list[str]:
    names = [hit.get("label", "")]
    names.extend(hit.get("aliases", []) or [])
    match = hit.get("match") or {}
    if match.get("text"):
        names.append(match["text"])
    return [n for n in names if n]


def accept(surface: str, hits: list[dict]):
    """Top hit, if its label or an alias equals ``surface`` after normalisation."""
    if not hits:
        return None
    top = hits[0]
    target = normalize_name(surface)
    if not target or not QID.match(str(top.get("id", ""))):
        return None
    if any(normalize_name(n) == target for n in hit_names(top)):
        return top
    return None


class LiveWikidataClient:
    """``wbsearchentities`` over HTTPS with retries and a request-rate cap."""

    def __init__(self, requests_per_minute=120, retries=3, backoff=1.0, timeout=20.0, session=None, sleep=time.sleep):
        self.limiter = RateLimiter(requests_per_minute, sleep=sleep)
        self.retries, self.backoff, self.timeout = retries, backoff, timeout
        self._sleep = sleep
        self.calls = 0
        if session is None:
            import requests

            session = requests.Session()
            session.headers["User-Agent"] = "enrichrec/0.1 (entity verification for news enrichment)"
        self.session = session

    def search(self, name: str, limit: int = 5) -> list[dict]:
        params = {
            "action": "wbsearchentities",
            "format": "json",
            "language": "en",
            "type": "item",
            "limit": limit,
            "search": name,
        }
        last = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.wait()
            self.calls += 1
            try:
                resp = self.session.get(API_URL, params=params, timeout=self.timeout)
                if resp.status_code != 200:
                    last = WikidataError(f"HTTP {resp.status_code}")
                    continue
                return resp.json().get("search", [])
            except (OSError, ValueError) as exc:
                last = exc
        raise WikidataError(f"search for {name!r} failed: {last}")


class FixtureWikidataClient:
    """Offline search over a small entity table.

    Mimics ``wbsearchentities``: prefix match on labels and aliases, exact
    matches first, and an ``aliases``/``match`` block on each hit.
    """

    def __init__(self, entities):
        self.entities = list(entities)
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["entities"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"entities": self.entities}, fh, ensure_ascii=False, indent=1)

    def search(self, name: str, limit: int = 5) -> list[dict]:
        with self._lock:
            self.calls += 1
        query = normalize_name(name)
        if not query:
            return []
        ranked = []
        for ent in self.entities:
            best = None
            for kind, text in [("label", ent["label"])] + [("alias", a) for a in ent.get("aliases", [])]:
                norm = normalize_name(text)
                if not norm.startswith(query):
                    continue
                rank = (0 if norm == query else 1, 0 if kind == "label" else 1)
                if best is None or rank < best[0]:
                    best = (rank, kind, text)
            if best is not None:
                ranked.append((best[0], int(ent["id"][1:]), ent, best[1], best[2]))
        ranked.sort(key=lambda r: (r[0], r[1]))
        hits = []
        for _, _, ent, kind, text in ranked[:limit]:
            hit = {"id": ent["id"], "label": ent["label"], "match": {"type": kind, "language": "en", "text": text}}
            if kind == "alias":
                hit["aliases"] = [text]
            hits.append(hit)
        return hits
