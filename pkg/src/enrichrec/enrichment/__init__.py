from .cache import EnrichmentCache
from .llm import HttpLlmClient, LlmClient, LlmError, MockLlmClient
from .pipeline import MODES, Enricher, EnrichmentStats, EntityCandidate
from .prompts import PROMPT_VERSION
from .wikidata import FixtureWikidataClient, LiveWikidataClient, WikidataError

__all__ = [
    "MODES",
    "PROMPT_VERSION",
    "Enricher",
    "EnrichmentCache",
    "EnrichmentStats",
    "EntityCandidate",
    "FixtureWikidataClient",
    "HttpLlmClient",
    "LiveWikidataClient",
    "LlmClient",
    "LlmError",
    "MockLlmClient",
    "WikidataError",
]
