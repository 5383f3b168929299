"""Run configuration: a flat dataclass read from ``key = value`` files.

Values are parsed according to the field's declared type; ``#`` starts a
comment; an empty value clears an optional path. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .trainer import TrainConfig

PROVIDERS = ("mock", "http")
WIKIDATA_BACKENDS = ("fixture", "live")


@dataclass
class RunConfig(TrainConfig):
    run_dir: str = "runs/default"
    news: str = ""
    behaviors: str = ""
    dev_news: str = ""
    dev_behaviors: str = ""
    glove: str = ""
    entity_vec: str = ""
    enriched: str = ""  # defaults to <run_dir>/enriched.tsv
    cache: str = ""  # defaults to <run_dir>/enrich_cache.jsonl
    checkpoint_dir: str = ""  # defaults to <run_dir>/checkpoints
    llm_provider: str = "mock"
    llm_model: str = "gpt-3.5-turbo"
    llm_base_url: str = "https://api.openai.com/v1"
    llm_requests_per_minute: float = 60.0
    llm_seed: int = 0
    llm_fail_rate: float = 0.0
    llm_temperature: float = 0.0
    wikidata: str = "fixture"
    wikidata_fixture: str = ""
    wikidata_requests_per_minute: float = 120.0
    enrich_workers: int = 1

    def validate(self):
        super().validate()
        if self.llm_provider not in PROVIDERS:
            raise ConfigError(f"llm_provider must be one of {PROVIDERS}, got {self.llm_provider!r}")
        if self.wikidata not in WIKIDATA_BACKENDS:
            raise ConfigError(f"wikidata must be one of {WIKIDATA_BACKENDS}, got {self.wikidata!r}")
        if self.enrich_workers < 1:
            raise ConfigError("enrich_workers must be >= 1")

    # -- derived paths ---------------------------------------------------------

    def path(self, key) -> Path | None:
        value = getattr(self, key)
        defaults = {"enriched": "enriched.tsv", "cache": "enrich_cache.jsonl", "checkpoint_dir": "checkpoints"}
        if not value and key in defaults:
            return Path(self.run_dir) / defaults[key]
        return Path(value) if value else None

    def require(self, key) -> Path:
        """Path for ``key``; raises ConfigError naming the key if unset or missing."""
        p = self.path(key)
        if p is None:
            raise ConfigError(f"config key '{key}' is required but not set")
        if not p.exists():
            raise ConfigError(f"config key '{key}' points to missing file {p}")
        return p

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key '{key}'")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config_text(text: str, source="<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = _convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (raw strings or typed values)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, raw in (overrides or {}).items():
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_snapshot(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
