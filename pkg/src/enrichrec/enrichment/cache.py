from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path

log = logging.getLogger(__name__)


class EnrichmentCache:
    """Append-only response store keyed by (news_id, step, prompt_version).

    Backed by a JSON-lines file when ``path`` is given. Writes from several
    threads are serialised; a repeated key keeps the last value, which is
    identical by construction.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["news_id"], rec["step"], rec["prompt_version"])
                except (ValueError, KeyError):
                    log.warning("%s:%d: skipping unreadable cache line", self.path, lineno)
                    continue
                self._data[key] = rec["value"]

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return tuple(key) in self._data

    def get(self, news_id, step, prompt_version):
        return self._data.get((news_id, step, prompt_version))

    def put(self, news_id, step, prompt_version, value):
        rec = {"news_id": news_id, "step": step, "prompt_version": prompt_version, "value": value, "timestamp": time.time()}
        with self._lock:
            self._data[(news_id, step, prompt_version)] = value
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
