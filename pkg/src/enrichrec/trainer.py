"""Mini-batch training with negative sampling, Adam and dev-AUC early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import ENTITY_SOURCES, MAX_ENTITIES, MAX_HISTORY, MAX_TITLE_TOKENS
from .enrichment import MODES
from .errors import ConfigError, TrainingDiverged
from .evaluate import evaluate
from .model import ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    k: int = 4
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    patience: int = 3
    max_title_tokens: int = MAX_TITLE_TOKENS
    max_history: int = MAX_HISTORY
    max_entities: int = MAX_ENTITIES
    min_count: int = 1
    entity_source: str = "enriched"
    prompting_mode: str = "hierarchical"
    use_enriched_title: bool = True
    # model dimensions
    word_dim: int = 300
    entity_dim: int = 100
    category_dim: int = 100
    news_dim: int = 400
    attention_dim: int = 200
    heads: int = 4
    window: int = 3
    use_subcategory: bool = False
    word_dropout: float = 0.0

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        for name in ("k", "batch_size", "epochs", "patience", "max_title_tokens", "max_history", "max_entities", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.entity_source not in ENTITY_SOURCES:
            raise ConfigError(f"entity_source must be one of {ENTITY_SOURCES}, got {self.entity_source!r}")
        if self.prompting_mode not in MODES:
            raise ConfigError(f"prompting_mode must be one of {MODES}, got {self.prompting_mode!r}")
        self.model_config().validate()


@dataclass
class TrainResult:
    epoch_losses: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)
    dev_reports: list = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float("-inf")
    best_checkpoint: str | None = None
    stopped_early: bool = False
    seconds: float = 0.0


def _batches(examples, batch_size, rng):
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]


def _dump_divergence(out_dir, epoch, step, batch, model):
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence_dump.json"
    norms = {n: float(np.linalg.norm(t.data)) for n, t in model.params.items()}
    path.write_text(json.dumps({
        "epoch": epoch, "step": step,
        "impression_ids": [e.impression_id for e in batch],
        "parameter_norms": norms,
    }, indent=1))
    return path


def train(
    config: TrainConfig,
    model,
    features,
    examples,
    dev_features=None,
    dev_impressions=None,
    out_dir=None,
    vocabs=None,
    log_path=None,
) -> TrainResult:
    """Fit ``model`` in place.

    Each epoch shuffles ``examples`` with a generator seeded by ``(seed, epoch)``.
    When dev impressions are given, the epoch with the best dev AUC is kept as
    ``best.ckpt`` under ``out_dir`` and training stops after ``patience``
    epochs without improvement. Without dev data the last epoch is saved.

    Raises:
        TrainingDiverged: a batch loss was not finite; a dump is written to
            ``out_dir`` first.
    """
    config.validate()
    if not examples:
        raise ConfigError("no training examples")
    examples = list(examples)
    params = model.parameters()
    state = ad.AdamState.create(params, lr=config.lr)
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    ckpt_cfg = {"model": model.config_dict(), "train": asdict(config)}
    t0 = time.perf_counter()
    stale = 0
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            losses = []
            for step, batch in enumerate(_batches(examples, config.batch_size, rng)):
                drop_rng = np.random.default_rng([config.seed, epoch, step, 1])
                try:
                    with ad.Tape() as tape:
                        loss = model.batch_loss(features, batch, training=True, rng=drop_rng)
                    value = loss.item()
                except FloatingPointError as exc:  # kernels refuse non-finite activations
                    tape, value = None, f"non-finite ({exc})"
                if tape is None or not math.isfinite(value):
                    dump = _dump_divergence(out_dir, epoch, step, batch, model)
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch} step {step}; dump: {dump}")
                grads = tape.gradient(loss, params)
                ad.adam_step(params, grads, state)
                losses.append(value)
            # Batches differ in size only at the tail; weight by example count.
            sizes = [len(b) for b in _batches(examples, config.batch_size, np.random.default_rng([config.seed, epoch]))]
            epoch_loss = float(np.average(losses, weights=sizes))
            result.epoch_losses.append(epoch_loss)
            result.batch_losses.extend(losses)
            entry = {"epoch": epoch, "loss": epoch_loss, "batches": len(losses), "seconds": time.perf_counter() - t0}

            improved = True
            if dev_impressions is not None:
                rep, _ = evaluate(model, dev_features or features, dev_impressions, config.max_history)
                result.dev_reports.append(rep)
                entry["dev"] = rep.as_dict()
                # Undefined dev AUC (no impression has both labels) keeps the latest epoch.
                improved = rep.auc is None or rep.auc > result.best_auc
            if improved:
                stale = 0
                result.best_epoch = epoch
                if result.dev_reports and result.dev_reports[-1].auc is not None:
                    result.best_auc = result.dev_reports[-1].auc
                if out_dir is not None:
                    ckpt = out_dir / "best.ckpt"
                    save_checkpoint(ckpt, model.state(), ckpt_cfg, vocabs or {}, extra={"epoch": epoch})
                    result.best_checkpoint = str(ckpt)
            else:
                stale += 1
            log.info("epoch %d loss %.4f%s", epoch, epoch_loss,
                     f" dev auc {entry['dev']['auc']:.4f}" if "dev" in entry else "")
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if stale >= config.patience:
                result.stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.perf_counter() - t0
    return result
