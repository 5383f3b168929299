"""News encoder (title / entity / category views fused by attention), user
encoder and inner-product click scorer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdditiveAttentionParams, SelfAttentionParams, Tensor
from .data import EmbeddingTable, NewsFeatures
from .errors import ConfigError, InputError


@dataclass
class ModelConfig:
    word_dim: int = 300
    entity_dim: int = 100
    category_dim: int = 100
    news_dim: int = 400  # conv filter count and width of every view vector
    attention_dim: int = 200
    heads: int = 4
    window: int = 3
    use_subcategory: bool = False
    word_dropout: float = 0.0

    def validate(self):
        for name in ("word_dim", "entity_dim", "category_dim", "news_dim", "attention_dim", "heads", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.window % 2 == 0:
            raise ConfigError(f"window must be odd, got {self.window}")
        if self.entity_dim % self.heads:
            raise ConfigError(f"entity_dim {self.entity_dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.word_dropout < 1.0:
            raise ConfigError("word_dropout must be in [0, 1)")


def _table_tensor(name, matrix, trainable_mask=None):
    t = Tensor(matrix, requires_grad=True, name=name)
    mask = np.ones(matrix.shape[0], dtype=bool) if trainable_mask is None else np.asarray(trainable_mask, bool).copy()
    mask[0] = False
    t.trainable_rows = mask
    t.data[0] = 0.0
    return t


class NewsRecModel:
    """All trainable tensors live in :attr:`params`, keyed by a stable name."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        config.validate()
        self.config = config
        self.params = params
        c, p = config, params
        self.title_att = AdditiveAttentionParams(p["title_att.projection"], p["title_att.bias"], p["title_att.query"])
        self.entity_self = SelfAttentionParams(p["entity_self.query"], p["entity_self.key"], p["entity_self.value"])
        self.entity_att = AdditiveAttentionParams(p["entity_att.projection"], p["entity_att.bias"], p["entity_att.query"])
        self.view_att = AdditiveAttentionParams(p["view_att.projection"], p["view_att.bias"], p["view_att.query"])
        self.user_att = AdditiveAttentionParams(p["user_att.projection"], p["user_att.bias"], p["user_att.query"])
        if p["word_emb"].shape[1] != c.word_dim:
            raise ConfigError(f"word embeddings have dim {p['word_emb'].shape[1]}, config says {c.word_dim}")
        if p["entity_emb"].shape[1] != c.entity_dim:
            raise ConfigError(f"entity embeddings have dim {p['entity_emb'].shape[1]}, config says {c.entity_dim}")

    @classmethod
    def create(cls, config: ModelConfig, words: EmbeddingTable, entities: EmbeddingTable, n_categories: int, seed=0):
        config.validate()
        rng = np.random.default_rng(seed)
        c = config
        params = {
            "word_emb": _table_tensor("word_emb", words.matrix.copy(), words.trainable_mask),
            "entity_emb": _table_tensor("entity_emb", entities.matrix.copy(), entities.trainable_mask),
            "category_emb": _table_tensor(
                "category_emb", rng.uniform(-0.1, 0.1, (n_categories, c.category_dim)).astype(np.float32)
            ),
        }

        def dense(name, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True, name=name)
            params[name + "_bias"] = Tensor(np.zeros(fan_out), requires_grad=True, name=name + "_bias")

        limit = np.sqrt(6.0 / (c.window * c.word_dim + c.news_dim))
        params["conv.filters"] = Tensor(
            rng.uniform(-limit, limit, (c.window, c.word_dim, c.news_dim)), requires_grad=True, name="conv.filters"
        )
        params["conv.bias"] = Tensor(np.zeros(c.news_dim), requires_grad=True, name="conv.bias")
        for prefix, in_dim in (("title_att", c.news_dim), ("entity_att", c.entity_dim), ("view_att", c.news_dim), ("user_att", c.news_dim)):
            for key, t in AdditiveAttentionParams.create(in_dim, c.attention_dim, rng).tensors().items():
                params[f"{prefix}.{key}"] = t
        for key, t in SelfAttentionParams.create(c.entity_dim, c.entity_dim, rng).tensors().items():
            params[f"entity_self.{key}"] = t
        dense("entity_proj", c.entity_dim, c.news_dim)
        dense("category_proj", c.category_dim * (2 if c.use_subcategory else 1), c.news_dim)
        for name, t in params.items():
            t.name = name
        return cls(config, params)

    @classmethod
    def from_state(cls, config: ModelConfig, arrays: dict[str, np.ndarray]):
        """Rebuild a model from named arrays, e.g. a loaded checkpoint."""
        expected = set(cls.parameter_names(config))
        if set(arrays) != expected:
            missing, extra = sorted(expected - set(arrays)), sorted(set(arrays) - expected)
            raise ConfigError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
        params = {}
        for name in cls.parameter_names(config):
            arr = np.array(arrays[name], dtype=np.float32)
            if name.endswith("_emb"):
                params[name] = _table_tensor(name, arr)
            else:
                params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, params)

    @staticmethod
    def parameter_names(config: ModelConfig):
        names = ["word_emb", "entity_emb", "category_emb", "conv.filters", "conv.bias"]
        for prefix in ("title_att", "entity_att", "view_att", "user_att"):
            names += [f"{prefix}.projection", f"{prefix}.bias", f"{prefix}.query"]
        names += ["entity_self.query", "entity_self.key", "entity_self.value"]
        names += ["entity_proj", "entity_proj_bias", "category_proj", "category_proj_bias"]
        return names

    def state(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data for name in self.parameter_names(self.config)}

    def parameters(self):
        return list(self.params.values())

    # -- views ----------------------------------------------------------------

    def encode_title_view(self, token_ids, mask, training=False, rng=None) -> Tensor:
        """(N, T) token ids -> (N, news_dim): embed, convolve, attention-pool."""
        token_ids = np.asarray(token_ids)
        mask = np.asarray(mask, dtype=bool)
        emb = ad.embed_lookup(self.params["word_emb"], token_ids)
        if training and self.config.word_dropout > 0:
            emb = ad.dropout(emb, self.config.word_dropout, rng)
        ctx = ad.conv1d(emb, self.params["conv.filters"], self.params["conv.bias"], self.config.window)
        _, pooled = ad.additive_attention(ctx, self.title_att, mask)
        return pooled

    def encode_entity_view(self, entity_ids, mask):
        """(N, E) entity ids -> ((N, news_dim) vectors, (N,) has-entity flags).

        Articles without entities get an exact zero vector and a False flag.
        """
        mask = np.asarray(mask, dtype=bool)
        has = mask.any(axis=-1)
        emb = ad.embed_lookup(self.params["entity_emb"], entity_ids)
        mixed = ad.self_attention(emb, self.entity_self, mask, heads=self.config.heads, allow_empty=True)
        _, pooled = ad.additive_attention(mixed, self.entity_att, mask, allow_empty=True)
        projected = ad.matmul(pooled, self.params["entity_proj"]) + self.params["entity_proj_bias"]
        gate = Tensor(has[:, None].astype(projected.dtype), dtype=None)
        return projected * gate, has

    def encode_category_view(self, category, subcategory=None) -> Tensor:
        emb = ad.embed_lookup(self.params["category_emb"], category)
        if self.config.use_subcategory:
            emb = ad.concat([emb, ad.embed_lookup(self.params["category_emb"], subcategory)], axis=-1)
        return ad.relu(ad.matmul(emb, self.params["category_proj"]) + self.params["category_proj_bias"])

    def fuse_views(self, title, entity, category, has_entity) -> Tensor:
        views = ad.stack([title, entity, category], axis=1)
        has_entity = np.asarray(has_entity, dtype=bool)
        mask = np.stack([np.ones_like(has_entity), has_entity, np.ones_like(has_entity)], axis=1)
        _, pooled = ad.additive_attention(views, self.view_att, mask)
        return pooled

    def encode_news(self, features: NewsFeatures, rows, training=False, rng=None) -> Tensor:
        """News embeddings for feature rows (row 0, the padding article, is not allowed)."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and rows.min() < 1:
            raise InputError("cannot encode the padding article")
        tokens, tmask = features.tokens[rows], features.token_mask[rows]
        # Trailing all-pad columns never influence real positions; skip them.
        width = int(tmask.any(axis=0).nonzero()[0].max()) + 1 if rows.size else 1
        title = self.encode_title_view(tokens[:, :width], tmask[:, :width], training, rng)
        ents, emask = features.entities[rows], features.entity_mask[rows]
        ewidth = max(1, int(emask.any(axis=0).nonzero()[0].max()) + 1) if emask.any() else 1
        entity, has = self.encode_entity_view(ents[:, :ewidth], emask[:, :ewidth])
        category = self.encode_category_view(features.category[rows], features.subcategory[rows])
        return self.fuse_views(title, entity, category, has)

    # -- users and scores -----------------------------------------------------

    def encode_user(self, history: Tensor, mask) -> Tensor:
        """(B, H, d) history embeddings -> (B, d); users with no history get zeros."""
        _, pooled = ad.additive_attention(history, self.user_att, mask, allow_empty=True)
        return pooled

    @staticmethod
    def score(user: Tensor, candidates: Tensor) -> Tensor:
        """Inner products: (B, d) users x (B, C, d) candidates -> (B, C)."""
        if user.shape[-1] != candidates.shape[-1]:
            raise InputError(f"score: user dim {user.shape[-1]} != candidate dim {candidates.shape[-1]}")
        b, d = user.shape
        return ad.tsum(ad.reshape(user, (b, 1, d)) * candidates, axis=-1)

    def _gather_news(self, features, index_grids, training=False, rng=None):
        """Encode each distinct real row once, then gather per grid (0 -> zero vector)."""
        flat = np.concatenate([g.reshape(-1) for g in index_grids])
        unique = np.unique(flat[flat > 0])
        news = self.encode_news(features, unique, training, rng)
        table = ad.concat([Tensor(np.zeros((1, self.config.news_dim), dtype=news.dtype), dtype=None), news])
        out = []
        for grid in index_grids:
            pos = np.where(grid > 0, np.searchsorted(unique, grid) + 1, 0)
            out.append(ad.take_rows(table, pos))
        return out

    def batch_scores(self, features, examples, training=False, rng=None) -> Tensor:
        history = np.stack([e.history for e in examples])
        hmask = np.stack([e.history_mask for e in examples])
        cands = np.stack([e.candidates for e in examples])
        hist_emb, cand_emb = self._gather_news(features, [history, cands], training, rng)
        return self.score(self.encode_user(hist_emb, hmask), cand_emb)

    def per_example_loss(self, features, examples, training=False, rng=None) -> Tensor:
        scores = self.batch_scores(features, examples, training, rng)
        targets = np.array([e.target_index for e in examples])
        return ad.softmax_cross_entropy(scores, targets)

    def batch_loss(self, features, examples, training=False, rng=None) -> Tensor:
        return ad.mean(self.per_example_loss(features, examples, training, rng))

    def config_dict(self):
        return asdict(self.config)
