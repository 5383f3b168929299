"""Train on a small separable synthetic set and print train-set AUC per epoch.

Uses the default model size, lr 1e-4 and K=4; stops at --epochs.
"""

import argparse
import time

from enrichrec.data import build_index, build_news_features, build_vocabulary, make_training_examples, random_embeddings
from enrichrec.evaluate import evaluate
from enrichrec.model import NewsRecModel
from enrichrec.synthetic import make_corpus
from enrichrec.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--words-per-topic", type=int, default=93)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    corpus = make_corpus(n_news=100, n_impressions=200, words_per_topic=args.words_per_topic, cold_fraction=0.0,
                         seed=args.seed)
    vocab = build_vocabulary(n.title for n in corpus.news)
    ents = build_index(e.wikidata_id for n in corpus.news for e in n.title_entities)
    cats = build_index([n.category for n in corpus.news] + [n.subcategory for n in corpus.news])
    feats = build_news_features(corpus.news, vocab, ents, cats, entity_source="original")
    cfg = TrainConfig(epochs=args.epochs, patience=args.epochs, seed=args.seed)
    exs = list(make_training_examples(corpus.impressions, feats, k=cfg.k, seed=cfg.seed))
    model = NewsRecModel.create(cfg.model_config(), random_embeddings(vocab, cfg.word_dim, args.seed),
                                random_embeddings(ents, cfg.entity_dim, args.seed + 1), len(cats), seed=args.seed)
    before, _ = evaluate(model, feats, corpus.impressions)
    print(f"vocab {len(vocab)}  examples {len(exs)}  untrained AUC {before.auc:.4f}")
    t0 = time.perf_counter()
    res = train(cfg, model, feats, exs, dev_features=feats, dev_impressions=corpus.impressions)
    for epoch, (loss, rep) in enumerate(zip(res.epoch_losses, res.dev_reports), start=1):
        print(f"epoch {epoch:2d}  loss {loss:.4f}  AUC {rep.auc:.4f}  MRR {rep.mrr:.4f}")
    print(f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
