import json

import pytest

from enrichrec.cli import main
from enrichrec.config import dump_config, load_config, parse_config_text
from enrichrec.errors import ConfigError
from enrichrec.synthetic import write_fixture

SMALL = dict(word_dim=50, entity_dim=100, category_dim=16, news_dim=32, attention_dim=16, heads=4)


# ---------------------------------------------------------------- config


def test_parse_types_and_comments():
    v = parse_config_text("lr = 0.001  # faster\nk=2\nuse_subcategory = true\n\nnews = a b.tsv\n")
    assert v == {"lr": 0.001, "k": 2, "use_subcategory": True, "news": "a b.tsv"}


def test_unknown_and_malformed_keys():
    with pytest.raises(ConfigError, match="unknown config key 'lerning_rate'"):
        parse_config_text("lerning_rate = 1")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("k = four")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("just words")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("k = 1\nk = 2")


def test_overrides_beat_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("k = 2\nepochs = 3\n")
    cfg = load_config(f, {"k": "6"})
    assert cfg.k == 6 and cfg.epochs == 3


def test_snapshot_round_trip(tmp_path):
    cfg = load_config(None, {"lr": "0.0003", "entity_source": "union", "news": "x.tsv", "use_enriched_title": "false"})
    f = tmp_path / "snap.cfg"
    f.write_text(dump_config(cfg))
    assert load_config(f) == cfg


def test_invalid_enum_rejected():
    with pytest.raises(ConfigError):
        load_config(None, {"llm_provider": "carrier-pigeon"})


# ---------------------------------------------------------------- commands


@pytest.fixture(scope="module")
def fixture_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    paths = write_fixture(root / "data", n_news=30, n_impressions=40, word_dim=50, seed=3)
    lines = [f"{k} = {v}" for k, v in paths.items()]
    lines += [f"{k} = {v}" for k, v in SMALL.items()]
    lines += [f"run_dir = {root / 'run'}", "epochs = 2", "batch_size = 16"]
    cfg = root / "run.cfg"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_full_cli_cycle(fixture_cfg, capsys):
    c = ["--config", str(fixture_cfg)]
    assert main(["enrich", *c]) == 0
    first = _json(capsys)
    assert first["client_calls"] > 0 and first["articles"] == 30
    assert main(["enrich", *c]) == 0
    assert _json(capsys)["client_calls"] == 0

    assert main(["preprocess", *c]) == 0
    assert _json(capsys)["examples"] > 0
    assert main(["train", *c]) == 0
    trained = _json(capsys)
    run_dir = fixture_cfg.parent / "run"
    assert (run_dir / "checkpoints" / "best.ckpt").exists()
    log = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2 == len(trained["epoch_losses"])

    assert main(["evaluate", *c, "--dump-predictions"]) == 0
    rep = _json(capsys)
    for key in ("auc", "mrr", "ndcg5", "ndcg10"):
        assert 0.0 <= rep[key] <= 1.0
    assert "n_skipped_auc" in rep
    preds = (run_dir / "eval" / "predictions.jsonl").read_text().splitlines()
    assert len(preds) == rep["n_impressions"]

    imp_id = json.loads(preds[0])["impression_id"]
    assert main(["predict", *c, "--impression-id", imp_id]) == 0
    ranking = _json(capsys)["ranking"]
    scores = [r["score"] for r in ranking]
    assert scores == sorted(scores, reverse=True)

    assert main(["predict", *c, "--impression-id", imp_id, "--oracle"]) == 0
    assert _json(capsys)["ranking"][0]["label"] == 1

    assert main(["report", *c]) == 0
    assert (run_dir / "report" / "report.csv").read_text().startswith("run,auc")

    manifest = json.loads((run_dir / "manifest.json").read_text())
    verbs = [r["verb"] for r in manifest["runs"]]
    assert verbs[:3] == ["enrich", "enrich", "preprocess"] and "train" in verbs
    for verb in ("enrich", "preprocess", "train", "evaluate"):
        snap = run_dir / f"{verb}.resolved.cfg"
        assert load_config(snap).run_dir == str(run_dir)


def test_seed_repeat_gives_identical_final_loss(fixture_cfg, capsys):
    c = ["--config", str(fixture_cfg), "--run-dir", str(fixture_cfg.parent / "repeat"), "--use-enriched-title",
         "false", "--entity-source", "original", "--epochs", "1"]
    losses = []
    for _ in range(2):
        assert main(["preprocess", *c]) == 0
        capsys.readouterr()
        assert main(["train", *c]) == 0
        losses.append(_json(capsys)["epoch_losses"][-1])
    assert losses[0] == losses[1]


def test_oracle_evaluate(fixture_cfg, capsys):
    assert main(["evaluate", "--config", str(fixture_cfg), "--oracle"]) == 0
    rep = _json(capsys)
    assert rep["auc"] == 1.0 and rep["ndcg5"] == 1.0


def test_exit_codes(fixture_cfg, caplog, tmp_path):
    c = ["--config", str(fixture_cfg)]
    assert main(["train", *c, "--glove", str(tmp_path / "missing.txt")]) == 2
    assert "'glove'" in caplog.text
    assert main(["train", *c, "--no-such-key", "1"]) == 2
    assert main(["predict", *c, "--impression-id", "does-not-exist"]) == 2
    assert main(["evaluate", *c, "--checkpoint", str(tmp_path / "nothing.ckpt")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    (tmp_path / "bad.ckpt.json").write_text("{}")
    assert main(["evaluate", *c, "--checkpoint", str(bad)]) == 2


def test_lock_blocks_concurrent_train(fixture_cfg, caplog):
    lock = fixture_cfg.parent / "run" / "checkpoints" / ".lock"
    lock.parent.mkdir(parents=True, exist_ok=True)
    lock.write_text("123")
    try:
        assert main(["train", "--config", str(fixture_cfg)]) == 3
        assert "locked" in caplog.text
    finally:
        lock.unlink()


def test_direct_mode_mirrors_original_entities(fixture_cfg, capsys, tmp_path):
    from enrichrec.data import parse_news_tsv, read_enriched_tsv

    run = tmp_path / "direct"
    assert main(["enrich", "--config", str(fixture_cfg), "--run-dir", str(run), "--prompting-mode", "direct"]) == 0
    capsys.readouterr()
    enriched = read_enriched_tsv(run / "enriched.tsv")
    news_path = load_config(fixture_cfg).news
    for rec in parse_news_tsv(news_path):
        assert [e.wikidata_id for e in enriched[rec.news_id].enriched_entities] == [
            e.wikidata_id for e in rec.title_entities
        ]
