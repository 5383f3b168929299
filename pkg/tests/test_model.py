import numpy as np
import pytest

from enrichrec import autodiff as ad
from enrichrec.autodiff import Tensor
from enrichrec.data import history_rows, make_training_examples
from enrichrec.errors import InputError
from helpers import naive_additive, naive_conv, naive_self_attention, tiny_config, tiny_world


def as64(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    return model


def _data(model, name):
    return model.params[name].data.astype(np.float64)


# ---------------------------------------------------------------- title view


def test_single_token_title_is_its_conv_output():
    _, _, model, _ = tiny_world(0)
    as64(model)
    out = model.encode_title_view([[3]], [[True]]).data[0]
    emb = _data(model, "word_emb")[[3]]
    expected = naive_conv(emb, _data(model, "conv.filters"), _data(model, "conv.bias"))[0]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_padding_positions_do_not_contribute():
    _, _, model, _ = tiny_world(0)
    short = model.encode_title_view([[3, 4]], [[True, True]]).data
    padded = model.encode_title_view([[3, 4, 0, 0, 0]], [[True, True, False, False, False]]).data
    np.testing.assert_allclose(short, padded, atol=1e-6)
    ctx = ad.conv1d(ad.embed_lookup(model.params["word_emb"], [[3, 4, 0]]), model.params["conv.filters"],
                    model.params["conv.bias"], 3)
    weights, _ = ad.additive_attention(ctx, model.title_att, [[True, True, False]])
    assert weights.data[0, 2] == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_title_view_matches_kernel_composition(seed):
    _, _, model, _ = tiny_world(seed)
    as64(model)
    ids = np.random.default_rng(seed).integers(2, model.params["word_emb"].shape[0], size=5)
    out = model.encode_title_view(ids[None], np.ones((1, 5), bool)).data[0]
    ctx = naive_conv(_data(model, "word_emb")[ids], _data(model, "conv.filters"), _data(model, "conv.bias"))
    att = model.title_att
    _, ref = naive_additive(ctx, att.projection.data, att.bias.data, att.query.data)
    np.testing.assert_allclose(out, ref, atol=1e-10)


# ---------------------------------------------------------------- entity view


def _entity_ref(model, ids):
    emb = _data(model, "entity_emb")[ids]
    sa = model.entity_self
    mixed = naive_self_attention(emb, sa.query.data, sa.key.data, sa.value.data, [True] * len(ids), model.config.heads)
    att = model.entity_att
    _, pooled = naive_additive(mixed, att.projection.data, att.bias.data, att.query.data)
    return pooled @ _data(model, "entity_proj") + _data(model, "entity_proj_bias")


def test_one_entity_view():
    _, _, model, _ = tiny_world(1)
    as64(model)
    vec, has = model.encode_entity_view([[2, 0, 0]], [[True, False, False]])
    assert has.tolist() == [True]
    np.testing.assert_allclose(vec.data[0], _entity_ref(model, [2]), atol=1e-10)


def test_no_entities_gives_zero_and_flag():
    _, _, model, _ = tiny_world(1)
    vec, has = model.encode_entity_view([[0, 0, 0]], [[False, False, False]])
    assert has.tolist() == [False] and np.all(vec.data == 0)


def test_duplicate_entities_equal_single():
    _, _, model, _ = tiny_world(2)
    one, _ = model.encode_entity_view([[2, 0]], [[True, False]])
    two, _ = model.encode_entity_view([[2, 2]], [[True, True]])
    np.testing.assert_allclose(one.data, two.data, atol=1e-6)


# ---------------------------------------------------------------- news / user / score


def test_masked_entity_view_with_identical_views():
    _, _, model, _ = tiny_world(0)
    v = Tensor(np.random.default_rng(0).normal(size=(1, 5)))
    other = Tensor(np.random.default_rng(1).normal(size=(1, 5)))
    out = model.fuse_views(v, other, v, [False]).data
    np.testing.assert_allclose(out, v.data, atol=1e-6)


def test_three_identical_views():
    _, _, model, _ = tiny_world(0)
    v = Tensor(np.random.default_rng(0).normal(size=(1, 5)))
    views = ad.stack([v, v, v], axis=1)
    weights, pooled = ad.additive_attention(views, model.view_att, np.ones((1, 3), bool))
    np.testing.assert_allclose(weights.data, 1 / 3, atol=1e-6)
    np.testing.assert_allclose(model.fuse_views(v, v, v, [True]).data, v.data, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_view_fusion_matches_scalar_oracle(seed):
    _, _, model, _ = tiny_world(seed)
    as64(model)
    rng = np.random.default_rng(seed + 10)
    views = [rng.normal(size=(1, 5)) for _ in range(3)]
    out = model.fuse_views(*[Tensor(v, dtype=np.float64) for v in views], [True]).data[0]
    att = model.view_att
    _, ref = naive_additive(np.concatenate(views), att.projection.data, att.bias.data, att.query.data)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_user_single_and_identical_history():
    _, _, model, _ = tiny_world(0)
    n = np.random.default_rng(0).normal(size=5).astype(np.float32)
    one = model.encode_user(Tensor(n[None, None]), [[True]]).data[0]
    np.testing.assert_allclose(one, n, atol=1e-6)
    many = model.encode_user(Tensor(np.tile(n, (1, 3, 1))), [[True, True, True]]).data[0]
    np.testing.assert_allclose(many, one, atol=1e-6)


def test_cold_user_is_zero():
    _, _, model, _ = tiny_world(0)
    out = model.encode_user(Tensor(np.zeros((1, 3, 5))), [[False, False, False]]).data
    assert np.all(out == 0)


def test_score_basics():
    e = np.eye(4)[None, 1:2]
    u = Tensor(np.eye(4)[1:2])
    assert model_score(u, e) == [1.0]
    assert model_score(u, np.eye(4)[None, 2:3]) == [0.0]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=7), rng.normal(size=7)
    expected = sum(a[i] * b[i] for i in range(7))
    got = model_score(Tensor(a[None], dtype=np.float64), b[None, None])
    assert got[0] == pytest.approx(expected, abs=1e-12)


def model_score(user, cands):
    from enrichrec.model import NewsRecModel

    return NewsRecModel.score(user, Tensor(cands, dtype=user.dtype)).data[0].tolist()


def test_score_dim_mismatch():
    from enrichrec.model import NewsRecModel

    with pytest.raises(InputError):
        NewsRecModel.score(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2, 4))))


def test_score_is_bilinear():
    from enrichrec.model import NewsRecModel

    rng = np.random.default_rng(3)
    u, c = rng.normal(size=(2, 6)), rng.normal(size=(2, 4, 6))
    base = NewsRecModel.score(Tensor(u, dtype=np.float64), Tensor(c, dtype=np.float64)).data
    scaled = NewsRecModel.score(Tensor(2.5 * u, dtype=np.float64), Tensor(c, dtype=np.float64)).data
    np.testing.assert_allclose(scaled, 2.5 * base, atol=1e-6)


# ---------------------------------------------------------------- whole-model properties


def _examples(feats, impressions, k=2):
    return list(make_training_examples(impressions, feats, k=k, seed=0, max_history=3))


def test_end_to_end_determinism():
    def run():
        _, feats, model, imps = tiny_world(5)
        return model.batch_scores(feats, _examples(feats, imps)).data.tobytes()

    assert run() == run()


def test_candidate_order_equivariance():
    _, feats, model, imps = tiny_world(6)
    exs = _examples(feats, imps)
    base = model.batch_scores(feats, exs).data
    perm = np.array([2, 0, 1])
    for e in exs:
        e.candidates = e.candidates[perm]
    moved = model.batch_scores(feats, exs).data
    np.testing.assert_allclose(moved, base[:, perm], atol=1e-6)


def test_history_permutation_invariance():
    _, feats, model, imps = tiny_world(7)
    exs = _examples(feats, imps)
    base = model.batch_scores(feats, exs).data
    for e in exs:
        n = int(e.history_mask.sum())
        e.history[:n] = e.history[:n][::-1]
    np.testing.assert_allclose(model.batch_scores(feats, exs).data, base, atol=1e-5)


def test_full_model_gradient_check():
    _, feats, model, imps = tiny_world(8)
    exs = _examples(feats, imps)
    err = ad.gradient_check(lambda: model.batch_loss(feats, exs), model.parameters(), eps=1e-6)
    assert err <= 1e-3


def test_padding_article_cannot_be_encoded():
    _, feats, model, _ = tiny_world(0)
    with pytest.raises(InputError):
        model.encode_news(feats, [0, 1])


def test_history_rows_helper_pads():
    _, feats, _, imps = tiny_world(0)
    rows, mask, dropped = history_rows(imps[0], feats, max_history=5)
    assert rows.shape == (5,) and mask.sum() == 2 and dropped == 0
