import numpy as np
import pytest

from oracles import decoder_instance, gcn_instance, max_grad_error, random_decoder
from weakcap import captioner
from weakcap.captioner import DecodeConfig, Dictionary, beam_decode, greedy_decode, relation_features
from weakcap.errors import ArgumentError, ShapeError


def zero_gcn(h, n_rel):
    return {"g_self": np.zeros((h, h)), "g_down": np.zeros((h, h)), "g_up": np.zeros((h, h)),
            "g_rel": np.zeros((h, h)), "g_bias": np.zeros(h), "rel_emb": np.zeros((n_rel, h))}


def test_single_node_zero_params():
    f = relation_features(np.array([[1.0, -2.0, 3.0]]), [], {"on": 0}, zero_gcn(3, 1))
    assert f.shape == (1, 9) and not f.any()


def test_identity_params_two_nodes():
    p = zero_gcn(2, 2)
    p["g_self"] = np.eye(2)
    p["rel_emb"] = np.array([[0.0, 0.0], [0.5, -0.5]])
    emb = np.array([[1.0, 2.0], [3.0, 4.0]])
    f = relation_features(emb, [(0, "on", 1)], {"obj": 0, "on": 1}, p)
    assert np.array_equal(f[0], [1, 2, 0, 0, 1, 2])
    assert np.array_equal(f[1], [1, 2, 0.5, -0.5, 3, 4])


def test_edge_order_permutes_features():
    rng = np.random.default_rng(0)
    params, emb, edges, rel_index = gcn_instance(rng, n_nodes=5)
    f = relation_features(emb, edges, rel_index, params)
    perm = [2, 0, 3, 1]
    g = relation_features(emb, [edges[i] for i in perm], rel_index, params)
    assert np.array_equal(g[0], f[0])
    assert np.array_equal(g[1:], f[1:][perm])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        relation_features(np.ones((2, 3)), [(0, "on", 1)], {"on": 0}, zero_gcn(2, 1))


def test_gcn_gradients():
    rng = np.random.default_rng(1)
    for _ in range(5):
        params, emb, edges, rel_index = gcn_instance(rng)
        C = rng.normal(size=(len(edges) + 1, 12))
        _, cache = relation_features(emb, edges, rel_index, params, cache=True)
        g = {k: np.zeros_like(v) for k, v in params.items()}
        captioner.relation_features_backward(C, params, cache, g)
        f = lambda: float((C * relation_features(emb, edges, rel_index, params)).sum())  # noqa: E731
        assert max_grad_error(f, params, g) < 1e-4


def test_decoder_gradients():
    rng = np.random.default_rng(2)
    params, pairs, rel_index = decoder_instance(rng)
    _, g = captioner.caption_loss(params, pairs, rel_index, 0, 1)
    f = lambda: captioner.caption_loss(params, pairs, rel_index, 0, 1, grad=False)[0]  # noqa: E731
    assert max_grad_error(f, params, g, rng, frac=0.3) < 1e-4


def test_caption_loss_empty_batch():
    rng = np.random.default_rng(3)
    params, _, rel_index = decoder_instance(rng)
    with pytest.raises(ArgumentError):
        captioner.caption_loss(params, [], rel_index, 0, 1)


def test_step_distribution():
    rng = np.random.default_rng(4)
    params, x, feats = random_decoder(rng)
    state = captioner.zero_state(params)
    assert all(not s.any() for s in state)
    new, p = captioner.step(params, state, 0, x, feats)
    assert p.shape == (11,) and p.sum() == pytest.approx(1.0) and (p > 0).all()
    assert any(s.any() for s in new)


def test_sequence_loss_matches_step_product():
    rng = np.random.default_rng(5)
    params, x, feats = random_decoder(rng)
    ids = [4, 7, 3]
    loss, _ = captioner.sequence_loss(params, x, feats, ids, 0, 1, grad=False)
    state, total = captioner.zero_state(params), 0.0
    for prev, w in zip([0] + ids, ids + [1]):
        state, p = captioner.step(params, state, prev, x, feats)
        total -= np.log(p[w])
    assert loss == pytest.approx(total)


def test_beam_one_is_greedy():
    rng = np.random.default_rng(6)
    for _ in range(10):
        params, x, feats = random_decoder(rng)
        assert beam_decode(params, x, feats, 0, 1, DecodeConfig(beam=1, max_len=8)) == \
            greedy_decode(params, x, feats, 0, 1, 8)


def test_beam_at_least_greedy_and_deterministic():
    rng = np.random.default_rng(7)
    for _ in range(10):
        params, x, feats = random_decoder(rng)
        ids, lp = beam_decode(params, x, feats, 0, 1, DecodeConfig(beam=5, max_len=8))
        _, glp = greedy_decode(params, x, feats, 0, 1, 8)
        assert lp >= glp - 1e-12
        assert beam_decode(params, x, feats, 0, 1, DecodeConfig(beam=5, max_len=8)) == (ids, lp)


def test_beam_logprob_is_sequence_logprob():
    rng = np.random.default_rng(8)
    params, x, feats = random_decoder(rng)
    ids, lp = beam_decode(params, x, feats, 0, 1, DecodeConfig(beam=3, max_len=6))
    nll, _ = captioner.sequence_loss(params, x, feats, ids, 0, 1, grad=False)
    if len(ids) < 6:
        assert lp == pytest.approx(-nll)


def test_max_len_respected():
    rng = np.random.default_rng(9)
    params, x, feats = random_decoder(rng)
    params["out_b"][1] = -50.0  # end token practically unreachable
    ids, _ = beam_decode(params, x, feats, 0, 1, DecodeConfig(beam=3, max_len=4))
    assert len(ids) == 4
    with pytest.raises(ValueError):
        DecodeConfig(beam=0)


def test_dictionary():
    d = Dictionary(["ride", "man", "ride", "<eos>"])
    assert d.words[:3] == ["<bos>", "<eos>", "<unk>"] and d.words[3:] == ["man", "ride"]
    ids, unknown = d.encode(["man", "jump"])
    assert ids == [d.index["man"], d.unk] and unknown == 1
    assert d.decode(ids + [d.eos]) == ["man", "<unk>"]


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    params, _, _ = random_decoder(rng)
    captioner.save_params(tmp_path / "m.wclm", params, {"objects": ["cat"]})
    back, meta = captioner.load_params(tmp_path / "m.wclm")
    assert meta == {"objects": ["cat"]} and set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k], params[k])
