import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from vlmdesk import numerics as nx
from vlmdesk.masking import full_mask, isolated_mask
from vlmdesk.model import (CheckpointError, Kind, ModelConfig, assemble_sequence, dummy_video, embed_sequences,
                           encode, encode_batch, init_params, load_checkpoint, predict_embeddings,
                           project_video_features, save_checkpoint, vocab_logits)
from vlmdesk.numerics import Tensor


def rand_video(params, m, seed=0):
    rng = np.random.default_rng(seed)
    return project_video_features(rng.normal(size=(m, params.config.d_video_feat)), params)


def test_presets():
    d, p = ModelConfig.desk(), ModelConfig.published()
    assert (d.d_model, d.n_layers, d.n_heads, d.d_ff, d.vocab_size) == (64, 2, 4, 256, 512)
    assert (p.d_model, p.n_layers, p.n_heads, p.d_ff, p.vocab_size) == (768, 12, 12, 3072, 30522)
    assert d.first_word_id == 5
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError, match="distinct"):
        ModelConfig(mask_id=1)


def test_parameter_inventory(params):
    names = set(params.tensors)
    assert {"word_emb", "pos_emb", "seg_emb", "head.w", "head.b", "mlm_bias"} <= names
    assert {f"layer{i}.wq" for i in range(2)} <= names
    cfg = params.config
    assert params["word_emb"].shape == (cfg.vocab_size, cfg.d_model)
    assert params["head.w"].shape == (cfg.d_model, cfg.d_model)
    assert params["proj.w1"].shape[0] == cfg.d_video_feat
    assert params.n_parameters() == sum(t.data.size for t in params.tensors.values())


def test_init_is_deterministic(desk):
    a, b, c = init_params(desk, 7), init_params(desk, 7), init_params(desk, 8)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)
    assert not np.array_equal(a["word_emb"].data, c["word_emb"].data)


def test_projection_validates_shapes(params):
    with pytest.raises(ValueError, match="width"):
        project_video_features(np.zeros((3, 5)), params)
    with pytest.raises(ValueError, match="zero frames"):
        project_video_features(np.zeros((0, 16)), params)
    with pytest.raises(ValueError, match="max_video_tokens"):
        project_video_features(np.zeros((9, 16)), params)
    assert project_video_features(np.zeros((3, 16)), params).shape == (3, 64)


def test_sequence_layout(params, desk):
    seq = assemble_sequence(rand_video(params, 3), [10, 11, 12, 13], desk)
    k = Kind
    expected = [k.CLS, k.VIDEO, k.VIDEO, k.VIDEO, k.SEP, k.TEXT, k.TEXT, k.TEXT, k.TEXT, k.SEP]
    assert list(seq.kinds[:10]) == expected
    assert np.all(seq.kinds[10:] == k.PAD) and seq.padded_len == desk.max_len
    assert list(seq.video_positions) == [1, 2, 3] and seq.sep1 == 4
    assert list(seq.text_positions) == [5, 6, 7, 8] and seq.sep2 == 9
    assert list(seq.token_ids[[0, 4, 9]]) == [desk.cls_id, desk.sep_id, desk.sep_id]
    assert list(seq.segment_ids[:10]) == [0] * 5 + [1] * 5
    assert list(seq.position_ids[:10]) == [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]


def test_assemble_errors(params, desk):
    v = rand_video(params, 8)
    with pytest.raises(ValueError, match=r"8 video \+ 22 text"):
        assemble_sequence(v, list(range(5, 27)), desk)
    with pytest.raises(ValueError, match="dummy"):
        assemble_sequence(v, [], desk)
    with pytest.raises(ValueError, match="vocabulary"):
        assemble_sequence(v, [desk.vocab_size], desk)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 21))
def test_layout_property(m, n):
    desk = ModelConfig.desk()
    seq = assemble_sequence(Tensor(np.zeros((m, desk.d_model))), np.full(n, 7), desk)
    assert seq.length == m + n + 3 <= desk.max_len
    assert np.sum(seq.kinds == Kind.VIDEO) == m and np.sum(seq.kinds == Kind.TEXT) == n
    assert np.sum(seq.kinds == Kind.SEP) == 2 and seq.kinds[0] == Kind.CLS
    assert np.all(seq.segment_ids[seq.text_positions] == 1) and np.all(seq.segment_ids[: m + 2] == 0)


def test_embedding_reference(params, desk):
    v = rand_video(params, 2)
    seq = assemble_sequence(v, [9, 8], desk, pad_to=8)
    x = embed_sequences([seq], params).data[0]
    W, P, S = params["word_emb"].data, params["pos_emb"].data, params["seg_emb"].data
    np.testing.assert_allclose(x[0], W[desk.cls_id] + P[0] + S[0])
    np.testing.assert_allclose(x[2], v.data[1] + P[2] + S[0])
    np.testing.assert_allclose(x[5], W[8] + P[1] + S[1])
    np.testing.assert_allclose(x[7], W[desk.pad_id] + P[0] + S[0])


def naive_encoder(x, allow, params):
    """Per-head loop reference for the post-LN encoder."""
    cfg = params.config
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    g = lambda k: params[k].data  # noqa: E731

    def ln(z, gam, bet):
        mu = z.mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(((z - mu) ** 2).mean(-1, keepdims=True) + cfg.ln_eps) * gam + bet

    for i in range(cfg.n_layers):
        p = f"layer{i}."
        q, k, v = x @ g(p + "wq") + g(p + "bq"), x @ g(p + "wk") + g(p + "bk"), x @ g(p + "wv") + g(p + "bv")
        ctx = np.zeros_like(x)
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            s = np.where(allow, s, -np.inf)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            ctx[:, sl] = a @ v[:, sl]
        x = ln(x + ctx @ g(p + "wo") + g(p + "bo"), g(p + "ln1.g"), g(p + "ln1.b"))
        u = x @ g(p + "ff.w1") + g(p + "ff.b1")
        x = ln(x + (0.5 * u * (1 + erf(u / np.sqrt(2)))) @ g(p + "ff.w2") + g(p + "ff.b2"),
               g(p + "ln2.g"), g(p + "ln2.b"))
    return x


def test_encoder_matches_loop_reference(desk):
    params = init_params(desk, 1)
    rng = np.random.default_rng(2)
    for t in params.tensors.values():
        t.data += rng.normal(0, 0.1, t.data.shape)
    seq = assemble_sequence(rand_video(params, 4), [20, 30, 40], desk, pad_to=10)
    for mask in (full_mask(4, 3, 10), isolated_mask(4, 3, 10)):
        h = encode(seq, mask, params).data
        L = seq.length
        ref = naive_encoder(embed_sequences([seq], params).data[0][:L], mask.allow[:L, :L], params)
        np.testing.assert_allclose(h[:L], ref, atol=1e-10)


def test_padding_is_neutral(params, desk):
    v = rand_video(params, 3)
    short = assemble_sequence(v, [10, 11], desk, pad_to=8)
    long = assemble_sequence(v, [10, 11], desk)
    a = encode(short, full_mask(3, 2, 8), params).data[:8]
    b = encode(long, full_mask(3, 2, desk.max_len), params).data[:8]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_batch_matches_single(params, desk):
    seqs = [assemble_sequence(rand_video(params, m, seed=m), np.arange(5, 5 + n), desk, pad_to=16)
            for m, n in ((2, 5), (6, 3), (1, 1))]
    masks = [full_mask(s.n_video, s.n_text, 16) for s in seqs]
    hb = encode_batch(seqs, masks, params).data
    for i, (s, m) in enumerate(zip(seqs, masks)):
        np.testing.assert_allclose(hb[i], encode(s, m, params).data, atol=1e-12)


def test_attention_dump_rows_are_distributions(params, desk):
    seq = assemble_sequence(rand_video(params, 3), [10, 11], desk, pad_to=9)
    attn = []
    encode_batch([seq], [isolated_mask(3, 2, 9)], params, attn_out=attn)
    assert len(attn) == desk.n_layers and attn[0].shape == (1, desk.n_heads, 9, 9)
    np.testing.assert_allclose(attn[0].sum(-1), 1.0, atol=1e-12)
    assert np.all(attn[1][0, :, 5:7, 1:4] == 0.0)  # text never looks at video


def test_empty_attention_row_is_an_error(params, desk):
    seq = assemble_sequence(rand_video(params, 2), [10], desk, pad_to=6)
    allow = full_mask(2, 1, 6).allow.copy()
    allow[1, :] = False
    with pytest.raises(ValueError, match=r"rows \[1\]"):
        encode(seq, allow, params)


def test_heads_are_shared_and_tied(params):
    h = Tensor(np.random.default_rng(0).normal(size=(3, 64)))
    e = predict_embeddings(h, params)
    np.testing.assert_allclose(e.data, h.data @ params["head.w"].data + params["head.b"].data)
    lg = vocab_logits(e, params)
    np.testing.assert_allclose(lg.data, e.data @ params["word_emb"].data.T + params["mlm_bias"].data)


def test_dummy_video_is_one_zero_token(desk):
    d = dummy_video(desk)
    assert d.shape == (1, desk.d_model) and not d.data.any()


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    extras = {"opt.m.word_emb": np.ones((2, 3))}
    save_checkpoint(path, params, extras, {"step": 5})
    p2, ex2, meta = load_checkpoint(path)
    assert p2.config == params.config and meta == {"step": 5}
    assert list(p2.tensors) == list(params.tensors)
    for k in params.tensors:
        assert np.array_equal(p2[k].data, params[k].data)
    np.testing.assert_array_equal(ex2["opt.m.word_emb"], extras["opt.m.word_emb"])
    # rewriting the loaded model gives the same bytes
    save_checkpoint(tmp_path / "again.ckpt", p2, ex2, meta)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_is_reported(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated payload"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "hdr.ckpt").write_bytes(raw[:40])
    with pytest.raises(CheckpointError, match="byte 16"):
        load_checkpoint(tmp_path / "hdr.ckpt")


def test_gradients_reach_every_base_parameter(params, desk):
    seq = assemble_sequence(rand_video(params, 3), [10, 11, 12], desk, pad_to=9)
    h = encode(seq, full_mask(3, 3, 9), params)
    loss = (vocab_logits(predict_embeddings(h, params), params) * 0.01).sum()
    grads = nx.backward(loss, params.tensors)
    for name, g in grads.items():
        assert np.any(g != 0), name
