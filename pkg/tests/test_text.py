import math

import numpy as np
import pytest
from scipy.special import erf

from dghif import tensor as T
from dghif import text as tx
from dghif.errors import DomainError


@pytest.fixture
def vocab():
    return tx.Vocab(["risk", "calm", "storm", "a", "b", "c"])


def make_encoder(vocab_size=10, hidden=8, layers=1, heads=1, ff=16, max_len=6, seed=0):
    cfg = tx.TextEncoderConfig(vocab_size=vocab_size, hidden=hidden, layers=layers,
                               heads=heads, ff=ff, max_len=max_len, dropout=0.0)
    return tx.TextEncoder(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# tokenizer

def test_tokenize_known_words(vocab):
    seq = tx.tokenize("risk risk", vocab, max_len=6)
    rid = vocab.id_of["risk"]
    assert seq.ids.tolist() == [tx.CLS, rid, rid, tx.PAD, tx.PAD, tx.PAD]
    assert seq.mask.tolist() == [1, 1, 1, 0, 0, 0]


def test_tokenize_truncates_to_max_len(vocab):
    text = " ".join(["calm"] * 200)
    seq = tx.tokenize(text, vocab, max_len=128)
    assert len(seq.ids) == 128
    assert seq.mask.sum() == 128


def test_tokenize_empty_text(vocab):
    seq = tx.tokenize("", vocab, max_len=4)
    assert seq.ids.tolist() == [tx.CLS, tx.PAD, tx.PAD, tx.PAD]
    assert seq.mask.tolist() == [1, 0, 0, 0]


def test_tokenize_character_fallback(vocab):
    # "cab" is unknown as a word but spells known single characters
    seq = tx.tokenize("cab", vocab, max_len=6)
    expect = [tx.CLS, vocab.id_of["c"], vocab.id_of["a"], vocab.id_of["b"], tx.PAD, tx.PAD]
    assert seq.ids.tolist() == expect


def test_tokenize_unknown_characters_map_to_unk(vocab):
    seq = tx.tokenize("xyz", vocab, max_len=6)
    assert seq.ids.tolist()[:4] == [tx.CLS, tx.UNK, tx.UNK, tx.UNK]


def test_vocab_roundtrip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    loaded = tx.Vocab.load(path)
    assert loaded.id_of == vocab.id_of
    assert loaded.size == vocab.size


# ---------------------------------------------------------------------------
# encoder

def test_encode_deterministic():
    enc = make_encoder()
    ids = np.array([[tx.CLS, 5, 6, 7, tx.PAD, tx.PAD]])
    mask = np.array([[1, 1, 1, 1, 0, 0]])
    h1 = enc.encode(ids, mask).data
    h2 = enc.encode(ids, mask).data
    np.testing.assert_array_equal(h1, h2)


def test_encode_position_equivariance_without_positions():
    enc = make_encoder()
    enc.params["pos_emb"].data[:] = 0.0
    ids = np.array([[tx.CLS, 5, 6, 7, tx.PAD, tx.PAD]])
    mask = np.array([[1, 1, 1, 1, 0, 0]])
    swapped = ids.copy()
    swapped[0, 1], swapped[0, 2] = ids[0, 2], ids[0, 1]
    h = enc.encode(ids, mask).data
    hs = enc.encode(swapped, mask).data
    np.testing.assert_allclose(h[0, 1], hs[0, 2], atol=1e-12)
    np.testing.assert_allclose(h[0, 2], hs[0, 1], atol=1e-12)
    np.testing.assert_allclose(h[0, 0], hs[0, 0], atol=1e-12)


def straight_line_layer(x, mask, p, i, heads, eps=T.LAYERNORM_EPS):
    """Independent single-layer oracle: plain numpy, no tape."""
    def ln(v, scale, shift):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * scale + shift

    def gelu(v):
        return 0.5 * v * (1 + erf(v / math.sqrt(2)))

    q = x @ p[f"l{i}.wq"].data + p[f"l{i}.bq"].data
    k = x @ p[f"l{i}.wk"].data + p[f"l{i}.bv"].data * 0 + p[f"l{i}.bk"].data
    v = x @ p[f"l{i}.wv"].data + p[f"l{i}.bv"].data
    dh = x.shape[-1] // heads
    ctx = np.zeros_like(x)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        scores = q[:, :, sl] @ k[:, :, sl].swapaxes(-1, -2) / math.sqrt(dh)
        scores = np.where(mask[:, None, :], scores, -np.inf)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        att = e / e.sum(-1, keepdims=True)
        ctx[:, :, sl] = att @ v[:, :, sl]
    attn_out = ctx @ p[f"l{i}.wo"].data + p[f"l{i}.bo"].data
    x = ln(x + attn_out, p[f"l{i}.ln1_scale"].data, p[f"l{i}.ln1_shift"].data)
    ff = gelu(x @ p[f"l{i}.ff_w1"].data + p[f"l{i}.ff_b1"].data)
    ff = ff @ p[f"l{i}.ff_w2"].data + p[f"l{i}.ff_b2"].data
    return ln(x + ff, p[f"l{i}.ln2_scale"].data, p[f"l{i}.ln2_shift"].data)


def test_encode_matches_straight_line_oracle():
    enc = make_encoder(hidden=8, layers=1, heads=2, seed=3)
    ids = np.array([[tx.CLS, 5, 8, tx.PAD, tx.PAD, tx.PAD],
                    [tx.CLS, 4, 5, 6, 7, 8]])
    mask = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 1]])
    got = enc.encode(ids, mask).data

    p = enc.params
    x = p["tok_emb"].data[ids] + p["pos_emb"].data[np.arange(6)]
    want = straight_line_layer(x, mask.astype(bool), p, 0, heads=2)
    real = mask.astype(bool)
    np.testing.assert_allclose(got[real], want[real], atol=1e-10)


# ---------------------------------------------------------------------------
# risk attention pooling

def test_pool_identical_states_gives_uniform_weights():
    enc = make_encoder()
    h = T.Tensor(np.tile(np.linspace(0.1, 0.8, 8), (1, 4, 1)))
    mask = np.array([[1, 1, 1, 1]])
    pooled, alpha = enc.pool(h, mask)
    np.testing.assert_allclose(alpha.data, 0.25, atol=1e-12)
    np.testing.assert_allclose(pooled.data[0], h.data[0, 0], atol=1e-12)


def test_pool_single_unmasked_token():
    enc = make_encoder()
    rng = np.random.default_rng(5)
    h = T.Tensor(rng.normal(size=(1, 4, 8)))
    mask = np.array([[0, 0, 1, 0]])
    pooled, alpha = enc.pool(h, mask)
    np.testing.assert_allclose(alpha.data, [[0, 0, 1, 0]], atol=1e-12)
    np.testing.assert_allclose(pooled.data[0], h.data[0, 2], atol=1e-12)


def test_pool_weights_are_a_distribution_and_zero_on_pad(rng):
    enc = make_encoder(seed=9)
    h = T.Tensor(rng.normal(size=(5, 6, 8)))
    mask = (rng.random((5, 6)) < 0.6).astype(int)
    mask[:, 0] = 1
    _, alpha = enc.pool(h, mask)
    assert (alpha.data >= 0).all()
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-9)
    assert (alpha.data[mask == 0] == 0).all()


def test_pool_zero_guide_equals_masked_mean(rng):
    enc = make_encoder(seed=11)
    enc.zero_guide()
    h = T.Tensor(rng.normal(size=(4, 6, 8)))
    mask = (rng.random((4, 6)) < 0.5).astype(int)
    mask[:, 1] = 1
    pooled, _ = enc.pool(h, mask)
    for b in range(4):
        manual = h.data[b][mask[b] == 1].mean(axis=0)
        np.testing.assert_allclose(pooled.data[b], manual, atol=1e-12)


def test_pool_guide_scaling_keeps_argmax(rng):
    enc = make_encoder(seed=13)
    h = T.Tensor(rng.normal(size=(3, 6, 8)))
    mask = np.ones((3, 6), dtype=int)
    _, alpha1 = enc.pool(h, mask)
    enc.params["guide"].data *= 7.5
    _, alpha2 = enc.pool(h, mask)
    np.testing.assert_array_equal(alpha1.data.argmax(-1), alpha2.data.argmax(-1))


def test_pool_all_masked_raises():
    enc = make_encoder()
    h = T.Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(DomainError):
        enc.pool(h, np.array([[0, 0, 0, 0]]))


# ---------------------------------------------------------------------------
# user embeddings

def test_user_embedding_mean():
    posts = T.Tensor(np.array([[1.0, 3.0], [3.0, 1.0]]))
    out = tx.user_embedding(posts, np.array([0, 0]), 1)
    np.testing.assert_allclose(out.data, [[2.0, 2.0]])


def test_user_embedding_single_post_identity():
    posts = T.Tensor(np.array([[0.5, -1.5, 2.0]]))
    out = tx.user_embedding(posts, np.array([0]), 1)
    np.testing.assert_allclose(out.data, posts.data)


def test_user_embedding_idempotent_on_copies():
    v = np.array([0.3, 0.7, -0.2])
    posts = T.Tensor(np.tile(v, (5, 1)))
    out = tx.user_embedding(posts, np.zeros(5, dtype=int), 1)
    np.testing.assert_allclose(out.data[0], v, atol=1e-12)


def test_user_embedding_empty_user_raises():
    posts = T.Tensor(np.ones((2, 3)))
    with pytest.raises(DomainError):
        tx.user_embedding(posts, np.array([0, 0]), 2)


# ---------------------------------------------------------------------------
# masked-token pretraining

def test_mlm_loss_uniform_logits_is_log_vocab():
    enc = make_encoder(vocab_size=12)
    enc.params["mlm_w"].data[:] = 0.0
    enc.params["mlm_b"].data[:] = 0.0
    ids = np.array([[tx.CLS, 5, 6, 7, 8, 9]])
    mask = np.ones((1, 6), dtype=int)
    loss = enc.mlm_step(ids, mask, 0.5, np.random.default_rng(0), train=False)
    assert loss.item() == pytest.approx(math.log(12), abs=1e-12)


def test_mlm_perfect_head_loss_near_zero():
    enc = make_encoder(vocab_size=10, hidden=8)
    ids = np.array([[tx.CLS, 5, 5, 5, 5, 5]])
    mask = np.ones((1, 6), dtype=int)
    # rig the head so every position predicts token 5 with huge margin
    enc.params["mlm_w"].data[:] = 0.0
    enc.params["mlm_b"].data[:] = -100.0
    enc.params["mlm_b"].data[5] = 100.0
    loss = enc.mlm_step(ids, mask, 0.4, np.random.default_rng(0), train=False)
    assert loss.item() < 1e-8


def test_mlm_mask_positions_deterministic_per_seed():
    enc = make_encoder(vocab_size=10)
    ids = np.tile(np.array([[tx.CLS, 4, 5, 6, 7, 8]]), (3, 1))
    mask = np.ones((3, 6), dtype=int)
    l1 = enc.mlm_step(ids, mask, 0.3, np.random.default_rng(42), train=False).item()
    l2 = enc.mlm_step(ids, mask, 0.3, np.random.default_rng(42), train=False).item()
    assert l1 == l2


def test_mlm_no_maskable_tokens_returns_zero():
    enc = make_encoder()
    ids = np.array([[tx.CLS, tx.PAD, tx.PAD, tx.PAD, tx.PAD, tx.PAD]])
    mask = np.array([[1, 0, 0, 0, 0, 0]])
    loss = enc.mlm_step(ids, mask, 0.3, np.random.default_rng(0))
    assert loss.item() == 0.0


def test_mlm_rate_domain():
    enc = make_encoder()
    with pytest.raises(DomainError):
        enc.mlm_step(np.array([[tx.CLS, 5]]), np.array([[1, 1]]), 0.0,
                     np.random.default_rng(0))


# ---------------------------------------------------------------------------
# gradients flow end to end through encode + pool

def test_pool_gradients_match_finite_differences(rng):
    enc = make_encoder(vocab_size=9, hidden=4, layers=1, heads=1, ff=6, max_len=4, seed=21)
    ids = np.array([[tx.CLS, 4, 5, tx.PAD], [tx.CLS, 6, 7, 8]])
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    w = rng.normal(size=(2, 4))

    def loss():
        pooled = enc.encode_posts(ids, mask)
        return T.sum_(pooled * T.Tensor(w))

    subset = {k: enc.params[k] for k in
              ("tok_emb", "guide", "score_w", "score_b", "l0.wq", "l0.ff_w1",
               "l0.ln1_scale", "l0.ln2_shift", "mlm_w")}
    report = T.grad_check(loss, subset, step=1e-5)
    assert max(report.values()) < 1e-4
