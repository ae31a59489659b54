"""Text side of the pipeline.

Whitespace tokenizer with per-character fallback, a small transformer
encoder producing token hidden states, attention pooling steered by a
learned guide vector that scores each token's risk relevance, mean-pooled
user embeddings, and the masked-token pretraining objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError
from .tensor import Tensor

logger = logging.getLogger(__name__)

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]")
N_SPECIALS = len(SPECIAL_TOKENS)

DEFAULT_MAX_LEN = 128


class Vocab:
    """Token to id map; ids 0-3 are reserved for PAD/UNK/MASK/CLS."""

    def __init__(self, tokens: list[str]):
        self.id_of = {tok: N_SPECIALS + i for i, tok in enumerate(tokens)}
        self.tokens = list(tokens)

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.tokens)

    @classmethod
    def from_texts(cls, texts, cap: int | None = None) -> "Vocab":
        """Build from whitespace tokens in first-seen order, then characters."""
        seen: dict[str, None] = {}
        for text in texts:
            for word in text.split():
                seen.setdefault(word, None)
        chars: dict[str, None] = {}
        for tok in seen:
            for ch in tok:
                chars.setdefault(ch, None)
        tokens = list(seen) + [c for c in chars if c not in seen]
        if cap is not None:
            tokens = tokens[: max(cap - N_SPECIALS, 0)]
        return cls(tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class TokenSequence:
    """One post, padded or truncated to a fixed length."""

    ids: np.ndarray
    mask: np.ndarray
    metaphor_flag: bool = False
    post_id: int = -1


def tokenize(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN,
             metaphor_flag: bool = False, post_id: int = -1) -> TokenSequence:
    """CLS-prefix, whitespace split with per-character fallback, pad/truncate."""
    ids = [CLS]
    for word in text.split():
        if word in vocab.id_of:
            ids.append(vocab.id_of[word])
        else:
            ids.extend(vocab.id_of.get(ch, UNK) for ch in word)
        if len(ids) >= max_len:
            break
    ids = ids[:max_len]
    mask = np.zeros(max_len, dtype=np.int8)
    mask[: len(ids)] = 1
    ids = np.array(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)
    return TokenSequence(ids=ids, mask=mask, metaphor_flag=metaphor_flag, post_id=post_id)


@dataclass
class TextEncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    ff: int = 128
    attn_proj: int = 0          # 0 -> hidden // 2
    max_len: int = DEFAULT_MAX_LEN
    dropout: float = 0.2

    def __post_init__(self):
        if self.attn_proj == 0:
            self.attn_proj = self.hidden // 2
        if self.hidden % self.heads:
            raise DomainError(f"hidden {self.hidden} not divisible by heads {self.heads}")


class TextEncoder:
    """Mini transformer encoder plus risk-attention pooling and MLM head."""

    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        h, f, a = cfg.hidden, cfg.ff, cfg.attn_proj
        p: dict[str, Tensor] = {}

        def par(name, shape, scale):
            p[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)

        par("tok_emb", (cfg.vocab_size, h), 0.02)
        par("pos_emb", (cfg.max_len, h), 0.02)
        for i in range(cfg.layers):
            for w in ("wq", "wk", "wv", "wo"):
                par(f"l{i}.{w}", (h, h), 1.0 / math.sqrt(h))
            for b in ("bq", "bk", "bv", "bo"):
                p[f"l{i}.{b}"] = Tensor(np.zeros(h), requires_grad=True, name=f"l{i}.{b}")
            par(f"l{i}.ff_w1", (h, f), 1.0 / math.sqrt(h))
            p[f"l{i}.ff_b1"] = Tensor(np.zeros(f), requires_grad=True)
            par(f"l{i}.ff_w2", (f, h), 1.0 / math.sqrt(f))
            p[f"l{i}.ff_b2"] = Tensor(np.zeros(h), requires_grad=True)
            for ln in ("ln1", "ln2"):
                p[f"l{i}.{ln}_scale"] = Tensor(np.ones(h), requires_grad=True)
                p[f"l{i}.{ln}_shift"] = Tensor(np.zeros(h), requires_grad=True)
        par("score_w", (h, a), 1.0 / math.sqrt(h))
        p["score_b"] = Tensor(np.zeros(a), requires_grad=True)
        par("guide", (a,), 1.0 / math.sqrt(a))
        par("mlm_w", (h, cfg.vocab_size), 1.0 / math.sqrt(h))
        p["mlm_b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        self.params = p

    def zero_guide(self) -> None:
        """Semantic-guide ablation: guide vector pinned to 0 (and left frozen)."""
        self.params["guide"].data[:] = 0.0
        self.params["guide"].requires_grad = False

    # -- forward ------------------------------------------------------------

    def encode(self, ids: np.ndarray, mask: np.ndarray,
               train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Token hidden states (batch, len, hidden) from the final layer."""
        cfg, p = self.cfg, self.params
        ids = np.atleast_2d(ids)
        mask = np.atleast_2d(mask).astype(bool)
        batch, length = ids.shape
        x = T.take_rows(p["tok_emb"], ids) + T.take_rows(p["pos_emb"], np.arange(length))
        key_mask = mask[:, None, :]
        dh = cfg.hidden // cfg.heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        for i in range(cfg.layers):
            q = T.matmul(x, p[f"l{i}.wq"]) + p[f"l{i}.bq"]
            k = T.matmul(x, p[f"l{i}.wk"]) + p[f"l{i}.bk"]
            v = T.matmul(x, p[f"l{i}.wv"]) + p[f"l{i}.bv"]
            ctx = []
            for head in range(cfg.heads):
                lo, hi = head * dh, (head + 1) * dh
                qh, kh, vh = (T.slice_last(t, lo, hi) for t in (q, k, v))
                scores = T.matmul(qh, T.transpose_last2(kh)) * inv_sqrt_dh
                att = T.softmax_last(scores, mask=key_mask)
                ctx.append(T.matmul(att, vh))
            attn_out = T.matmul(T.concat_last(ctx), p[f"l{i}.wo"]) + p[f"l{i}.bo"]
            attn_out = T.dropout(attn_out, cfg.dropout, train, rng)
            x = T.layer_norm(x + attn_out, p[f"l{i}.ln1_scale"], p[f"l{i}.ln1_shift"])
            ff = T.gelu(T.matmul(x, p[f"l{i}.ff_w1"]) + p[f"l{i}.ff_b1"])
            ff = T.matmul(ff, p[f"l{i}.ff_w2"]) + p[f"l{i}.ff_b2"]
            ff = T.dropout(ff, cfg.dropout, train, rng)
            x = T.layer_norm(x + ff, p[f"l{i}.ln2_scale"], p[f"l{i}.ln2_shift"])
        return x

    def pool(self, hidden: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Attention-pool token states into one vector per sequence.

        Scores each token against the learned guide direction, softmaxes over
        unmasked positions only, and returns (pooled, weights).
        """
        mask = np.atleast_2d(mask).astype(bool)
        if not mask.any(axis=-1).all():
            raise DomainError("pool: a sequence has no unmasked tokens")
        p = self.params
        act = T.gelu(T.matmul(hidden, p["score_w"]) + p["score_b"])
        scores = T.matmul(act, T.reshape(p["guide"], (self.cfg.attn_proj, 1)))
        scores = T.reshape(scores, scores.shape[:-1])
        alpha = T.softmax_last(scores, mask=mask)
        batch, length = alpha.shape
        pooled = T.matmul(T.reshape(alpha, (batch, 1, length)), hidden)
        return T.reshape(pooled, (batch, self.cfg.hidden)), alpha

    def encode_posts(self, ids: np.ndarray, mask: np.ndarray,
                     train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        pooled, _ = self.pool(self.encode(ids, mask, train, rng), mask)
        return pooled

    # -- masked-token pretraining --------------------------------------------

    def mlm_step(self, ids: np.ndarray, mask: np.ndarray, mask_rate: float,
                 rng: np.random.Generator, train: bool = True) -> Tensor:
        """Cross entropy of the MLM head at randomly masked token positions."""
        if not 0.0 < mask_rate < 1.0:
            raise DomainError(f"mlm_step: mask_rate must be in (0,1), got {mask_rate}")
        ids = np.atleast_2d(ids)
        mask = np.atleast_2d(mask)
        maskable = np.argwhere((mask == 1) & (ids >= N_SPECIALS))
        if len(maskable) == 0:
            logger.warning("mlm_step: batch has no maskable tokens, skipping")
            return Tensor(0.0)
        n_pick = max(1, int(round(mask_rate * len(maskable))))
        picked = maskable[rng.choice(len(maskable), size=n_pick, replace=False)]
        corrupted = ids.copy()
        corrupted[picked[:, 0], picked[:, 1]] = MASK
        hidden = self.encode(corrupted, mask, train=train, rng=rng)
        flat = T.reshape(hidden, (ids.size, self.cfg.hidden))
        rows = T.take_rows(flat, picked[:, 0] * ids.shape[1] + picked[:, 1])
        logits = T.matmul(rows, self.params["mlm_w"]) + self.params["mlm_b"]
        targets = ids[picked[:, 0], picked[:, 1]]
        return T.cross_entropy_logits(logits, targets)


def user_embedding(post_vectors: Tensor, post_user_ids: np.ndarray, n_users: int) -> Tensor:
    """Mean of each user's post vectors; every user must own at least one post."""
    counts = np.bincount(post_user_ids, minlength=n_users)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise DomainError(f"user_embedding: user {missing} has no posts")
    summed = T.scatter_rows_add(post_vectors, post_user_ids, n_users)
    inv = np.broadcast_to(1.0 / counts[:, None], (n_users, post_vectors.shape[-1]))
    return summed * Tensor(inv.copy())
