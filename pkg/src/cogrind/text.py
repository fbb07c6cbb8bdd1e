"""Expression tokenization, BiLSTM encoding and attribute attention.

The per-word attention score for attribute ``m`` is ``w_m . h_n`` with a
learned vector ``w_m`` of width 2H, so any sentence length is supported. The
attribute query is the attention-weighted sum of the word *embeddings*.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import glorot, zeros

PAD, UNK = "<pad>", "<unk>"
ATTRIBUTES = ("sub", "loc")
MASK_VALUE = -1e9

_WORD = re.compile(r"[a-z0-9]+")


class EmptyExpressionError(ValueError):
    pass


class Vocabulary:
    """Dense token ids with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens):
        words = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        if len(set(words)) != len(words):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = words
        self.stoi = {w: i for i, w in enumerate(words)}

    pad_id = 0
    unk_id = 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        if lines[:2] != [PAD, UNK]:
            raise ValueError(f"{path}: vocabulary must start with {PAD} and {UNK}")
        return cls(lines[2:])


def split_words(expression: str) -> list[str]:
    return _WORD.findall(expression.lower())


def tokenize(expression: str, vocab: Vocabulary) -> list[int]:
    words = split_words(expression)
    if not words:
        raise EmptyExpressionError(f"expression {expression!r} has no tokens")
    return [vocab.id(w) for w in words]


def init_text_params(rng, vocab_size, embed_dim=64, hidden_dim=64):
    E, H = embed_dim, hidden_dim
    p = {"embed": Tensor(rng.normal(0.0, 0.5, size=(vocab_size, E)), requires_grad=True)}
    for d in ("fwd", "bwd"):
        p[f"{d}.w_x"] = glorot(rng, (E, 4 * H))
        p[f"{d}.w_h"] = glorot(rng, (H, 4 * H))
        b = zeros(4 * H)
        b.data[H:2 * H] = 1.0  # forget gate starts open
        p[f"{d}.b"] = b
    for m in ATTRIBUTES:
        p[f"att_{m}.w"] = glorot(rng, (2 * H, 1))
    return p


@dataclass
class EncodedExpression:
    """Batched (B, N, ...) encoder output; ``mask`` is 1 on real tokens."""

    token_ids: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    embeddings: Tensor
    hidden: Tensor

    @property
    def batch(self):
        return self.token_ids.shape[0]


def pad_batch(token_lists, pad_id=0):
    lengths = np.array([len(t) for t in token_lists], dtype=np.intp)
    if lengths.min() < 1:
        raise EmptyExpressionError("every expression needs at least one token")
    ids = np.full((len(token_lists), lengths.max()), pad_id, dtype=np.intp)
    for i, toks in enumerate(token_lists):
        ids[i, :len(toks)] = toks
    return ids, lengths


def lstm_scan(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Left-to-right LSTM over ``x (B, N, E)``; returns hidden states (B, N, H).

    Gate layout in the 4H axis is input, forget, candidate, output.
    """
    B, N, _ = x.shape
    H = w_h.shape[0]
    gx = ad.add(ad.matmul(x, w_x), b)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    sl = [np.arange(k * H, (k + 1) * H) for k in range(4)]
    outs = []
    for t in range(N):
        z = ad.add(ad.gather(gx, t, axis=1), ad.matmul(h, w_h))
        i = ad.sigmoid(ad.gather(z, sl[0], axis=1))
        f = ad.sigmoid(ad.gather(z, sl[1], axis=1))
        g = ad.tanh(ad.gather(z, sl[2], axis=1))
        o = ad.sigmoid(ad.gather(z, sl[3], axis=1))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return ad.reshape(ad.concat(outs, axis=-1), (B, N, H))


def reverse_index(lengths, n_max):
    """Per-row index that reverses the real tokens and leaves padding in place."""
    k = np.arange(n_max)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(k < L, L - 1 - k, k)


def encode_batch(token_lists, params) -> EncodedExpression:
    ids, lengths = pad_batch(token_lists)
    V = params["embed"].shape[0]
    if ids.min() < 0 or ids.max() >= V:
        raise ValueError(f"token id out of vocabulary range [0, {V})")
    B, N = ids.shape
    emb = ad.reshape(ad.gather(params["embed"], ids.reshape(-1), axis=0), (B, N, -1))
    h_fwd = lstm_scan(emb, params["fwd.w_x"], params["fwd.w_h"], params["fwd.b"])
    rev = reverse_index(lengths, N)
    E = emb.shape[-1]
    emb_rev = ad.take_along(emb, np.broadcast_to(rev[:, :, None], (B, N, E)), axis=1)
    h_rev = lstm_scan(emb_rev, params["bwd.w_x"], params["bwd.w_h"], params["bwd.b"])
    H = h_rev.shape[-1]
    h_bwd = ad.take_along(h_rev, np.broadcast_to(rev[:, :, None], (B, N, H)), axis=1)
    mask = (np.arange(N)[None, :] < lengths[:, None]).astype(float)
    return EncodedExpression(ids, lengths, mask, emb, ad.concat([h_fwd, h_bwd], axis=-1))


def encode(token_ids, params) -> EncodedExpression:
    """Encode one expression (batch of one)."""
    return encode_batch([list(token_ids)], params)


def attention_scores(enc: EncodedExpression, w: Tensor) -> Tensor:
    B, N, _ = enc.hidden.shape
    s = ad.reshape(ad.matmul(enc.hidden, w), (B, N))
    return ad.add(s, Tensor(np.where(enc.mask > 0, 0.0, MASK_VALUE)))


def attend(scores: Tensor, embeddings: Tensor):
    """Softmax over words, then the weighted sum of embeddings."""
    B, N = scores.shape
    alphas = ad.softmax(scores)
    q = ad.matmul(ad.reshape(alphas, (B, 1, N)), embeddings)
    return alphas, ad.reshape(q, (B, -1))


def attribute_attention(enc: EncodedExpression, attribute: str, params):
    """Return ``(alphas (B, N), q (B, E))`` for ``attribute`` in {"sub", "loc"}."""
    if attribute not in ATTRIBUTES:
        raise ValueError(f"attribute must be one of {ATTRIBUTES}, got {attribute!r}")
    return attend(attention_scores(enc, params[f"att_{attribute}.w"]), enc.embeddings)


def sentence_feature(enc: EncodedExpression) -> Tensor:
    """Masked mean of the BiLSTM states; the text input of the baseline model."""
    B, N, _ = enc.hidden.shape
    w = enc.mask / enc.lengths[:, None]
    return ad.reshape(ad.matmul(Tensor(w.reshape(B, 1, N)), enc.hidden), (B, -1))
