"""Text branch: tokenizer, vocabulary, mean-pooled embeddings, residual refinement."""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import MLP

UNKNOWN_ID = 0
_STRIP = str.maketrans("", "", string.punctuation)


class EmptyText(ValueError):
    pass


def normalize(text: str) -> list[str]:
    words = (w.lower().translate(_STRIP) for w in text.split())
    return [w for w in words if w]


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    @classmethod
    def build(cls, corpus: Iterable[str]) -> Vocabulary:
        tokens = sorted({t for text in corpus for t in normalize(text)})
        return cls({t: i + 1 for i, t in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.token_to_id) + 1  # id 0 is reserved for unknown tokens

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNKNOWN_ID)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    tokens = normalize(text)
    if not tokens:
        raise EmptyText("description has no tokens")
    return [vocab.lookup(t) for t in tokens]


@dataclass
class TextEncoderParams:
    embedding: Tensor
    blocks: list[MLP]
    scales: list[Tensor]

    @classmethod
    def init(cls, rng, vocab_size: int, d_t: int, num_layers: int, layer_scale: float = 0.1):
        emb = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_t)), requires_grad=True)
        blocks = [MLP.init(rng, d_t, d_t, d_t) for _ in range(num_layers)]
        scales = [Tensor(np.full(d_t, layer_scale), requires_grad=True) for _ in range(num_layers)]
        return cls(emb, blocks, scales)

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {"text.embedding": self.embedding}
        for i, (m, s) in enumerate(zip(self.blocks, self.scales)):
            out.update(m.named(f"text.block{i}"))
            out[f"text.block{i}.scale"] = s
        return out


def embed_and_pool(ids: Sequence[int] | Sequence[Sequence[int]], params: TextEncoderParams) -> Tensor:
    """Mean of token embeddings; a list of id lists gives one row per text."""
    if len(ids) == 0:
        raise EmptyText("no tokens to pool")
    if isinstance(ids[0], (list, tuple, np.ndarray)):
        lengths = [len(x) for x in ids]
        if min(lengths) == 0:
            raise EmptyText("a text has no tokens")
        flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in ids])
        rows = np.repeat(np.arange(len(ids)), lengths)
        weights = np.repeat(1.0 / np.array(lengths, dtype=float), lengths)
        pool = sp.csr_matrix((weights, (rows, np.arange(len(flat)))), shape=(len(ids), len(flat)))
        return ad.const_matmul(pool, ad.gather(params.embedding, flat))
    return ad.mean(ad.gather(params.embedding, np.asarray(ids, dtype=np.int64)), axis=0)


def _block(z: Tensor, mlp: MLP, scale: Tensor) -> Tensor:
    out = mlp(z)
    if out.value.ndim == 1:
        return ad.mul(out, scale)
    return ad.mul_row(out, scale)


def refine_layers(z0: Tensor, params: TextEncoderParams) -> list[Tensor]:
    """z^(l) = z^(l-1) + block_l(z^(l-1)) for each layer.

    Self-attention over a single pooled vector is the identity map, so each
    transformer layer reduces to its residual feed-forward block.
    """
    if z0.shape[-1] != params.width:
        raise ShapeMismatch(f"text vector width {z0.shape[-1]} != {params.width}")
    layers = []
    z = z0
    for mlp, scale in zip(params.blocks, params.scales):
        z = ad.add(z, _block(z, mlp, scale))
        layers.append(z)
    return layers


def encode_text(ids, params: TextEncoderParams) -> list[Tensor]:
    return refine_layers(embed_and_pool(ids, params), params)
