"""Free-form text queries embedded into the shared classification space.

Object categories and predicates are embedded independently, so a fixed
query set can be embedded once and reused for every image.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidQueryError
from .numerics import MLP, Module, Tensor, l2_normalize, parameter, trunc_normal

OOV_TOKEN = "<unk>"

# Toy vocabulary: scene words, predicate words, and a few extras that never
# appear in training labels (open-vocabulary probes fall back on them or OOV).
DEFAULT_WORDS = [
    "circle", "square", "triangle", "shape", "object", "thing", "ball", "box", "ring",
    "red", "green", "blue", "yellow", "purple", "orange", "black", "white", "gray", "pink",
    "small", "large", "big", "tiny", "medium",
    "left", "right", "of", "above", "below", "inside", "contains", "same", "color", "as",
    "larger", "than", "smaller", "near", "on", "under", "next", "to", "the", "a", "in",
    "behind", "front", "beside", "touching", "holding", "top", "bottom", "over", "with",
    "and", "is", "far", "from", "around",
]


class Vocabulary:
    """Lower-cased word list; the last id is reserved for unknown words."""

    def __init__(self, words: Sequence[str] = DEFAULT_WORDS):
        words = [w.lower() for w in words if w.lower() != OOV_TOKEN]
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.tokens = list(words) + [OOV_TOKEN]
        self._ids = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def oov_id(self) -> int:
        return len(self.tokens) - 1

    def id(self, word: str) -> int:
        return self._ids.get(word.lower(), self.oov_id)

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise InvalidQueryError(f"empty query {text!r}")
        return [self.id(w) for w in words]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[-1] != OOV_TOKEN:
            raise ValueError(f"{path}: last line must be {OOV_TOKEN}")
        return cls(lines[:-1])


class QueryEmbedder(Module):
    """Token table -> mean pool -> 2-layer MLP -> unit vector.

    Also owns the scalar temperature and bias that map cosine similarity to a
    classification logit.
    """

    def __init__(self, dim: int, rng: np.random.Generator, vocab: Vocabulary | None = None,
                 init_temperature: float = 10.0, init_bias: float = -4.0):
        self.vocab = vocab or Vocabulary()
        self.table = parameter(trunc_normal(rng, (len(self.vocab), dim)))
        self.mlp = MLP([dim, dim, dim], rng)
        self.log_temperature = parameter(np.array([math.log(init_temperature)], np.float32))
        self.logit_bias = parameter(np.array([init_bias], np.float32))

    def tokenize(self, text: str) -> list[int]:
        return self.vocab.tokenize(text)

    def embed_query_set(self, texts: Sequence[str]) -> Tensor:
        """Embed each text independently; returns a (Q, d) tensor of unit rows."""
        if len(texts) == 0:
            raise InvalidQueryError("query set is empty")
        pool = np.zeros((len(texts), len(self.vocab)), np.float32)
        for q, text in enumerate(texts):
            try:
                ids = self.tokenize(text)
            except InvalidQueryError as exc:
                raise InvalidQueryError(f"query {q}: {exc}") from None
            for i in ids:
                pool[q, i] += 1.0 / len(ids)
        pooled = Tensor(pool, _check=False) @ self.table
        return l2_normalize(self.mlp(pooled))

    def embed_query(self, text: str) -> Tensor:
        return self.embed_query_set([text])[0]

    def oov_only(self, text: str) -> bool:
        return all(i == self.vocab.oov_id for i in self.tokenize(text))
