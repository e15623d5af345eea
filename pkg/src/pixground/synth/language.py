"""Vocabulary, tokenization and shortest-unique expression search."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import oracle
from .scene import ATTRIBUTES, CATEGORIES, GenConfig, Scene

CLS, PAD, UNK = "[CLS]", "[PAD]", "[UNK]"
RESERVED = (CLS, PAD, UNK)
FUNCTION_WORDS = ("above", "below", "left", "right", "of", "inside", "the")


class NoUniqueExpression(ValueError):
    pass


class Vocabulary:
    def __init__(self, words):
        self.words = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(CATEGORIES + ATTRIBUTES + FUNCTION_WORDS)

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[UNK])

    def word(self, idx: int) -> str:
        return self.words[idx]


@dataclass
class TokenSequence:
    ids: list[int]  # length max_tokens + 1, [CLS] first
    length: int  # [CLS] plus retained words
    pad_mask: list[bool]


def tokenize(words, vocab: Vocabulary, max_tokens: int) -> TokenSequence:
    kept = [vocab.id(w) for w in list(words)[:max_tokens]]
    ids = [vocab.index[CLS]] + kept
    length = len(ids)
    ids += [vocab.index[PAD]] * (max_tokens + 1 - length)
    return TokenSequence(ids, length, [i >= length for i in range(max_tokens + 1)])


def _descriptions(obj) -> list[tuple[str, ...]]:
    attrs = obj.attributes
    out = []
    for k in range(len(attrs) + 1):
        for combo in combinations(attrs, k):
            out.append(combo + (obj.category,))
    return out


def swap_relation(words: list[str]) -> list[str] | None:
    """Replace the relation with its opposite, or None if it has none."""
    _, rel, _ = oracle.parse(words)
    if rel not in oracle.OPPOSITE:
        return None
    text = " ".join(words).replace(f" {rel} the ", f" {oracle.OPPOSITE[rel]} the ", 1)
    return text.split()


def generate_expression(scene: Scene, referent: int, cfg: GenConfig = GenConfig(),
                        rng: np.random.Generator | None = None) -> list[str]:
    """Shortest expression that the resolver maps to exactly ``referent``.

    Plain attribute phrases are tried first; otherwise ``head <rel> the landmark``
    phrases. Among relational ties, those whose relation swap picks out a
    different single object are preferred.
    """
    objs = scene.objects
    if not 0 <= referent < len(objs):
        raise IndexError(f"referent {referent} not in scene")

    def res(words):
        return oracle.resolve(list(words), scene, cfg.image_size, cfg.relation_margin)

    ref = objs[referent]
    for desc in _descriptions(ref):
        if res(desc) == [referent]:
            return list(desc)

    candidates = []
    for j, mark in enumerate(objs):
        if j == referent:
            continue
        for landmark in _descriptions(mark):
            for rel in oracle.RELATIONS:
                for head in _descriptions(ref):
                    words = list(head) + rel.split() + ["the"] + list(landmark)
                    if res(words) == [referent]:
                        candidates.append(words)
                        break
    if not candidates:
        raise NoUniqueExpression(f"seed {scene.seed}: object {referent} cannot be singled out")

    def swappable(words):
        swapped = swap_relation(words)
        if swapped is None:
            return False
        hit = res(swapped)
        return len(hit) == 1 and hit[0] != referent

    if rng is not None:
        candidates = [candidates[i] for i in rng.permutation(len(candidates))]
    candidates.sort(key=lambda w: (len(w), not swappable(w)))
    return candidates[0]


def relation_of(words) -> str | None:
    return oracle.parse(list(words))[1]
