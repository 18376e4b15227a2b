"""Toy prompt grammar and additive embedding table standing in for a text encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .numeric import make_rng
from .synth import ATTRIBUTES

EMBED_DIM = 16
MAX_COS = 0.5


class PromptError(ValueError):
    def __init__(self, message: str, position: int | None = None, token: str | None = None):
        super().__init__(message)
        self.position = position
        self.token = token


def attribute_spec(attrs=()) -> frozenset:
    """Validated attribute set; the empty set is the neutral prompt."""
    out = frozenset(attrs)
    for a in out:
        if a not in ATTRIBUTES:
            raise PromptError(f"unknown attribute {a!r}", token=a)
    return out


@dataclass(frozen=True)
class EmbeddingTable:
    base_vector: np.ndarray
    token_vectors: dict
    seed: int


def make_table(seed: int, max_attempts: int = 1000) -> EmbeddingTable:
    rng = make_rng(seed, 0xE7B)
    base = rng.normal(EMBED_DIM) / np.sqrt(EMBED_DIM)
    tokens: dict[str, np.ndarray] = {}
    for tok in ATTRIBUTES:
        for _ in range(max_attempts):
            v = rng.normal(EMBED_DIM)
            v /= np.linalg.norm(v)
            if all(abs(v @ w) <= MAX_COS for w in tokens.values()):
                tokens[tok] = v
                break
        else:
            raise PromptError(f"could not draw a separated vector for {tok!r}")
    return EmbeddingTable(base, tokens, seed)


def embed(spec, table: EmbeddingTable) -> np.ndarray:
    out = table.base_vector.copy()
    for a in sorted(spec):
        if a not in table.token_vectors:
            raise PromptError(f"unknown attribute {a!r}", token=a)
        out = out + table.token_vectors[a]
    return out


def all_specs() -> list[frozenset]:
    return [frozenset(c) for r in range(len(ATTRIBUTES) + 1) for c in combinations(ATTRIBUTES, r)]


_TOKEN = re.compile(r"\S+")


def parse_prompt(text: str) -> frozenset:
    """Parse ``neutral phantom`` or ``phantom with <a>[ and <a>]*``."""
    toks = [(m.group().lower(), m.start()) for m in _TOKEN.finditer(text)]
    words = [t for t, _ in toks]
    if words == ["neutral", "phantom"]:
        return frozenset()
    if len(words) < 3 or words[0] != "phantom" or words[1] != "with":
        # point at the first token that breaks the "phantom with <attr>" prefix
        expected = ["phantom", "with"]
        bad = next((i for i, w in enumerate(words[:2]) if w != expected[i]), min(len(toks), 2))
        pos = toks[bad][1] if bad < len(toks) else len(text)
        tok = toks[bad][0] if bad < len(toks) else None
        raise PromptError(f"malformed prompt at position {pos}: expected "
                          "'neutral phantom' or 'phantom with ...'", position=pos, token=tok)
    found = []
    for i, (w, pos) in enumerate(toks[2:]):
        if i % 2 == 1:
            if w != "and":
                raise PromptError(f"expected 'and' at position {pos}, got {w!r}", pos, w)
            continue
        if w not in ATTRIBUTES:
            raise PromptError(f"unknown attribute {w!r} at position {pos}", pos, w)
        if w in found:
            raise PromptError(f"duplicate attribute {w!r} at position {pos}", pos, w)
        found.append(w)
    if len(toks) % 2 == 0:
        raise PromptError(f"prompt ends after 'and' at position {toks[-1][1]}",
                          toks[-1][1], "and")
    return frozenset(found)


def format_prompt(spec) -> str:
    if not spec:
        return "neutral phantom"
    return "phantom with " + " and ".join(a for a in ATTRIBUTES if a in spec)
