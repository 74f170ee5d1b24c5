"""Tokenization, vocabulary construction and id encoding with rare-word hash bins."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MAX_LEN = 64

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and isolate punctuation characters.

    >>> tokenize("Where is Michael Jordan?")
    ['where', 'is', 'michael', 'jordan', '?']
    """
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical string form used for exact-match comparisons."""
    return " ".join(tokenize(text))


def fnv1a_64(token: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``token``."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: Mapping[str, int]
    V: int
    m: int
    counts: Mapping[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.V < 1 or self.m < 1:
            raise ValueError("V and m must be >= 1")
        if len(self.token_to_id) > self.V:
            raise ValueError("more tokens than vocabulary capacity")
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise ValueError("token ids must be dense from 0")

    @property
    def size(self) -> int:
        """Number of assigned in-vocabulary ids (may be below capacity V)."""
        return len(self.token_to_id)

    @property
    def num_ids(self) -> int:
        """Total embedding rows needed: V regular ids plus m hash bins."""
        return self.V + self.m

    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    def token_id(self, token: str) -> int:
        i = self.token_to_id.get(token)
        if i is not None:
            return i
        return self.V + fnv1a_64(token) % self.m

    def save(self, path: str | Path) -> None:
        """Write the ``V m`` header followed by ``token<TAB>id`` rows sorted by id."""
        lines = [f"{self.V} {self.m}"]
        lines += [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token())]
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_bytes().decode("utf-8").split("\n")
        try:
            V, m = (int(x) for x in lines[0].split(" "))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed vocabulary header {lines[0]!r}") from exc
        mapping = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            tok, _, idx = line.partition("\t")
            if not idx:
                raise ValueError(f"{path}:{lineno}: malformed vocabulary row")
            mapping[tok] = int(idx)
        return cls(mapping, V, m)


def build_vocab(corpus: Iterable[str], V: int, m: int) -> Vocabulary:
    """Keep the ``V`` most frequent tokens; ties are broken lexicographically."""
    if V < 1 or m < 1:
        raise ValueError("V and m must be >= 1")
    counts: Counter[str] = Counter()
    for question in corpus:
        counts.update(tokenize(question))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:V]
    return Vocabulary({tok: i for i, (tok, _) in enumerate(ranked)}, V, m, dict(counts))


def encode_ids(tokens: Sequence[str], vocab: Vocabulary, max_len: int | None = MAX_LEN) -> list[int]:
    """Map tokens to ids in ``[0, V + m)``; unknown tokens go to ``V + fnv1a(tok) % m``."""
    if max_len is not None:
        tokens = tokens[:max_len]
    return [vocab.token_id(tok) for tok in tokens]
