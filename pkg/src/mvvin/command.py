"""Text commands: target extraction and seeded word embeddings."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from mvvin.autodiff import Tensor
from mvvin.errors import ArgumentError, NoTargetError, UnknownWordError

DEFAULT_DIM = 300
PATTERNS = (
    re.compile(r"\bmove to the\b"),
    re.compile(r"\bgo to the\b"),
    re.compile(r"\bplease\b.*\bthe\b"),
)


@dataclass(frozen=True)
class Command:
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ArgumentError("command text is empty")


def _normalise(text: str) -> str:
    return " ".join(re.findall(r"[a-z0-9]+", text.lower().replace("_", " ")))


def parse_target(cmd: Command | str, vocabulary: Iterable[str]) -> str:
    """Return the vocabulary word that appears last in the command (case-insensitive).

    Multi-word class names may be written with spaces or underscores.
    """
    text = _normalise(cmd.text if isinstance(cmd, Command) else cmd)
    vocab = sorted(set(vocabulary))
    best, best_pos = None, -1
    for word in vocab:
        for m in re.finditer(rf"\b{re.escape(_normalise(word))}\b", text):
            # on equal end positions prefer the longer phrase
            if m.end() > best_pos or (m.end() == best_pos and best is not None and len(word) > len(best)):
                best, best_pos = word, m.end()
    if best is None:
        raise NoTargetError(f"no target word in {text!r}; vocabulary: {', '.join(vocab)}")
    return best


def matches_pattern(cmd: Command | str) -> bool:
    text = _normalise(cmd.text if isinstance(cmd, Command) else cmd)
    return any(p.search(text) for p in PATTERNS)


def _word_seed(word: str, seed: int) -> list[int]:
    digest = hashlib.sha256(word.encode()).digest()
    return [seed, *np.frombuffer(digest[:16], dtype=np.uint32).tolist()]


class EmbeddingTable:
    """Immutable word -> unit-norm vector map."""

    def __init__(self, vectors: dict[str, np.ndarray], seed: int | None = None):
        if not vectors:
            raise ArgumentError("embedding table needs at least one word")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ArgumentError(f"embedding vectors must share one 1-D shape, got {sorted(dims)}")
        self._vectors = {w: np.array(v, dtype=np.float64) for w, v in vectors.items()}
        for v in self._vectors.values():
            v.setflags(write=False)
        self.dim = next(iter(dims))[0]
        self.seed = seed

    @classmethod
    def seeded(cls, words: Iterable[str], dim: int = DEFAULT_DIM, seed: int = 0) -> "EmbeddingTable":
        vecs = {}
        for w in sorted(set(words)):
            v = np.random.default_rng(_word_seed(w, seed)).normal(size=dim)
            vecs[w] = v / np.linalg.norm(v)
        table = cls(vecs, seed=seed)
        table.check_distinct()
        return table

    @classmethod
    def from_file(cls, path, words: Iterable[str] | None = None) -> "EmbeddingTable":
        """Read ``word v1 ... vd`` lines; keep only ``words`` when given."""
        wanted = set(words) if words is not None else None
        vecs = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if wanted is not None and parts[0] not in wanted:
                continue
            try:
                vecs[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ArgumentError(f"{path}:{lineno}: bad number ({exc})") from exc
        missing = (wanted or set()) - set(vecs)
        if missing:
            raise UnknownWordError(f"{path}: no vectors for {sorted(missing)}")
        return cls(vecs)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self._vectors)

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def vector(self, word: str) -> np.ndarray:
        try:
            return self._vectors[word]
        except KeyError:
            raise UnknownWordError(f"word {word!r} is not in the embedding table") from None

    def check_distinct(self) -> None:
        rows = list(self._vectors.values())
        mat = np.stack(rows)
        uniq = np.unique(mat, axis=0)
        if len(uniq) != len(rows):
            raise ArgumentError("embedding table has colliding vectors")


def embed_target(word: str, table: EmbeddingTable) -> Tensor:
    return Tensor(table.vector(word))
