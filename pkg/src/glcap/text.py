"""Tokenization, vocabulary construction, and frequent-content-word lists."""

from __future__ import annotations

import string
from collections import Counter
from collections.abc import Iterable
from pathlib import Path

# Reserved token ids are fixed so vocabularies stay file/checkpoint compatible.
PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_SENTENCE_LEN = 30

# The frequent-word list used to define long-range feature slots excludes
# function words; this default ships with the package and can be replaced by
# a stopword file (one word per line, '#' comments).
DEFAULT_STOPWORDS = frozenset(
    {"a", "an", "the", "is", "are", "be", "do", "to", "of", "in", "on", "and"}
)

# Punctuation is replaced by a space (not deleted) so "dog,dog" splits into
# two words instead of merging.
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(raw: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return raw.lower().translate(_PUNCT_TABLE).split()


def _ranked_words(counts: Counter) -> list[str]:
    # Frequency descending, lexicographic tie break: deterministic for a
    # fixed corpus regardless of insertion order.
    return [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


class Vocabulary:
    """Bijective word <-> id map with reserved ids 0..3 (PAD, BOS, EOS, UNK)."""

    def __init__(self, content_words: Iterable[str]):
        self.id2word = list(RESERVED_TOKENS)
        for w in content_words:
            self.id2word.append(w)
        self.word2id = {w: i for i, w in enumerate(self.id2word)}
        if len(self.word2id) != len(self.id2word):
            raise ValueError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.id2word)

    def encode(self, words: list[str], max_len: int = MAX_SENTENCE_LEN) -> list[int]:
        """Map words to ids (unknown -> UNK), truncated to max_len tokens."""
        unk = UNK
        return [self.word2id.get(w, unk) for w in words[:max_len]]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id2word[i] for i in ids]


def build_vocab(corpus: Iterable[list[str]], max_size: int) -> Vocabulary:
    """Vocabulary of the top (max_size - 4) words by frequency.

    Deterministic for a fixed corpus: frequency descending, ties broken
    lexicographically. An empty corpus yields only the reserved tokens.
    """
    if max_size <= 4:
        raise ValueError(f"max_size must exceed the 4 reserved ids, got {max_size}")
    counts = Counter()
    for words in corpus:
        counts.update(words)
    return Vocabulary(_ranked_words(counts)[: max_size - 4])


def top_k_content_words(
    corpus: Iterable[list[str]],
    k: int,
    stopwords: frozenset[str] | set[str] = DEFAULT_STOPWORDS,
) -> list[str]:
    """The k most frequent non-stopword words (freq desc, lexicographic ties).

    Returns fewer than k words when the corpus has fewer distinct content
    words. This list defines the meaning of the long-range confidence slots.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter()
    for words in corpus:
        counts.update(w for w in words if w not in stopwords)
    return _ranked_words(counts)[:k]


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Read a stopword file: one word per line, blank and '#' lines ignored."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line)
    return frozenset(words)
