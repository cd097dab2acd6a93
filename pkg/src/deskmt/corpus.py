"""Parallel corpus ingestion, vocabulary construction and word-budget batching.

Sentences are pre-tokenized UTF-8 text, one per line, space separated.
Vocabularies reserve id 0 for the unknown token and id 1 for sentence-end;
batches are packed by target-side word count (sentence-end included) the way
the training loop consumes them.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

UNK = "<unk>"
EOS = "</s>"
UNK_ID = 0
EOS_ID = 1
RESERVED = (UNK, EOS)


@dataclass
class ParallelCorpus:
    """Aligned sentence pairs; both sides are lists of word tokens."""

    pairs: list[tuple[list[str], list[str]]]
    dropped: int = 0

    def __len__(self):
        return len(self.pairs)

    def side(self, which: str) -> list[list[str]]:
        idx = 0 if which == "source" else 1
        return [pair[idx] for pair in self.pairs]


@dataclass
class Vocabulary:
    """Frequency-cut word list with reserved unk and sentence-end ids."""

    id_of: dict[str, int]
    words: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.words)

    def lookup(self, word: str) -> int:
        return self.id_of.get(word, UNK_ID)

    def word(self, idx: int) -> str:
        return self.words[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.lookup(tok) for tok in tokens]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for idx, word in enumerate(self.words):
                fh.write(f"{word}\t{idx}\t{self.counts.get(word, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                word, idx, count = line.rstrip("\n").split("\t")
                assert int(idx) == len(words), "vocabulary file out of order"
                words.append(word)
                counts[word] = int(count)
        return cls({w: i for i, w in enumerate(words)}, words, counts)


@dataclass
class Batch:
    pairs: list[tuple[list, list]]
    word_count: int

    def __len__(self):
        return len(self.pairs)


def load_parallel(source_path, target_path, max_len: int = 100) -> ParallelCorpus:
    """Read aligned line files, dropping pairs with an empty or over-long side.

    Rejects unequal line counts and undecodable bytes (reported with the
    offending line number).
    """

    def read_lines(path):
        lines = []
        with open(path, "rb") as fh:
            for lineno, raw in enumerate(fh, start=1):
                try:
                    lines.append(raw.decode("utf-8").split())
                except UnicodeDecodeError as exc:
                    raise ValueError(f"{path}: undecodable bytes on line {lineno}") from exc
        return lines

    src_lines = read_lines(source_path)
    tgt_lines = read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line count mismatch: {source_path} has {len(src_lines)} lines, "
            f"{target_path} has {len(tgt_lines)}"
        )
    pairs, dropped = [], 0
    for src, tgt in zip(src_lines, tgt_lines):
        if not src or not tgt or len(src) > max_len or len(tgt) > max_len:
            dropped += 1
            continue
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, dropped=dropped)


def build_vocab(corpus: ParallelCorpus, side: str, limit: int) -> Vocabulary:
    """Top-`limit` words of one side by frequency, ties broken lexicographically."""
    if limit < 1:
        raise ValueError("vocabulary limit must be >= 1")
    if not corpus.pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for tokens in corpus.side(side):
        counts.update(tokens)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    words = list(RESERVED) + [word for word, _ in ranked[:limit]]
    vocab_counts = {word: counts.get(word, 0) for word in words}
    for reserved in RESERVED:
        vocab_counts[reserved] = 0
    return Vocabulary({w: i for i, w in enumerate(words)}, words, vocab_counts)


def target_words(pair) -> int:
    """Target-side word count of a pair, sentence-end included."""
    return len(pair[1]) + 1


def make_batches(
    corpus: ParallelCorpus | list,
    budget: int,
    shuffle_seed: int | None = None,
    bucket: int = 1000,
) -> list[Batch]:
    """Shuffle deterministically, length-sort within buckets, then greedily pack.

    Sentences are added to a batch while the target word count (with one
    sentence-end each) stays within `budget`; a single over-budget sentence
    forms its own batch. Every pair appears exactly once.
    """
    if budget < 1:
        raise ValueError("batch budget must be >= 1")
    pairs = list(corpus.pairs if isinstance(corpus, ParallelCorpus) else corpus)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        pairs = [pairs[i] for i in rng.permutation(len(pairs))]
    # Length-sorting inside fixed-size buckets keeps padding low without
    # destroying the shuffle.
    ordered = []
    for start in range(0, len(pairs), bucket):
        chunk = pairs[start : start + bucket]
        chunk.sort(key=target_words)
        ordered.extend(chunk)

    batches: list[Batch] = []
    current: list = []
    count = 0
    for pair in ordered:
        need = target_words(pair)
        if current and count + need > budget:
            batches.append(Batch(current, count))
            current, count = [], 0
        current.append(pair)
        count += need
    if current:
        batches.append(Batch(current, count))
    return batches


def bootstrap_corpus(corpus: ParallelCorpus, phrase_pairs, max_added: int) -> ParallelCorpus:
    """Append extracted phrase pairs as extra training sentences.

    Duplicates are collapsed and the result is truncated to the `max_added`
    most frequent pairs (ties broken by the pair itself for determinism).
    """
    best: dict[tuple, int] = {}
    for pp in phrase_pairs:
        key = (tuple(pp.source), tuple(pp.target))
        best[key] = best.get(key, 0) + pp.frequency
    ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))
    added = [(list(src), list(tgt)) for (src, tgt), _ in ranked[:max_added]]
    return ParallelCorpus(corpus.pairs + added, dropped=corpus.dropped)
