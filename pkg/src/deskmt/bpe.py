"""Byte pair encoding over a joint source+target word frequency table.

Words start as character sequences with ``</w>`` attached to the final
character; learning repeatedly fuses the most frequent adjacent symbol pair
(frequency ties broken by the lexicographically smaller pair). Encoding
replays the learned merges in rank order, decoding chains pieces back into
words at each end-of-word marker.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .corpus import UNK, ParallelCorpus

WORD_END = "</w>"
UNK_PIECE = UNK
UNK_PIECE_FINAL = UNK + WORD_END


@dataclass
class MergeTable:
    merges: list[tuple[str, str]]
    rank: dict[tuple[str, str], int] = field(init=False)

    def __post_init__(self):
        self.rank = {pair: i for i, pair in enumerate(self.merges)}

    def __len__(self):
        return len(self.merges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#bpe v1 {len(self.merges)}\n")
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "MergeTable":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#bpe v1"):
                raise ValueError(f"{path}: not a merges file")
            merges = []
            for line in fh:
                left, right = line.rstrip("\n").split(" ")
                merges.append((left, right))
        return cls(merges)


@dataclass
class PieceVocab:
    """Piece frequencies over the encoded training corpus."""

    counts: dict[str, int]

    @property
    def pieces(self) -> set:
        return set(self.counts)

    @property
    def singleton_set(self) -> set:
        return {piece for piece, n in self.counts.items() if n == 1}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for piece in sorted(self.counts):
                fh.write(f"{piece}\t{self.counts[piece]}\n")

    @classmethod
    def load(cls, path) -> "PieceVocab":
        counts = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                piece, count = line.rstrip("\n").split("\t")
                counts[piece] = int(count)
        return cls(counts)


def word_symbols(word: str) -> tuple[str, ...]:
    """Character sequence of a word with the marker fused onto the last char."""
    return tuple(word[:-1]) + (word[-1] + WORD_END,)


def joint_word_frequencies(corpus: ParallelCorpus) -> Counter:
    """Word counts over the concatenation of both corpus sides, duplicates kept."""
    counts = Counter()
    for src, tgt in corpus.pairs:
        counts.update(src)
        counts.update(tgt)
    return counts


def _pair_counts(words: list[tuple[tuple[str, ...], int]]) -> Counter:
    counts = Counter()
    for symbols, freq in words:
        for left, right in zip(symbols, symbols[1:]):
            counts[(left, right)] += freq
    return counts


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    """Fuse every non-overlapping occurrence of `pair`, left to right."""
    left, right = pair
    merged = left + right
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_merges(word_freqs: dict[str, int], num_ops: int) -> MergeTable:
    """Learn `num_ops` merges, stopping early once no pair occurs twice.

    Pair counts are weighted by word frequency and updated incrementally
    after each merge (only words containing the merged pair are recounted).
    """
    if not word_freqs:
        raise ValueError("cannot learn merges from an empty frequency table")
    words = [(word_symbols(word), freq) for word, freq in word_freqs.items()]
    counts = _pair_counts(words)
    # pair -> word indices that currently contain it, for the incremental update
    where: dict[tuple[str, str], set[int]] = {}
    for idx, (symbols, _) in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            where.setdefault(pair, set()).add(idx)

    merges: list[tuple[str, str]] = []
    for _ in range(num_ops):
        best = None
        best_count = 1
        for pair, count in counts.items():
            if count > best_count or (count == best_count and (best is None or pair < best)):
                best = pair
                best_count = count
        if best is None or best_count < 2:
            break
        merges.append(best)
        for idx in sorted(where.get(best, ())):
            symbols, freq = words[idx]
            updated = _merge_symbols(symbols, best)
            if updated == symbols:  # stale index entry
                continue
            delta = Counter()
            for pair in zip(symbols, symbols[1:]):
                delta[pair] -= freq
            for pair in zip(updated, updated[1:]):
                delta[pair] += freq
            for pair, change in delta.items():
                if change == 0:
                    continue
                counts[pair] += change
                if counts[pair] <= 0:
                    del counts[pair]
                    where.pop(pair, None)
                elif change > 0:
                    where.setdefault(pair, set()).add(idx)
            words[idx] = (updated, freq)
    return MergeTable(merges)


def encode_word(word: str, merges: MergeTable) -> list[str]:
    """Split one word into pieces by replaying merges in rank order."""
    symbols = word_symbols(word)
    rank = merges.rank
    while len(symbols) > 1:
        pairs = set(zip(symbols, symbols[1:]))
        applicable = [(rank[p], p) for p in pairs if p in rank]
        if not applicable:
            break
        _, pair = min(applicable)
        symbols = _merge_symbols(symbols, pair)
    return list(symbols)


def build_piece_vocab(corpus: ParallelCorpus, merges: MergeTable) -> PieceVocab:
    """Piece frequencies of the jointly encoded corpus (both sides)."""
    counts = Counter()
    cache: dict[str, list[str]] = {}
    for src, tgt in corpus.pairs:
        for word in src + tgt:
            pieces = cache.get(word)
            if pieces is None:
                pieces = encode_word(word, merges)
                cache[word] = pieces
            counts.update(pieces)
    return PieceVocab(dict(counts))


def _map_piece(piece: str, vocab: PieceVocab) -> str:
    if piece in vocab.singleton_set or piece not in vocab.pieces:
        # Keep the word-end marker so decoding still finds the boundary.
        return UNK_PIECE_FINAL if piece.endswith(WORD_END) else UNK_PIECE
    return piece


def encode_tokens(
    tokens: list[str],
    merges: MergeTable,
    piece_vocab: PieceVocab | None = None,
    map_singletons: bool = False,
    cache: dict | None = None,
) -> list[str]:
    """Encode one sentence's words into pieces, optionally unk-mapping rare ones."""
    out: list[str] = []
    for word in tokens:
        pieces = None if cache is None else cache.get(word)
        if pieces is None:
            pieces = encode_word(word, merges)
            if map_singletons:
                pieces = [_map_piece(p, piece_vocab) for p in pieces]
            if cache is not None:
                cache[word] = pieces
        out.extend(pieces)
    return out


def encode_corpus(
    corpus: ParallelCorpus,
    merges: MergeTable,
    piece_vocab: PieceVocab | None = None,
    map_singletons: bool = False,
) -> ParallelCorpus:
    """Encode every sentence pair into pieces.

    With `map_singletons` set, pieces that were singletons in training (or
    never seen at all, for held-out text) become the unk piece.
    """
    if map_singletons and piece_vocab is None:
        raise ValueError("map_singletons requires a piece vocabulary")
    cache: dict[str, list[str]] = {}
    pairs = [
        (
            encode_tokens(src, merges, piece_vocab, map_singletons, cache),
            encode_tokens(tgt, merges, piece_vocab, map_singletons, cache),
        )
        for src, tgt in corpus.pairs
    ]
    return ParallelCorpus(pairs, dropped=corpus.dropped)


def decode_pieces_spans(pieces: list[str]) -> tuple[list[str], list[tuple[int, int]], bool]:
    """Chain pieces back into words.

    Returns (words, piece index span per word, malformed flag); trailing
    pieces with no final marker are flushed as a word and flagged.
    """
    words: list[str] = []
    spans: list[tuple[int, int]] = []
    start = 0
    buffer = ""
    for idx, piece in enumerate(pieces):
        buffer += piece
        if piece.endswith(WORD_END):
            words.append(buffer[: -len(WORD_END)])
            spans.append((start, idx + 1))
            buffer = ""
            start = idx + 1
    malformed = bool(buffer)
    if buffer:
        words.append(buffer)
        spans.append((start, len(pieces)))
    return words, spans, malformed


def decode_pieces(pieces: list[str]) -> list[str]:
    words, _, _ = decode_pieces_spans(pieces)
    return words
