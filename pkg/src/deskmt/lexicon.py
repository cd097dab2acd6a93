"""Word-translation probabilities, unk-replacement dictionary, alignments
and phrase pairs, all derived from the training bitext.

Probabilities come from IBM Model 1 EM with a null source token. Alignments
take the Viterbi-best link per word in each direction and keep the
intersection; phrase pairs are every alignment-consistent span pair up to a
length cap, aggregated with extraction frequencies.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass

from .corpus import ParallelCorpus

NULL = "<null>"


@dataclass
class TranslationTable:
    """t[source][target] = p(target | source); each source row sums to 1."""

    t: dict[str, dict[str, float]]
    log_likelihoods: list[float]

    def prob(self, source: str, target: str) -> float:
        return self.t.get(source, {}).get(target, 0.0)

    def save(self, path, min_prob: float = 1e-6) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for source in sorted(self.t):
                row = self.t[source]
                for target in sorted(row):
                    if row[target] >= min_prob:
                        fh.write(f"{source}\t{target}\t{row[target]!r}\n")

    @classmethod
    def load(cls, path) -> "TranslationTable":
        t: dict[str, dict[str, float]] = defaultdict(dict)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                source, target, prob = line.rstrip("\n").split("\t")
                t[source][target] = float(prob)
        return cls(dict(t), [])


@dataclass
class Dictionary:
    """Best single-word translation per source word."""

    best: dict[str, str]

    def get(self, source: str) -> str | None:
        return self.best.get(source)

    def save(self, path, table: TranslationTable | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for source in sorted(self.best):
                target = self.best[source]
                prob = table.prob(source, target) if table else 1.0
                fh.write(f"{source}\t{target}\t{prob!r}\n")

    @classmethod
    def load(cls, path) -> "Dictionary":
        best = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                source, target, _ = line.rstrip("\n").split("\t")
                best[source] = target
        return cls(best)


@dataclass
class PhrasePair:
    source: tuple[str, ...]
    target: tuple[str, ...]
    frequency: int = 1


def learn_model1(corpus: ParallelCorpus, iterations: int) -> TranslationTable:
    """IBM Model 1 EM with a null source token.

    Uniform initialization over the target vocabulary, posterior-normalized
    expected counts, count-normalized maximization. The per-iteration corpus
    log-likelihood (recorded on the result) is non-decreasing.
    """
    if iterations < 1:
        raise ValueError("Model 1 needs at least one EM iteration")
    if not corpus.pairs:
        raise ValueError("cannot train Model 1 on an empty corpus")

    target_vocab = set()
    for _, tgt in corpus.pairs:
        target_vocab.update(tgt)
    uniform = 1.0 / len(target_vocab)

    t: dict[str, dict[str, float]] = {}
    log_likelihoods = []
    for _ in range(iterations):
        counts: dict[str, Counter] = defaultdict(Counter)
        totals: Counter = Counter()
        log_likelihood = 0.0
        for src, tgt in corpus.pairs:
            sources = [NULL] + src
            for e in tgt:
                if t:
                    probs = [t.get(f, {}).get(e, 0.0) for f in sources]
                else:
                    probs = [uniform] * len(sources)
                denom = sum(probs)
                log_likelihood += math.log(denom / len(sources)) if denom > 0 else -math.inf
                if denom <= 0:
                    continue
                for f, p in zip(sources, probs):
                    frac = p / denom
                    counts[f][e] += frac
                    totals[f] += frac
        t = {
            f: {e: c / totals[f] for e, c in row.items()}
            for f, row in counts.items()
        }
        log_likelihoods.append(log_likelihood)
    return TranslationTable(t, log_likelihoods)


def extract_dictionary(table: TranslationTable, min_prob: float = 0.0) -> Dictionary:
    """Argmax target per source word (ties lexicographic), thresholded by min_prob."""
    best = {}
    for source, row in table.t.items():
        if source == NULL or not row:
            continue
        target = min(row, key=lambda e: (-row[e], e))
        if row[target] >= min_prob:
            best[source] = target
    return Dictionary(best)


@dataclass
class Alignment:
    links: set[tuple[int, int]]


def _viterbi_links(src: list[str], tgt: list[str], table: TranslationTable):
    """One link per target word: its best-scoring source word, none if null wins."""
    links = set()
    for j, e in enumerate(tgt):
        best_i, best_p = None, table.prob(NULL, e)
        for i, f in enumerate(src):
            p = table.prob(f, e)
            if p > best_p:
                best_i, best_p = i, p
        if best_i is not None:
            links.add((best_i, j))
    return links

def align_corpus(
    corpus: ParallelCorpus,
    table: TranslationTable,
    reverse_table: TranslationTable,
) -> list[Alignment]:
    """Viterbi-best links in both directions, symmetrized by intersection."""
    alignments = []
    for src, tgt in corpus.pairs:
        forward = _viterbi_links(src, tgt, table)
        backward = {(i, j) for j, i in _viterbi_links(tgt, src, reverse_table)}
        alignments.append(Alignment(forward & backward))
    return alignments


def consistent_span(
    links: set[tuple[int, int]], i1: int, i2: int, j1: int, j2: int
) -> bool:
    """Standard phrase consistency: an internal link exists, none crosses out."""
    internal = False
    for i, j in links:
        inside_src = i1 <= i <= i2
        inside_tgt = j1 <= j <= j2
        if inside_src != inside_tgt:
            return False
        internal = internal or inside_src
    return internal


def extract_phrases(
    pair: tuple[list[str], list[str]],
    alignment: Alignment,
    max_len: int = 4,
) -> list[PhrasePair]:
    """All alignment-consistent span pairs with both sides at most max_len long."""
    src, tgt = pair
    out = []
    for i1 in range(len(src)):
        for i2 in range(i1, min(i1 + max_len, len(src))):
            for j1 in range(len(tgt)):
                for j2 in range(j1, min(j1 + max_len, len(tgt))):
                    if consistent_span(alignment.links, i1, i2, j1, j2):
                        out.append(
                            PhrasePair(tuple(src[i1 : i2 + 1]), tuple(tgt[j1 : j2 + 1]))
                        )
    return out


def extract_corpus_phrases(
    corpus: ParallelCorpus,
    alignments: list[Alignment],
    max_len: int = 4,
) -> list[PhrasePair]:
    """Phrase pairs over the whole corpus, aggregated with frequencies."""
    counts: Counter = Counter()
    for pair, alignment in zip(corpus.pairs, alignments):
        for pp in extract_phrases(pair, alignment, max_len):
            counts[(pp.source, pp.target)] += 1
    return [
        PhrasePair(source, target, freq)
        for (source, target), freq in sorted(counts.items())
    ]
