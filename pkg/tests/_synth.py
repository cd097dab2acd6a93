"""Synthetic corpora for the desk-scale experiments.

Two task families: a copy task over a Zipf-distributed word vocabulary
(training signal for annealing, ensembling and unk handling) and a
morphology task where every word is stem+suffix with a deterministic
word-to-word translation, so subword systems can compose translations of
unseen combinations while full-word systems cannot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TaskData:
    train: list[tuple[list[str], list[str]]]
    dev: list[tuple[list[str], list[str]]]
    test: list[tuple[list[str], list[str]]]


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1) ** exponent
    return weights / weights.sum()


def copy_task(
    n_train: int = 2000,
    n_dev: int = 150,
    n_test: int = 150,
    n_types: int = 280,
    zipf: float = 0.9,
    min_len: int = 3,
    max_len: int = 8,
    seed: int = 2024,
) -> TaskData:
    """Sentences copied verbatim from source to target."""
    rng = np.random.default_rng(seed)
    words = np.array([f"w{i:03d}" for i in range(n_types)])
    weights = _zipf_weights(n_types, zipf)

    def sentences(n):
        out = []
        for _ in range(n):
            length = rng.integers(min_len, max_len + 1)
            tokens = [str(w) for w in rng.choice(words, size=length, p=weights)]
            out.append((tokens, list(tokens)))
        return out

    return TaskData(sentences(n_train), sentences(n_dev), sentences(n_test))


def _random_strings(rng, n: int, alphabet: str, min_len: int, max_len: int) -> list[str]:
    seen: set[str] = set()
    out = []
    while len(out) < n:
        length = rng.integers(min_len, max_len + 1)
        word = "".join(rng.choice(list(alphabet), size=length))
        if word not in seen:
            seen.add(word)
            out.append(word)
    return out


def morphology_task(
    n_train: int = 2000,
    n_dev: int = 150,
    n_test: int = 150,
    n_stems: int = 120,
    n_suffixes: int = 8,
    stem_zipf: float = 1.3,
    suffix_zipf: float = 1.2,
    min_len: int = 3,
    max_len: int = 6,
    seed: int = 7,
) -> TaskData:
    """Words are stem+suffix; translation maps each part deterministically.

    Stems and suffixes use disjoint alphabets per language side so learned
    merges line up with the true morpheme boundary.
    """
    rng = np.random.default_rng(seed)
    src_stems = _random_strings(rng, n_stems, "bcdfghjklm", 3, 4)
    src_suffixes = _random_strings(rng, n_suffixes, "aeiou", 2, 3)
    tgt_stems = _random_strings(rng, n_stems, "nprstvwxyz", 3, 4)
    tgt_suffixes = _random_strings(rng, n_suffixes, "AEIOU", 2, 3)
    stem_weights = _zipf_weights(n_stems, stem_zipf)
    suffix_weights = _zipf_weights(n_suffixes, suffix_zipf)

    def sentences(n):
        out = []
        for _ in range(n):
            length = rng.integers(min_len, max_len + 1)
            stems = rng.choice(n_stems, size=length, p=stem_weights)
            suffixes = rng.choice(n_suffixes, size=length, p=suffix_weights)
            src = [src_stems[i] + src_suffixes[j] for i, j in zip(stems, suffixes)]
            tgt = [tgt_stems[i] + tgt_suffixes[j] for i, j in zip(stems, suffixes)]
            out.append((src, tgt))
        return out

    return TaskData(sentences(n_train), sentences(n_dev), sentences(n_test))


def write_parallel(pairs, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as sfh, open(tgt_path, "w", encoding="utf-8") as tfh:
        for src, tgt in pairs:
            sfh.write(" ".join(src) + "\n")
            tfh.write(" ".join(tgt) + "\n")
