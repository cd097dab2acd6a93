"""Translation evaluation: corpus BLEU, class-wise unigram F1 over word
handling categories, vocabulary coverage curves, and multi-run averaging.

BLEU is the standard corpus-level BLEU-4 with clipped n-gram counts and a
brevity penalty, unsmoothed: any empty n-gram precision zeroes the score.
The F1 decomposition buckets reference words by how a full-word system and a
subword system each handle them (Full, Split, Dict, OOV-T, OOV-P).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .bpe import MergeTable, encode_word
from .corpus import Vocabulary
from .lexicon import Dictionary

CLASSES = ("Full", "Split", "Dict", "OOV-T", "OOV-P")


@dataclass
class BleuScore:
    score: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    def __str__(self):
        pn = "/".join(f"{p:.3f}" for p in self.precisions)
        return f"BLEU = {self.score:.2f} ({pn}, BP={self.brevity_penalty:.3f})"


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[str], references: list[str]) -> BleuScore:
    """Corpus BLEU-4 over whitespace-tokenized lines, no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"line count mismatch: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references"
        )
    matched = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp_line, ref_line in zip(hypotheses, references):
        hyp = hyp_line.split()
        ref = ref_line.split()
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in hyp_counts.items()
            )
    precisions = tuple(
        (matched[i] / totals[i]) if totals[i] else 0.0 for i in range(4)
    )
    if hyp_len == 0:
        return BleuScore(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuScore(score, precisions, bp, hyp_len, ref_len)


def classify_word(
    token: str,
    source_tokens: list[str],
    full_vocab: Vocabulary,
    merges: MergeTable,
    dictionary: Dictionary,
) -> str:
    """Assign one of the five handling classes to a word.

    Full: in the full-word vocabulary and a single piece under the merges.
    Split: in the vocabulary but split into several pieces.
    Dict: outside the vocabulary but produced by the dictionary from some
    word of the paired source sentence.
    OOV-P / OOV-T: outside vocabulary and dictionary; pass-through if the
    token occurs verbatim in the paired source, else needs translation.
    """
    if token in full_vocab.id_of:
        return "Full" if len(encode_word(token, merges)) == 1 else "Split"
    for src in source_tokens:
        if dictionary.get(src) == token:
            return "Dict"
    return "OOV-P" if token in source_tokens else "OOV-T"


def classify_reference_words(
    reference_tokens: list[str],
    source_tokens: list[str],
    full_vocab: Vocabulary,
    merges: MergeTable,
    dictionary: Dictionary,
) -> list[str]:
    return [
        classify_word(tok, source_tokens, full_vocab, merges, dictionary)
        for tok in reference_tokens
    ]


@dataclass
class ClassReport:
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    hyp_support: dict[str, int] = field(default_factory=dict)
    matches: dict[str, int] = field(default_factory=dict)


def classwise_f1(
    hypothesis_lines: list[str],
    reference_lines: list[str],
    source_lines: list[str],
    full_vocab: Vocabulary,
    merges: MergeTable,
    dictionary: Dictionary,
) -> ClassReport:
    """Micro-averaged unigram precision/recall/F1 per handling class.

    Hypothesis and reference tokens are classified with the same rule against
    the paired source; matches are clipped multiset overlaps within a class.
    """
    if not (len(hypothesis_lines) == len(reference_lines) == len(source_lines)):
        raise ValueError("hypothesis, reference and source line counts differ")
    matches = {c: 0 for c in CLASSES}
    hyp_support = {c: 0 for c in CLASSES}
    ref_support = {c: 0 for c in CLASSES}
    for hyp_line, ref_line, src_line in zip(hypothesis_lines, reference_lines, source_lines):
        src = src_line.split()
        by_class_hyp = {c: Counter() for c in CLASSES}
        by_class_ref = {c: Counter() for c in CLASSES}
        for tok in hyp_line.split():
            cls = classify_word(tok, src, full_vocab, merges, dictionary)
            by_class_hyp[cls][tok] += 1
            hyp_support[cls] += 1
        for tok in ref_line.split():
            cls = classify_word(tok, src, full_vocab, merges, dictionary)
            by_class_ref[cls][tok] += 1
            ref_support[cls] += 1
        for cls in CLASSES:
            for tok, count in by_class_hyp[cls].items():
                matches[cls] += min(count, by_class_ref[cls][tok])
    precision, recall, f1 = {}, {}, {}
    for cls in CLASSES:
        precision[cls] = matches[cls] / hyp_support[cls] if hyp_support[cls] else 0.0
        recall[cls] = matches[cls] / ref_support[cls] if ref_support[cls] else 0.0
        denominator = precision[cls] + recall[cls]
        f1[cls] = 2 * precision[cls] * recall[cls] / denominator if denominator else 0.0
    return ClassReport(precision, recall, f1, ref_support, hyp_support, matches)


def vocab_coverage(token_lines: list[list[str]], vocab_limit: int):
    """Frequency-ranked coverage curve plus the covered fraction at the limit.

    Returns (curve, coverage) where curve rows are (rank, frequency,
    cumulative token fraction), rank starting at 1.
    """
    counts = Counter()
    for tokens in token_lines:
        counts.update(tokens)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    total = sum(counts.values())
    curve = []
    cumulative = 0
    for rank, (_, freq) in enumerate(ranked, start=1):
        cumulative += freq
        curve.append((rank, freq, cumulative / total if total else 0.0))
    covered = curve[min(vocab_limit, len(curve)) - 1][2] if curve else 0.0
    return curve, covered


def average_runs(scores: list[float]) -> tuple[float, list[float]]:
    """Arithmetic mean with the per-run values preserved."""
    if not scores:
        raise ValueError("average_runs needs at least one score")
    return sum(scores) / len(scores), list(scores)


# ---------------------------------------------------------------------------
# Report rendering: TSV blocks plus one JSON document.
# ---------------------------------------------------------------------------


def render_report_tsv(sections: dict) -> str:
    """Labeled TSV blocks, one per section, in a fixed order."""
    lines = []
    if "bleu" in sections:
        lines.append("#bleu\tsystem\tscore\tp1\tp2\tp3\tp4\tbp")
        for name, b in sections["bleu"]:
            p = "\t".join(repr(x) for x in b.precisions)
            lines.append(f"bleu\t{name}\t{b.score!r}\t{p}\t{b.brevity_penalty!r}")
    if "class_f1" in sections:
        lines.append("#class_f1\tclass\tprecision\trecall\tf1\tsupport")
        report = sections["class_f1"]
        for cls in CLASSES:
            lines.append(
                f"class_f1\t{cls}\t{report.precision[cls]!r}\t{report.recall[cls]!r}"
                f"\t{report.f1[cls]!r}\t{report.support[cls]}"
            )
    if "coverage" in sections:
        lines.append("#coverage\trank\tfrequency\tcumulative")
        for rank, freq, cum in sections["coverage"]:
            lines.append(f"coverage\t{rank}\t{freq}\t{cum!r}")
    return "\n".join(lines) + "\n"


def report_to_json(sections: dict) -> str:
    doc: dict = {}
    if "bleu" in sections:
        doc["bleu"] = {
            name: {
                "score": b.score,
                "precisions": list(b.precisions),
                "brevity_penalty": b.brevity_penalty,
                "hyp_length": b.hyp_length,
                "ref_length": b.ref_length,
            }
            for name, b in sections["bleu"]
        }
    if "averages" in sections:
        doc["averages"] = sections["averages"]
    if "class_f1" in sections:
        report = sections["class_f1"]
        doc["class_f1"] = {
            cls: {
                "precision": report.precision[cls],
                "recall": report.recall[cls],
                "f1": report.f1[cls],
                "support": report.support[cls],
            }
            for cls in CLASSES
        }
    if "coverage" in sections:
        doc["coverage"] = [list(row) for row in sections["coverage"]]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
