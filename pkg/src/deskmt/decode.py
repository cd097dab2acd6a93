"""Beam-search translation for a single model or an ensemble, plus the
unk-replacement post-process.

Ensembles average the members' output distributions (and attentions) at
every step; hypotheses are ranked by length-normalized log-probability.
Generated unk tokens are replaced by a dictionary lookup of the most
attended source word, falling back to copying it verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bpe as bpe_mod
from .corpus import EOS_ID, UNK, UNK_ID, Vocabulary
from .lexicon import Dictionary
from .model import ModelParams, Stepper


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    attentions: list[np.ndarray]
    states: list = field(default_factory=list)  # per-member decoder state rows
    finished: bool = False

    @property
    def normalized_score(self) -> float:
        return self.log_prob / max(len(self.tokens), 1)

    def surface_tokens(self) -> list[int]:
        """Emitted ids without the trailing sentence-end."""
        if self.tokens and self.tokens[-1] == EOS_ID:
            return self.tokens[:-1]
        return list(self.tokens)


@dataclass
class EnsembleMember:
    params: ModelParams
    tgt_vocab_hash: str = ""
    name: str = ""


@dataclass
class EnsembleSpec:
    members: list[EnsembleMember]

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        hashes = {m.tgt_vocab_hash for m in self.members}
        if len(hashes) > 1:
            raise ValueError(f"ensemble members disagree on target vocabulary: {hashes}")


def ensemble_distribution(member_distributions) -> np.ndarray:
    """Arithmetic mean of the members' word distributions."""
    dists = [np.asarray(d, dtype=np.float64) for d in member_distributions]
    length = dists[0].shape[-1]
    for d in dists:
        if d.shape[-1] != length:
            raise ValueError("member distributions differ in length")
    return sum(dists) / len(dists)


def beam_search(
    spec: EnsembleSpec,
    source_ids,
    beam_size: int = 5,
    max_len: int | None = None,
) -> list[Hypothesis]:
    """Standard beam expansion over the ensemble-averaged distribution.

    Hypotheses end at sentence-end or max_len; the result is sorted by
    length-normalized log-probability, best first. Finished hypotheses do
    not occupy beam slots.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len is None:
        max_len = 2 * len(source_ids) + 5
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    steppers = [Stepper(m.params, source_ids) for m in spec.members]
    return beam_over_steppers(steppers, beam_size, max_len)


def beam_over_steppers(steppers, beam_size: int, max_len: int) -> list[Hypothesis]:
    """Beam search over any objects with start(n) and step(states, prev_ids)."""
    start_states = [s.start(1) for s in steppers]
    active = [Hypothesis([], 0.0, [], states=[(st[0][0], st[1][0]) for st in start_states])]
    finished: list[Hypothesis] = []

    while active:
        n = len(active)
        prev = np.array([h.tokens[-1] if h.tokens else EOS_ID for h in active], dtype=np.intp)
        member_dists, member_atts, member_states = [], [], []
        for member_idx, stepper in enumerate(steppers):
            states = (
                np.stack([h.states[member_idx][0] for h in active]),
                np.stack([h.states[member_idx][1] for h in active]),
            )
            dist, att, new_states = stepper.step(states, prev)
            member_dists.append(dist)
            member_atts.append(att)
            member_states.append(new_states)
        avg_dist = ensemble_distribution(member_dists)
        avg_att = sum(member_atts) / len(member_atts)

        scores = np.log(np.maximum(avg_dist, 1e-300)) + np.array(
            [h.log_prob for h in active]
        ).reshape(n, 1)
        flat = scores.reshape(-1)
        k = min(beam_size, flat.size)
        top = np.argpartition(-flat, k - 1)[:k]
        top = top[np.lexsort((top, -flat[top]))]  # score desc, then index, stable

        next_active = []
        for idx in top:
            hyp_idx, word = divmod(int(idx), avg_dist.shape[1])
            parent = active[hyp_idx]
            child = Hypothesis(
                parent.tokens + [word],
                float(flat[idx]),
                parent.attentions + [avg_att[hyp_idx]],
                states=[(ms[0][hyp_idx], ms[1][hyp_idx]) for ms in member_states],
            )
            if word == EOS_ID or len(child.tokens) >= max_len:
                child.finished = True
                finished.append(child)
            else:
                next_active.append(child)
        active = next_active

    finished.sort(key=lambda h: (-h.normalized_score, h.tokens))
    return finished


def replace_unks(
    target_words: list[str],
    attentions: list[np.ndarray],
    source_words: list[str],
    dictionary: Dictionary | None,
) -> list[str]:
    """Swap each unk for a dictionary translation of the most attended source
    word, or failing that the source word itself."""
    out = []
    for word, attention in zip(target_words, attentions):
        if word != UNK:
            out.append(word)
            continue
        src_word = source_words[int(np.argmax(attention))]
        translated = dictionary.get(src_word) if dictionary is not None else None
        out.append(translated if translated is not None else src_word)
    return out


@dataclass
class BpeArtifacts:
    merges: bpe_mod.MergeTable
    piece_vocab: bpe_mod.PieceVocab
    map_singletons: bool = True


def _is_unk_piece(piece: str) -> bool:
    return piece in (bpe_mod.UNK_PIECE, bpe_mod.UNK_PIECE_FINAL)


def _pieces_to_words(pieces: list[str], attentions: list[np.ndarray]):
    """Collapse pieces into words with one attention vector per word.

    A word containing any unk piece surfaces as the unk token, carrying the
    highest-attention unk step's vector; ordinary words carry their last
    piece's attention (the step that closed the word).
    """
    words, spans, _ = bpe_mod.decode_pieces_spans(pieces)
    out_words, out_atts = [], []
    for word, (start, stop) in zip(words, spans):
        unk_steps = [i for i in range(start, stop) if _is_unk_piece(pieces[i])]
        if unk_steps:
            best = max(unk_steps, key=lambda i: float(np.max(attentions[i])))
            out_words.append(UNK)
            out_atts.append(attentions[best])
        else:
            out_words.append(word)
            out_atts.append(attentions[stop - 1])
    return out_words, out_atts


def translate_sentence(
    spec: EnsembleSpec,
    source_words: list[str],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    bpe: BpeArtifacts | None = None,
    dictionary: Dictionary | None = None,
    beam_size: int = 5,
    max_len: int | None = None,
) -> tuple[list[str], Hypothesis | None]:
    """encode -> beam search -> top hypothesis -> pieces-to-words -> unk replace."""
    if not source_words:
        return [], None
    if bpe is not None:
        cache: dict = {}
        source_tokens = bpe_mod.encode_tokens(
            source_words, bpe.merges, bpe.piece_vocab, bpe.map_singletons, cache
        )
        # map each source piece position back to its originating word
        src_word_of_pos = []
        for w_idx, word in enumerate(source_words):
            pieces = bpe_mod.encode_tokens([word], bpe.merges, bpe.piece_vocab, bpe.map_singletons, cache)
            src_word_of_pos.extend([w_idx] * len(pieces))
    else:
        source_tokens = source_words
        src_word_of_pos = list(range(len(source_words)))

    source_ids = src_vocab.encode(source_tokens)
    hyps = beam_search(spec, source_ids, beam_size, max_len)
    if not hyps:
        return [], None
    best = hyps[0]
    tokens = best.surface_tokens()
    attentions = best.attentions[: len(tokens)]
    rendered = [tgt_vocab.word(t) for t in tokens]
    if bpe is not None:
        words, word_atts = _pieces_to_words(rendered, attentions)
    else:
        words, word_atts = rendered, attentions
    # attentions index source positions; collapse to word granularity first
    word_level_atts = []
    for att in word_atts:
        collapsed = np.zeros(len(source_words))
        np.add.at(collapsed, np.asarray(src_word_of_pos, dtype=np.intp), att)
        word_level_atts.append(collapsed)
    final = replace_unks(words, word_level_atts, source_words, dictionary)
    return final, best


def translate_corpus(
    spec: EnsembleSpec,
    source_path,
    output_path,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    bpe: BpeArtifacts | None = None,
    dictionary: Dictionary | None = None,
    beam_size: int = 5,
    max_len: int | None = None,
    scores_path=None,
) -> None:
    """Translate a tokenized file line by line, order preserved."""
    with open(source_path, encoding="utf-8") as fh:
        lines = [line.split() for line in fh]
    score_rows = []
    with open(output_path, "w", encoding="utf-8") as out:
        for lineno, words in enumerate(lines, start=1):
            try:
                translated, hyp = translate_sentence(
                    spec, words, src_vocab, tgt_vocab, bpe, dictionary, beam_size, max_len
                )
            except Exception as exc:
                raise RuntimeError(f"{source_path}: failed on line {lineno}: {exc}") from exc
            out.write(" ".join(translated) + "\n")
            if scores_path is not None:
                score = hyp.normalized_score if hyp is not None else 0.0
                att = (
                    ";".join(",".join(repr(x) for x in a) for a in hyp.attentions)
                    if hyp is not None
                    else ""
                )
                score_rows.append(f"{lineno}\t{score!r}\t{att}")
    if scores_path is not None:
        with open(scores_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(score_rows) + ("\n" if score_rows else ""))
