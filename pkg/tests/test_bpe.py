from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskmt.bpe import (
    MergeTable,
    PieceVocab,
    UNK_PIECE,
    UNK_PIECE_FINAL,
    build_piece_vocab,
    decode_pieces,
    decode_pieces_spans,
    encode_corpus,
    encode_tokens,
    encode_word,
    joint_word_frequencies,
    learn_merges,
    word_symbols,
)
from deskmt.corpus import ParallelCorpus


def naive_learn_merges(word_freqs, num_ops):
    """Full recount after every merge; the oracle for the incremental path."""
    words = {word: list(word_symbols(word)) for word in word_freqs}
    merges = []
    for _ in range(num_ops):
        counts = Counter()
        for word, symbols in words.items():
            freq = word_freqs[word]
            for pair in zip(symbols, symbols[1:]):
                counts[pair] += freq
        if not counts:
            break
        best = min(counts, key=lambda pair: (-counts[pair], pair))
        if counts[best] < 2:
            break
        merges.append(best)
        merged = best[0] + best[1]
        for word, symbols in words.items():
            out, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            words[word] = out
    return merges


class TestLearnMerges:
    def test_hand_derived_first_merge(self):
        # pair counts: (a, a</w>) = 3 beats (a, b</w>) = 1
        table = learn_merges({"aa": 3, "ab": 1}, num_ops=10)
        assert table.merges[0] == ("a", "a</w>")

    def test_zero_ops_empty_table(self):
        table = learn_merges({"abc": 5}, num_ops=0)
        assert len(table) == 0
        assert encode_word("abc", table) == ["a", "b", "c</w>"]

    def test_early_stop_when_no_pair_repeats(self):
        table = learn_merges({"ab": 1, "cd": 1}, num_ops=100)
        assert len(table) == 0

    def test_lexicographic_tie_break(self):
        # (b, a</w>) and (a, b</w>) both occur twice; smaller pair wins
        table = learn_merges({"ba": 2, "ab": 2}, num_ops=1)
        assert table.merges[0] == ("a", "b</w>")

    def test_requested_count_reached(self):
        freqs = {"abcdef": 4, "abcxyz": 3, "defxyz": 2}
        table = learn_merges(freqs, num_ops=6)
        assert len(table) == 6

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            learn_merges({}, 5)

    def test_incremental_matches_full_recount(self):
        words = ["low", "lower", "lowest", "newer", "never", "wider", "widest", "new"]
        freqs = {w: (i * 7) % 11 + 1 for i, w in enumerate(words)}
        fast = learn_merges(freqs, num_ops=30)
        slow = naive_learn_merges(freqs, num_ops=30)
        assert fast.merges == slow

    @given(
        st.dictionaries(
            st.text(alphabet="abcde", min_size=1, max_size=6),
            st.integers(min_value=1, max_value=9),
            min_size=1,
            max_size=12,
        ),
        st.integers(min_value=0, max_value=20),
    )
    @settings(max_examples=50, deadline=None)
    def test_incremental_matches_recount_fuzz(self, freqs, num_ops):
        assert learn_merges(freqs, num_ops).merges == naive_learn_merges(freqs, num_ops)

    def test_determinism(self):
        freqs = {"alpha": 3, "alps": 2, "beta": 5, "betas": 1}
        tables = [learn_merges(dict(freqs), 15).merges for _ in range(3)]
        assert tables[0] == tables[1] == tables[2]


class TestEncodeWord:
    def test_single_applicable_merge(self):
        table = MergeTable([("a", "a</w>")])
        assert encode_word("aa", table) == ["aa</w>"]

    def test_empty_table_yields_characters(self):
        assert encode_word("low", MergeTable([])) == ["l", "o", "w</w>"]

    def test_fully_merged_training_word_is_single_piece(self):
        table = learn_merges({"the": 50, "toe": 2}, num_ops=10)
        assert encode_word("the", table) == ["the</w>"]

    def test_merges_apply_in_rank_order(self):
        # lower-rank merge (b, c) fires first, enabling (a, bc)
        table = MergeTable([("b", "c"), ("a", "bc")])
        assert encode_word("abcx", table) == ["abc", "x</w>"]
        # the final character carries the marker, so (b, c) cannot match it
        assert encode_word("abc", table) == ["a", "b", "c</w>"]


class TestEncodeCorpus:
    def corpus(self):
        pairs = [(["aa", "ab"], ["aa"]), (["aa"], ["ab", "aa"])]
        return ParallelCorpus(pairs)

    def test_singleton_mapped_to_unk(self):
        corpus = ParallelCorpus([(["aa", "aa", "ab"], ["aa"])])
        table = learn_merges(joint_word_frequencies(corpus), 5)
        vocab = build_piece_vocab(corpus, table)
        singletons = vocab.singleton_set
        assert singletons  # 'ab' pieces occur once
        encoded = encode_corpus(corpus, table, vocab, map_singletons=True)
        flat = [p for s, t in encoded.pairs for p in s + t]
        for piece in flat:
            assert piece not in singletons

    def test_unseen_test_piece_becomes_unk(self):
        corpus = self.corpus()
        table = learn_merges(joint_word_frequencies(corpus), 5)
        vocab = build_piece_vocab(corpus, table)
        out = encode_tokens(["zz"], table, vocab, map_singletons=True)
        assert all(p in (UNK_PIECE, UNK_PIECE_FINAL) for p in out)

    def test_map_singletons_off_passes_through(self):
        corpus = self.corpus()
        table = learn_merges(joint_word_frequencies(corpus), 5)
        out = encode_tokens(["zz"], table, map_singletons=False)
        assert out == ["z", "z</w>"]

    def test_training_coverage_without_singletons(self):
        corpus = ParallelCorpus([(["aa"] * 3 + ["bb"] * 3, ["aa", "bb"])])
        table = learn_merges(joint_word_frequencies(corpus), 10)
        vocab = build_piece_vocab(corpus, table)
        encoded = encode_corpus(corpus, table, vocab, map_singletons=True)
        flat = [p for s, t in encoded.pairs for p in s + t]
        assert UNK_PIECE not in flat and UNK_PIECE_FINAL not in flat


class TestDecodePieces:
    def test_concatenation(self):
        assert decode_pieces(["lo", "w</w>"]) == ["low"]

    def test_multiple_words(self):
        assert decode_pieces(["a", "b</w>", "cd</w>"]) == ["ab", "cd"]

    def test_malformed_trailing_flushed_and_flagged(self):
        words, spans, malformed = decode_pieces_spans(["ab"])
        assert words == ["ab"]
        assert spans == [(0, 1)]
        assert malformed

    def test_well_formed_not_flagged(self):
        _, _, malformed = decode_pieces_spans(["ab</w>"])
        assert not malformed


WORD_ALPHABET = "abcdefghijklmnopqrstuvwxyzäöüß0123456789.,!?'-"


class TestRoundTrip:
    def test_fuzz_corpus_round_trip(self):
        rng_words = []
        import numpy as np

        rng = np.random.default_rng(99)
        letters = list(WORD_ALPHABET)
        for _ in range(10000):
            n = rng.integers(1, 12)
            rng_words.append("".join(rng.choice(letters, size=n)))
        freqs = Counter(rng_words)
        table = learn_merges(freqs, num_ops=300)
        for word in set(rng_words):
            assert decode_pieces(encode_word(word, table)) == [word]

    def test_sentence_round_trip(self):
        table = learn_merges({"this": 3, "is": 5, "a": 7, "test": 2}, 20)
        sentence = ["this", "is", "a", "test"]
        pieces = []
        for word in sentence:
            pieces.extend(encode_word(word, table))
        assert decode_pieces(pieces) == sentence

    @given(st.text(alphabet="abcxyz채", min_size=1, max_size=15))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, word):
        table = learn_merges({word: 3, "abc": 2, "xyz": 2}, 10)
        assert decode_pieces(encode_word(word, table)) == [word]


class TestVocabularyGrowth:
    def make_corpus(self):
        import numpy as np

        rng = np.random.default_rng(4)
        words = ["".join(rng.choice(list("abcdef"), size=rng.integers(2, 7))) for _ in range(200)]
        return Counter(words)

    def test_monotone_piece_count_and_token_count(self):
        freqs = self.make_corpus()
        table = learn_merges(freqs, num_ops=60)
        prev_pieces, prev_tokens = None, None
        for k in range(len(table) + 1):
            prefix = MergeTable(table.merges[:k])
            pieces = set()
            tokens = 0
            for word, freq in freqs.items():
                encoded = encode_word(word, prefix)
                pieces.update(encoded)
                tokens += len(encoded) * freq
            if prev_pieces is not None:
                assert len(pieces) <= prev_pieces + 1
                assert tokens <= prev_tokens
            prev_pieces, prev_tokens = len(pieces), tokens

    def test_whole_word_fraction_non_decreasing(self):
        freqs = self.make_corpus()
        table = learn_merges(freqs, num_ops=60)
        previous = -1.0
        total = sum(freqs.values())
        for k in range(0, len(table) + 1, 10):
            prefix = MergeTable(table.merges[:k])
            whole = sum(
                freq for word, freq in freqs.items() if len(encode_word(word, prefix)) == 1
            )
            fraction = whole / total
            assert fraction >= previous - 1e-12
            previous = fraction


class TestFiles:
    def test_merges_file_round_trip(self, tmp_path):
        table = learn_merges({"abab": 4, "abcd": 2}, 5)
        path = tmp_path / "merges.txt"
        table.save(path)
        first_line = path.read_text(encoding="utf-8").splitlines()[0]
        assert first_line == f"#bpe v1 {len(table)}"
        loaded = MergeTable.load(path)
        assert loaded.merges == table.merges
        assert loaded.rank == table.rank

    def test_merges_file_bad_header(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("nonsense\n")
        with pytest.raises(ValueError):
            MergeTable.load(path)

    def test_piece_vocab_round_trip(self, tmp_path):
        vocab = PieceVocab({"ab": 3, "c</w>": 1})
        path = tmp_path / "pieces.tsv"
        vocab.save(path)
        loaded = PieceVocab.load(path)
        assert loaded.counts == vocab.counts
        assert loaded.singleton_set == {"c</w>"}
