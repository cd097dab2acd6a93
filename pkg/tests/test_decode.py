import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskmt.bpe import MergeTable, PieceVocab
from deskmt.corpus import EOS_ID, UNK, Vocabulary
from deskmt.decode import (
    BpeArtifacts,
    EnsembleMember,
    EnsembleSpec,
    Hypothesis,
    _pieces_to_words,
    beam_over_steppers,
    beam_search,
    ensemble_distribution,
    replace_unks,
    translate_corpus,
    translate_sentence,
)
from deskmt.lexicon import Dictionary
from deskmt.model import ModelConfig, ModelParams, init_params


class TestEnsembleDistribution:
    def test_single_member_identity(self):
        dist = np.array([0.1, 0.2, 0.7])
        npt.assert_array_equal(ensemble_distribution([dist]), dist)

    def test_arithmetic_mean(self):
        out = ensemble_distribution([np.array([0.6, 0.4]), np.array([0.2, 0.8])])
        npt.assert_allclose(out, [0.4, 0.6])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            ensemble_distribution([np.ones(3) / 3, np.ones(4) / 4])

    @given(
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=2, max_value=8),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_mean_stays_on_simplex(self, members, size, seed):
        rng = np.random.default_rng(seed)
        dists = []
        for _ in range(members):
            raw = rng.random(size) + 1e-9
            dists.append(raw / raw.sum())
        out = ensemble_distribution(dists)
        assert np.all(out >= 0)
        assert out.sum() == pytest.approx(1.0, abs=1e-9)


class FakeStepper:
    """Scripted per-step distributions: steps[t] has shape (vocab,)."""

    def __init__(self, steps, src_len=2):
        self.steps = [np.asarray(s, dtype=float) for s in steps]
        self.src_len = src_len

    def start(self, n=1):
        return (np.zeros((n, 1)), np.zeros((n, 1)))

    def step(self, states, prev_ids):
        n = len(prev_ids)
        t = int(states[0][0, 0])
        dist = np.tile(self.steps[min(t, len(self.steps) - 1)], (n, 1))
        att = np.full((n, self.src_len), 1.0 / self.src_len)
        new_state = (np.full((n, 1), t + 1.0), np.zeros((n, 1)))
        return dist, att, new_state


def enumerate_sequences(steps, max_len):
    """Exhaustive scoring of every possible emission sequence."""
    vocab = len(steps[0])
    results = []

    def expand(prefix, logp):
        t = len(prefix)
        if prefix and prefix[-1] == EOS_ID or t == max_len:
            results.append((logp / len(prefix), prefix))
            return
        for w in range(vocab):
            expand(prefix + [w], logp + np.log(steps[min(t, len(steps) - 1)][w]))

    expand([], 0.0)
    return sorted(results, key=lambda item: (-item[0], item[1]))


class TestBeamSearch:
    STEPS = [
        [0.05, 0.1, 0.5, 0.35],
        [0.2, 0.3, 0.1, 0.4],
        [0.1, 0.6, 0.2, 0.1],
    ]

    def test_beam_one_is_greedy(self):
        hyps = beam_over_steppers([FakeStepper(self.STEPS)], beam_size=1, max_len=3)
        assert len(hyps) == 1
        greedy = []
        for t in range(3):
            greedy.append(int(np.argmax(self.STEPS[t])))
            if greedy[-1] == EOS_ID:
                break
        assert hyps[0].tokens == greedy

    def test_identical_members_match_single_model(self):
        single = beam_over_steppers([FakeStepper(self.STEPS)], beam_size=3, max_len=3)
        triple = beam_over_steppers([FakeStepper(self.STEPS)] * 3, beam_size=3, max_len=3)
        assert [h.tokens for h in single] == [h.tokens for h in triple]
        npt.assert_allclose(
            [h.log_prob for h in single], [h.log_prob for h in triple], atol=1e-12
        )

    def test_full_beam_matches_exhaustive_enumeration(self):
        steps = [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]]
        max_len = 2
        hyps = beam_over_steppers([FakeStepper(steps)], beam_size=64, max_len=max_len)
        expected = enumerate_sequences(steps, max_len)
        got = [(h.normalized_score, h.tokens) for h in hyps]
        assert len(got) == len(expected)
        for (gs, gt), (es, et) in zip(got, expected):
            assert gt == et
            assert gs == pytest.approx(es, abs=1e-12)

    def test_beam_monotonicity(self):
        rng = np.random.default_rng(0)
        steps = rng.random((4, 5)) + 0.05
        steps /= steps.sum(axis=1, keepdims=True)
        best = []
        for beam in (1, 2, 3, 4, 8):
            hyps = beam_over_steppers([FakeStepper(list(steps))], beam_size=beam, max_len=4)
            best.append(hyps[0].normalized_score)
        for a, b in zip(best, best[1:]):
            assert b >= a - 1e-12

    def test_attention_length_matches_emissions(self):
        hyps = beam_over_steppers([FakeStepper(self.STEPS)], beam_size=2, max_len=3)
        for h in hyps:
            assert len(h.attentions) == len(h.tokens)

    def test_single_member_attention_is_exact(self):
        params = init_params(ModelConfig(8, 8, 4, 5, 5, seed=2))
        spec = EnsembleSpec([EnsembleMember(params, "v", "only")])
        hyps = beam_search(spec, [2, 3, 4], beam_size=2, max_len=4)
        from deskmt.model import Stepper

        stepper = Stepper(params, [2, 3, 4])
        dist, att, _ = stepper.step(stepper.start(1), [EOS_ID])
        npt.assert_array_equal(hyps[0].attentions[0], att[0])

    def test_beam_size_validated(self):
        with pytest.raises(ValueError):
            beam_over_steppers([FakeStepper(self.STEPS)], beam_size=0, max_len=3)


class TestEnsembleSpec:
    def test_vocab_hash_mismatch_rejected(self):
        params = init_params(ModelConfig(8, 8, 4, 5, 5))
        with pytest.raises(ValueError, match="vocabulary"):
            EnsembleSpec(
                [EnsembleMember(params, "aaa", "m1"), EnsembleMember(params, "bbb", "m2")]
            )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            EnsembleSpec([])


class TestReplaceUnks:
    def test_dictionary_branch(self):
        out = replace_unks(
            ["the", UNK],
            [np.array([0.2, 0.8]), np.array([0.1, 0.9])],
            ["das", "Haus"],
            Dictionary({"Haus": "house"}),
        )
        assert out == ["the", "house"]

    def test_copy_backoff_branch(self):
        out = replace_unks(
            [UNK], [np.array([0.9, 0.1])], ["Gromit", "und"], Dictionary({})
        )
        assert out == ["Gromit"]

    def test_no_unk_unchanged(self):
        words = ["a", "b", "c"]
        atts = [np.array([1.0])] * 3
        assert replace_unks(words, atts, ["x"], Dictionary({"x": "y"})) == words

    def test_no_dictionary_copies(self):
        out = replace_unks([UNK], [np.array([1.0])], ["Zürich"], None)
        assert out == ["Zürich"]


class TestPiecesToWords:
    def test_plain_words(self):
        atts = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.5, 0.5])]
        words, word_atts = _pieces_to_words(["lo", "w</w>", "cat</w>"], atts)
        assert words == ["low", "cat"]
        npt.assert_array_equal(word_atts[0], atts[1])  # closing piece's attention
        npt.assert_array_equal(word_atts[1], atts[2])

    def test_unk_piece_marks_whole_word(self):
        atts = [np.array([0.9, 0.1]), np.array([0.2, 0.8])]
        words, word_atts = _pieces_to_words(["ab", "<unk></w>"], atts)
        assert words == [UNK]
        npt.assert_array_equal(word_atts[0], atts[1])

    def test_highest_attention_unk_step_wins(self):
        atts = [np.array([0.6, 0.4]), np.array([0.1, 0.9]), np.array([0.5, 0.5])]
        words, word_atts = _pieces_to_words(["<unk>", "<unk>", "x</w>"], atts)
        assert words == [UNK]
        npt.assert_array_equal(word_atts[0], atts[1])  # max attention 0.9


def vocab_from(words):
    full = ["<unk>", "</s>"] + words
    return Vocabulary({w: i for i, w in enumerate(full)}, full)


class CopyStepper:
    """Emits the source ids one by one, then sentence-end, with sharp attention."""

    def __init__(self, source_ids, vocab_size):
        self.source_ids = list(source_ids)
        self.vocab_size = vocab_size

    def start(self, n=1):
        return (np.zeros((n, 1)), np.zeros((n, 1)))

    def step(self, states, prev_ids):
        n = len(prev_ids)
        t = int(states[0][0, 0])
        dist = np.full((n, self.vocab_size), 1e-9)
        target = self.source_ids[t] if t < len(self.source_ids) else EOS_ID
        dist[:, target] = 1.0
        dist /= dist.sum(axis=1, keepdims=True)
        att = np.full((n, len(self.source_ids)), 1e-6)
        att[:, min(t, len(self.source_ids) - 1)] = 1.0
        att /= att.sum(axis=1, keepdims=True)
        return dist, att, (np.full((n, 1), t + 1.0), np.zeros((n, 1)))


class TestTranslateCorpus:
    def fake_spec_files(self, tmp_path, lines):
        src = tmp_path / "in.txt"
        src.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        return src, tmp_path / "out.txt"

    def test_empty_file(self, tmp_path, monkeypatch):
        params = init_params(ModelConfig(8, 8, 4, 5, 5))
        spec = EnsembleSpec([EnsembleMember(params, "v", "m")])
        vocab = vocab_from(["a", "b"])
        src, out = self.fake_spec_files(tmp_path, [])
        translate_corpus(spec, src, out, vocab, vocab)
        assert out.read_text() == ""

    def test_deterministic_bytes(self, tmp_path):
        params = init_params(ModelConfig(8, 8, 4, 5, 5, seed=4))
        spec = EnsembleSpec([EnsembleMember(params, "v", "m")])
        vocab = vocab_from(["a", "b", "c", "d", "e", "f"])
        src, out1 = self.fake_spec_files(tmp_path, ["a b c", "d e", "f a"])
        translate_corpus(spec, src, out1, vocab, vocab, beam_size=3)
        out2 = tmp_path / "out2.txt"
        translate_corpus(spec, src, out2, vocab, vocab, beam_size=3)
        assert out1.read_bytes() == out2.read_bytes()

    def test_scores_sidecar(self, tmp_path):
        params = init_params(ModelConfig(8, 8, 4, 5, 5, seed=4))
        spec = EnsembleSpec([EnsembleMember(params, "v", "m")])
        vocab = vocab_from(["a", "b", "c", "d", "e", "f"])
        src, out = self.fake_spec_files(tmp_path, ["a b", "c"])
        translate_corpus(spec, src, out, vocab, vocab, scores_path=tmp_path / "scores.tsv")
        rows = (tmp_path / "scores.tsv").read_text().splitlines()
        assert len(rows) == 2
        assert rows[0].split("\t")[0] == "1"


class TestTranslateSentenceUnkPipeline:
    def test_word_level_unk_copy(self, monkeypatch):
        # stepper emits unk aligned with source position 2 (the OOV)
        vocab = vocab_from(["alpha", "beta", "gamma"])
        source = ["alpha", "Qxkz", "beta"]
        ids = vocab.encode(source)
        assert ids[1] == 0  # OOV becomes unk

        import deskmt.decode as decode_module

        monkeypatch.setattr(
            decode_module, "Stepper", lambda params, src_ids: CopyStepper(src_ids, len(vocab))
        )
        params = init_params(ModelConfig(len(vocab), len(vocab), 4, 5, 5))
        spec = EnsembleSpec([EnsembleMember(params, "v", "m")])
        out, _ = translate_sentence(spec, source, vocab, vocab, dictionary=Dictionary({}))
        assert out == ["alpha", "Qxkz", "beta"]
        out2, _ = translate_sentence(
            spec, source, vocab, vocab, dictionary=Dictionary({"Qxkz": "Smith"})
        )
        assert out2 == ["alpha", "Smith", "beta"]

    def test_bpe_system_passes_word_through(self, monkeypatch):
        # source word splits into pieces; the emitted unk piece maps back to
        # the right source WORD via the piece-to-word position map
        merges = MergeTable([])
        piece_vocab = PieceVocab({"a</w>": 5, "b</w>": 5})
        artifacts = BpeArtifacts(merges, piece_vocab, map_singletons=True)
        vocab = vocab_from(["a</w>", "b</w>", "<unk></w>"])

        import deskmt.decode as decode_module

        monkeypatch.setattr(
            decode_module, "Stepper", lambda params, src_ids: CopyStepper(src_ids, len(vocab))
        )
        params = init_params(ModelConfig(len(vocab), len(vocab), 4, 5, 5))
        spec = EnsembleSpec([EnsembleMember(params, "v", "m")])
        out, _ = translate_sentence(
            spec, ["a", "Zq", "b"], vocab, vocab, bpe=artifacts, dictionary=Dictionary({})
        )
        assert out == ["a", "Zq", "b"]
