"""Tokenizer, hint augmentation, sample typing, and synthetic features."""

import numpy as np
import pytest

from hintasr.data import (
    ManifestEntry,
    OovCharacterError,
    SynthConfig,
    TrainingSample,
    Vocab,
    detokenize,
    duplicate_char_augment,
    generate_corpus,
    make_training_sample,
    make_word_pools,
    read_manifest,
    soundalike_augment,
    synth_features,
    tokenize,
)
from hintasr.tensor import ContractError


VOCAB = Vocab.default()


def is_subsequence(needle, haystack):
    it = iter(haystack)
    return all(ch in it for ch in needle)


class TestTokenizer:
    def test_empty(self):
        assert tokenize("", VOCAB) == []

    def test_cat_round_trips(self):
        ids = tokenize("cat", VOCAB)
        assert ids == [VOCAB.id_of("c"), VOCAB.id_of("a"), VOCAB.id_of("t")]
        assert detokenize(ids, VOCAB) == "cat"

    def test_full_vocab_round_trip(self):
        text = "".join(VOCAB.symbols)
        assert detokenize(tokenize(text, VOCAB), VOCAB) == text

    def test_never_emits_blank(self):
        assert 0 not in tokenize("hello world 'quoted'", VOCAB)

    def test_out_of_vocab_names_character(self):
        with pytest.raises(OovCharacterError, match="é"):
            tokenize("café", VOCAB)

    def test_lowercases(self):
        assert tokenize("CAT", VOCAB) == tokenize("cat", VOCAB)

    def test_random_round_trip_property(self):
        rng = np.random.default_rng(5)
        symbols = VOCAB.symbols
        for _ in range(200):
            s = "".join(symbols[i] for i in rng.integers(0, len(symbols), size=rng.integers(1, 20)))
            assert detokenize(tokenize(s, VOCAB), VOCAB) == s


class TestDuplicateAugment:
    def test_cat_to_catt(self):
        # seeds chosen so a single duplication lands on the final character
        for seed in range(50):
            out = duplicate_char_augment("cat", np.random.default_rng(seed))
            if out == "catt":
                return
        pytest.fail("no seed produced catt")

    def test_triple_to_tripple(self):
        for seed in range(80):
            out = duplicate_char_augment("triple", np.random.default_rng(seed))
            if out == "tripple":
                return
        pytest.fail("no seed produced tripple")

    def test_supersequence_property(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            word = "".join("abcdefghijklmnopqrstuvwxyz"[i] for i in rng.integers(0, 26, size=n))
            out = duplicate_char_augment(word, rng)
            assert len(out) > len(word)
            assert is_subsequence(word, out)

    def test_deterministic_under_seed(self):
        a = duplicate_char_augment("banana", np.random.default_rng(42))
        b = duplicate_char_augment("banana", np.random.default_rng(42))
        assert a == b


class TestSoundalikeAugment:
    def test_cat_to_kat(self):
        # only the c->k rule applies, so any seed gives kat
        out, changed = soundalike_augment("cat", np.random.default_rng(0))
        assert (out, changed) == ("kat", True)

    def test_hay_to_hey(self):
        out, changed = soundalike_augment("hay", np.random.default_rng(3))
        assert (out, changed) == ("hey", True)

    def test_ginger_variant(self):
        outs = {soundalike_augment("ginger", np.random.default_rng(s))[0] for s in range(20)}
        assert "jinger" in outs
        assert outs <= {"jinger", "ginjer"}

    def test_no_applicable_rule_flagged(self):
        out, changed = soundalike_augment("mmm", np.random.default_rng(0))
        assert out == "mmm"
        assert changed is False


class TestSynthFeatures:
    def test_zero_noise_forced_duration(self):
        cfg = SynthConfig(feature_dim=8, noise_sigma=0.0, durations=(2,), dataset_seed=9)
        feats = synth_features([3], cfg, np.random.default_rng(0), vocab_size=VOCAB.size)
        assert feats.shape == (2, 8)
        assert np.array_equal(feats.array[0], feats.array[1])

    def test_deterministic(self):
        cfg = SynthConfig(feature_dim=8, noise_sigma=0.5, dataset_seed=9)
        a = synth_features([1, 2, 3], cfg, np.random.default_rng(4), VOCAB.size)
        b = synth_features([1, 2, 3], cfg, np.random.default_rng(4), VOCAB.size)
        assert np.array_equal(a.array, b.array)

    def test_distinct_tokens_distinct_frames(self):
        cfg = SynthConfig(feature_dim=8, noise_sigma=0.0, durations=(2,), dataset_seed=9)
        feats = synth_features([1, 2], cfg, np.random.default_rng(0), VOCAB.size).array
        assert np.linalg.norm(feats[0] - feats[2]) > 0

    def test_length_is_sum_of_durations(self):
        cfg = SynthConfig(feature_dim=8, noise_sigma=0.1, durations=(2, 3, 4), dataset_seed=1)
        rng = np.random.default_rng(11)
        feats = synth_features([1, 2, 3, 4, 5], cfg, rng, VOCAB.size)
        assert 2 * 5 <= feats.shape[0] <= 4 * 5

    def test_feature_dim_floor(self):
        with pytest.raises(ContractError):
            SynthConfig(feature_dim=4)


class TestTrainingSamples:
    SYNTH = SynthConfig(feature_dim=8, noise_sigma=0.1, dataset_seed=77)
    POOL = ["zebra", "quokka", "lemur"]

    def test_original_has_no_hints(self):
        s = make_training_sample("the cat sat", (1.0, 0.0, 0.0), np.random.default_rng(0),
                                 VOCAB, self.SYNTH, self.POOL)
        assert s.sample_type == "original"
        assert s.hints == []

    def test_negative_only_disjoint_from_text(self):
        s = make_training_sample("the cat sat", (0.0, 1.0, 0.0), np.random.default_rng(1),
                                 VOCAB, self.SYNTH, self.POOL)
        assert s.sample_type == "negative_only"
        assert s.hints
        assert all(h in self.POOL for h in s.hints)
        assert all(h not in "the cat sat" for h in s.hints)

    def test_mixed_has_positive_and_negative(self):
        s = make_training_sample("gato perro nube", (0.0, 0.0, 1.0), np.random.default_rng(2),
                                 VOCAB, self.SYNTH, self.POOL)
        assert s.sample_type == "mixed"
        assert any(h in "gato perro nube" for h in s.hints)
        assert any(h not in "gato perro nube" for h in s.hints)

    def test_type_weights_must_sum_to_one(self):
        with pytest.raises(ContractError):
            make_training_sample("abc", (0.5, 0.2, 0.2), np.random.default_rng(0),
                                 VOCAB, self.SYNTH, self.POOL)

    def test_empty_text_falls_back_to_original(self):
        s = make_training_sample("x", (0.0, 0.0, 1.0), np.random.default_rng(3),
                                 VOCAB, self.SYNTH, [])
        assert s.sample_type == "original"

    def test_invariants_hold_over_sweep(self):
        # every generated sample satisfies its type invariant (10k draws)
        rng = np.random.default_rng(9)
        texts = ["muna lopa", "tesi", "ribo kelu vatu", "sona muna"]
        for i in range(10000):
            text = texts[i % len(texts)]
            s = make_training_sample(text, (1 / 3, 1 / 3, 1 / 3), rng, VOCAB,
                                     self.SYNTH, self.POOL)
            if s.sample_type == "original":
                assert s.hints == []
            elif s.sample_type == "negative_only":
                assert s.hints and all(h not in text for h in s.hints)
            else:
                assert any(h in text for h in s.hints)
                assert any(h not in text for h in s.hints)

    def test_augmented_hints_differ_but_deterministic(self):
        rng_a = np.random.default_rng(21)
        rng_b = np.random.default_rng(21)
        text = "barune kilima soduva"
        a = make_training_sample(text, (0.0, 0.0, 1.0), rng_a, VOCAB, self.SYNTH, self.POOL)
        b = make_training_sample(text, (0.0, 0.0, 1.0), rng_b, VOCAB, self.SYNTH, self.POOL)
        assert a.hints == b.hints
        assert np.array_equal(a.features.array, b.features.array)


class TestCorpus:
    def test_pools_disjoint(self):
        train, neg, oov = make_word_pools(np.random.default_rng(3), 20, 10, 5)
        assert len(set(train) & set(neg)) == 0
        assert len(set(train) & set(oov)) == 0
        assert len(set(neg) & set(oov)) == 0

    def test_generate_corpus_reproducible(self, tmp_path):
        a = generate_corpus(tmp_path / "a", seed=5, n_train_utts=30, n_test_hintfree=6,
                            n_train_words=12, n_negative_words=6, n_oov_words=4)
        b = generate_corpus(tmp_path / "b", seed=5, n_train_utts=30, n_test_hintfree=6,
                            n_train_words=12, n_negative_words=6, n_oov_words=4)
        for key in a:
            pa = (tmp_path / "a" / a[key].split("/")[-1]).read_bytes()
            pb = (tmp_path / "b" / b[key].split("/")[-1]).read_bytes()
            assert pa == pb, key

    def test_distinct_seeds_distinct_manifests(self, tmp_path):
        generate_corpus(tmp_path / "a", seed=5, n_train_utts=10, n_test_hintfree=2,
                        n_train_words=12, n_negative_words=6, n_oov_words=4)
        generate_corpus(tmp_path / "b", seed=6, n_train_utts=10, n_test_hintfree=2,
                        n_train_words=12, n_negative_words=6, n_oov_words=4)
        assert (tmp_path / "a" / "train_manifest.jsonl").read_bytes() != \
               (tmp_path / "b" / "train_manifest.jsonl").read_bytes()

    def test_oov_words_once_in_test_set(self, tmp_path):
        paths = generate_corpus(tmp_path / "c", seed=7, n_train_utts=10, n_test_hintfree=5,
                                n_train_words=12, n_negative_words=6, n_oov_words=4)
        oov = (tmp_path / "c" / "eval_hints.txt").read_text().split()
        test_text = " ".join(e.text for e in read_manifest(paths["test_manifest"]))
        train_text = " ".join(e.text for e in read_manifest(paths["train_manifest"]))
        for w in oov:
            assert test_text.split().count(w) == 1
            assert w not in train_text.split()

    def test_manifest_line_count(self, tmp_path):
        paths = generate_corpus(tmp_path / "d", seed=8, n_train_utts=17, n_test_hintfree=3,
                                n_train_words=12, n_negative_words=6, n_oov_words=2)
        assert len(read_manifest(paths["train_manifest"])) == 17
        assert len(read_manifest(paths["test_manifest"])) == 3 + 2
