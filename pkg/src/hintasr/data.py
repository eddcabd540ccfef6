"""Character tokenizer, synthetic utterance/feature generation, and the
speech-hint augmentation pipeline with its three sample types."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError, Tensor


class OovCharacterError(ValueError):
    """Input text contains a character outside the vocabulary."""


@dataclass(frozen=True)
class Vocab:
    """Bijective symbol<->id map; id 0 is reserved for blank."""

    symbols: tuple

    @classmethod
    def default(cls) -> "Vocab":
        return cls(symbols=tuple("abcdefghijklmnopqrstuvwxyz") + (" ", "'"))

    @property
    def size(self) -> int:
        return len(self.symbols) + 1  # +1 for blank

    def id_of(self, ch: str) -> int:
        try:
            return self.symbols.index(ch) + 1
        except ValueError:
            raise OovCharacterError(f"character {ch!r} not in vocabulary") from None

    def char_of(self, i: int) -> str:
        if not (1 <= i <= len(self.symbols)):
            raise IndexError(f"token id {i} outside [1, {len(self.symbols)}]")
        return self.symbols[i - 1]


def tokenize(text: str, vocab: Vocab) -> list:
    """Per-character encoding; lowercases first, never emits the blank id."""
    return [vocab.id_of(ch) for ch in text.lower()]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return "".join(vocab.char_of(int(i)) for i in ids)


def duplicate_char_augment(word: str, rng: np.random.Generator) -> str:
    """Duplicate one or more characters, e.g. cat -> catt.

    The output is strictly longer and contains the input as a subsequence.
    """
    if len(word) < 1:
        raise ContractError("duplicate_char_augment: empty word")
    n_dups = 1
    if len(word) >= 5 and rng.random() < 0.3:
        n_dups = 2
    positions = sorted(rng.integers(0, len(word), size=n_dups).tolist(), reverse=True)
    out = word
    for p in positions:
        out = out[: p + 1] + out[p] + out[p + 1:]
    return out


DEFAULT_SOUNDALIKE_TABLE = (
    ("k", "c"), ("c", "k"),
    ("j", "g"), ("g", "j"),
    ("s", "c"), ("c", "s"),
    ("ay", "ey"), ("ey", "ay"),
)


def soundalike_augment(word: str, rng: np.random.Generator,
                       table=DEFAULT_SOUNDALIKE_TABLE):
    """Rewrite substrings toward similar-sounding spellings (cat -> kat).

    Applies between 1 and len(applicable) of the directed rewrites, each at a
    single random occurrence. Returns (word, changed); changed is False when
    no rule matched.
    """
    applicable = [(pat, rep) for pat, rep in table if pat in word]
    if not applicable:
        return word, False
    n_rules = int(rng.integers(1, len(applicable) + 1))
    chosen = [applicable[i] for i in rng.choice(len(applicable), size=n_rules, replace=False)]
    out = word
    for pat, rep in chosen:
        spots = []
        start = 0
        while True:
            k = out.find(pat, start)
            if k < 0:
                break
            spots.append(k)
            start = k + 1
        if not spots:
            continue  # an earlier rewrite consumed this pattern
        k = spots[int(rng.integers(0, len(spots)))]
        out = out[:k] + rep + out[k + len(pat):]
    return out, True


def augment_hint_word(word: str, rng: np.random.Generator,
                      table=DEFAULT_SOUNDALIKE_TABLE, max_tries: int = 4) -> str:
    """Produce a variant that differs from the source word."""
    for _ in range(max_tries):
        if rng.random() < 0.5:
            cand, changed = soundalike_augment(word, rng, table)
            if changed and cand != word:
                return cand
        else:
            return duplicate_char_augment(word, rng)
    return duplicate_char_augment(word, rng)


@dataclass
class SynthConfig:
    """Synthetic acoustics: one codebook vector per token, repeated for a
    random duration and corrupted with Gaussian noise."""

    feature_dim: int = 16
    noise_sigma: float = 0.3
    durations: tuple = (2, 3, 4)
    dataset_seed: int = 1234

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ContractError("SynthConfig: feature_dim must be at least 8")


_codebook_cache: dict = {}


def token_codebook(vocab_size: int, synth_cfg: SynthConfig) -> np.ndarray:
    key = (vocab_size, synth_cfg.feature_dim, synth_cfg.dataset_seed)
    cb = _codebook_cache.get(key)
    if cb is None:
        cb_rng = np.random.default_rng(synth_cfg.dataset_seed)
        cb = cb_rng.normal(size=(vocab_size, synth_cfg.feature_dim))
        _codebook_cache[key] = cb
    return cb


def synth_features(tokens: Sequence[int], synth_cfg: SynthConfig,
                   rng: np.random.Generator, vocab_size: int) -> Tensor:
    """[T, F] features for a token sequence; T is the sum of per-token durations."""
    cb = token_codebook(vocab_size, synth_cfg)
    frames = []
    for tok in tokens:
        dur = int(synth_cfg.durations[rng.integers(0, len(synth_cfg.durations))])
        block = np.tile(cb[int(tok)], (dur, 1))
        if synth_cfg.noise_sigma > 0:
            block = block + synth_cfg.noise_sigma * rng.normal(size=block.shape)
        frames.append(block)
    return Tensor(np.vstack(frames))


@dataclass
class TrainingSample:
    features: Tensor
    target_tokens: list
    hints: list                   # hint strings, already augmented where applicable
    sample_type: str              # original | negative_only | mixed
    text: str = ""

    def __post_init__(self):
        if self.sample_type not in ("original", "negative_only", "mixed"):
            raise ContractError(f"unknown sample type {self.sample_type!r}")
        if self.sample_type == "original" and self.hints:
            raise ContractError("original samples carry no hints")


def _pick_negatives(pool: Sequence[str], text: str, rng: np.random.Generator,
                    count: int) -> list:
    out = []
    candidates = [w for w in pool if w not in text]
    if not candidates:
        return out
    idx = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    for i in np.atleast_1d(idx):
        out.append(candidates[int(i)])
    return out


def make_training_sample(text: str, type_weights, rng: np.random.Generator,
                         vocab: Vocab, synth_cfg: SynthConfig,
                         negative_pool: Sequence[str] = (),
                         max_positive: int = 3,
                         feature_rng: Optional[np.random.Generator] = None) -> TrainingSample:
    """Draw a sample type and build hints accordingly.

    original: no hints. negative_only: hints from a disjoint pool, none a
    substring of the text. mixed: at least one word from the text (kept exact
    so the positive is verifiable; the rest may be augmented) plus at least
    one negative.

    feature_rng, when given, decouples the acoustics from the hint draws so
    an utterance keeps the same features while hints vary epoch to epoch.
    """
    weights = np.asarray(type_weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9 or len(weights) != 3:
        raise ContractError("type_weights must be three values summing to 1")
    kind = ("original", "negative_only", "mixed")[int(rng.choice(3, p=weights))]
    words = [w for w in text.split() if w]

    hints: list = []
    if kind == "negative_only":
        hints = _pick_negatives(negative_pool, text, rng, int(rng.integers(1, 5)))
        if not hints:
            kind = "original"
    elif kind == "mixed":
        negatives = _pick_negatives(negative_pool, text, rng, int(rng.integers(1, 4)))
        if not words or not negatives:
            kind = "original"
        else:
            n_pos = int(rng.integers(1, min(max_positive, len(words)) + 1))
            order = rng.permutation(len(words))[:n_pos]
            positives = [words[int(i)] for i in order]
            for i in range(1, len(positives)):
                if rng.random() < 0.7:
                    positives[i] = augment_hint_word(positives[i], rng)
            hints = positives + negatives
    if kind == "original":
        hints = []

    tokens = tokenize(text, vocab)
    features = synth_features(tokens, synth_cfg, feature_rng if feature_rng is not None else rng,
                              vocab.size)
    return TrainingSample(features=features, target_tokens=tokens, hints=hints,
                          sample_type=kind, text=text)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def make_word(rng: np.random.Generator, syllables: Optional[int] = None) -> str:
    """Pronounceable CV(C) word, lowercase, 2 or 3 syllables."""
    n = syllables if syllables is not None else int(rng.integers(2, 4))
    parts = []
    for _ in range(n):
        parts.append(_CONSONANTS[rng.integers(0, len(_CONSONANTS))])
        parts.append(_VOWELS[rng.integers(0, len(_VOWELS))])
    if rng.random() < 0.4:
        parts.append(_CONSONANTS[rng.integers(0, len(_CONSONANTS))])
    return "".join(parts)


def make_word_pools(rng: np.random.Generator, n_train: int, n_negative: int,
                    n_oov: int):
    """Three disjoint word pools: in-vocabulary training words, negative-hint
    words, and held-out rare words for evaluation."""
    seen = set()
    pools = []
    for count in (n_train, n_negative, n_oov):
        pool = []
        while len(pool) < count:
            w = make_word(rng)
            if w in seen:
                continue
            seen.add(w)
            pool.append(w)
        pools.append(pool)
    return tuple(pools)


@dataclass
class ManifestEntry:
    utterance_id: str
    text: str
    seed: int


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps({"utterance_id": e.utterance_id, "text": e.text,
                                "seed": e.seed}) + "\n")


def read_manifest(path) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            entries.append(ManifestEntry(d["utterance_id"], d["text"], int(d["seed"])))
    return entries


def write_wordlist(path, words: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for w in words:
            f.write(w + "\n")


def read_wordlist(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def generate_corpus(out_dir, seed: int, n_train_utts: int = 2000,
                    n_test_hintfree: int = 50, n_train_words: int = 60,
                    n_negative_words: int = 30, n_oov_words: int = 20,
                    words_per_utt=(1, 2)) -> dict:
    """Write train/test manifests and hint pools under out_dir.

    Test utterances come in two flavors: hint-free (training words only) and
    one per held-out rare word, that word appearing exactly once in the test
    set. Deterministic given the seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    train_words, negative_words, oov_words = make_word_pools(
        rng, n_train_words, n_negative_words, n_oov_words)

    def sample_text(word_source):
        n = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
        idx = rng.choice(len(word_source), size=n, replace=False)
        return " ".join(word_source[int(i)] for i in np.atleast_1d(idx))

    train_entries = [
        ManifestEntry(f"train-{i:05d}", sample_text(train_words), int(rng.integers(0, 2**31)))
        for i in range(n_train_utts)
    ]
    test_entries = [
        ManifestEntry(f"test-free-{i:04d}", sample_text(train_words), int(rng.integers(0, 2**31)))
        for i in range(n_test_hintfree)
    ]
    for k, oov in enumerate(oov_words):
        companion = train_words[int(rng.integers(0, len(train_words)))]
        text = f"{companion} {oov}" if rng.random() < 0.5 else f"{oov} {companion}"
        test_entries.append(ManifestEntry(f"test-oov-{k:04d}", text, int(rng.integers(0, 2**31))))

    write_manifest(out_dir / "train_manifest.jsonl", train_entries)
    write_manifest(out_dir / "test_manifest.jsonl", test_entries)
    write_wordlist(out_dir / "negative_pool.txt", negative_words)
    write_wordlist(out_dir / "eval_hints.txt", oov_words)
    write_wordlist(out_dir / "train_words.txt", train_words)
    return {
        "train_manifest": str(out_dir / "train_manifest.jsonl"),
        "test_manifest": str(out_dir / "test_manifest.jsonl"),
        "negative_pool": str(out_dir / "negative_pool.txt"),
        "eval_hints": str(out_dir / "eval_hints.txt"),
        "train_words": str(out_dir / "train_words.txt"),
    }


def sample_for_entry(entry: ManifestEntry, epoch: int, type_weights,
                     vocab: Vocab, synth_cfg: SynthConfig,
                     negative_pool: Sequence[str]) -> TrainingSample:
    """Materialize the training sample for a manifest row.

    Hints are drawn on-the-fly per (entry, epoch); the acoustics are fixed per
    entry, like real audio would be, and match features_for_entry.
    """
    hint_rng = np.random.default_rng([synth_cfg.dataset_seed, entry.seed, epoch, 1])
    feature_rng = np.random.default_rng([synth_cfg.dataset_seed, entry.seed, 0])
    return make_training_sample(entry.text, type_weights, hint_rng, vocab, synth_cfg,
                                negative_pool=negative_pool, feature_rng=feature_rng)


def features_for_entry(entry: ManifestEntry, vocab: Vocab,
                       synth_cfg: SynthConfig) -> Tensor:
    """Evaluation-time features, deterministic in (dataset seed, entry seed)."""
    rng = np.random.default_rng([synth_cfg.dataset_seed, entry.seed, 0])
    return synth_features(tokenize(entry.text, vocab), synth_cfg, rng, vocab.size)
