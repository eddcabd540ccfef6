"""Evaluation metrics: word error rate, relative WER reduction, and
hint (OOV) transcription accuracy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence


@dataclass
class WerCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    def __add__(self, other: "WerCounts") -> "WerCounts":
        return WerCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_words + other.ref_words,
        )

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def wer(self) -> float:
        # Empty reference: 0 for an empty hypothesis, else 100 per inserted word.
        if self.ref_words == 0:
            return 100.0 * self.insertions
        return 100.0 * self.errors / self.ref_words


def word_error_rate(hyp: str, ref: str):
    """Word-level Levenshtein with uniform costs; returns (wer_percent, counts)."""
    h = hyp.split()
    r = ref.split()
    n, m = len(r), len(h)
    # dp[i][j] = (cost, subs, dels, ins) aligning r[:i] with h[:j]
    dp = [[None] * (m + 1) for _ in range(n + 1)]
    dp[0][0] = (0, 0, 0, 0)
    for j in range(1, m + 1):
        c = dp[0][j - 1]
        dp[0][j] = (c[0] + 1, c[1], c[2], c[3] + 1)
    for i in range(1, n + 1):
        c = dp[i - 1][0]
        dp[i][0] = (c[0] + 1, c[1], c[2] + 1, c[3])
        for j in range(1, m + 1):
            if r[i - 1] == h[j - 1]:
                best = dp[i - 1][j - 1]
            else:
                sub = dp[i - 1][j - 1]
                best = (sub[0] + 1, sub[1] + 1, sub[2], sub[3])
            dele = dp[i - 1][j]
            if dele[0] + 1 < best[0]:
                best = (dele[0] + 1, dele[1], dele[2] + 1, dele[3])
            ins = dp[i][j - 1]
            if ins[0] + 1 < best[0]:
                best = (ins[0] + 1, ins[1], ins[2], ins[3] + 1)
            dp[i][j] = best
    _, subs, dels, ins = dp[n][m]
    counts = WerCounts(subs, dels, ins, n)
    return counts.wer(), counts


def werr(wer_with: float, wer_baseline: float) -> Optional[float]:
    """Relative WER reduction vs a baseline; positive means improvement.

    Returns None (not applicable) for a zero baseline.
    """
    if wer_baseline <= 0:
        return None
    return (wer_baseline - wer_with) / wer_baseline * 100.0


def _phrase_in(words: Sequence[str], phrase: Sequence[str]) -> bool:
    k = len(phrase)
    if k == 0:
        return False
    return any(list(words[i: i + k]) == list(phrase) for i in range(len(words) - k + 1))


def oov_accuracy(hyps: Sequence[str], refs: Sequence[str], hints: Sequence[str]):
    """Share of hint phrases present in a reference that the hypothesis got right.

    Word-boundary matching, exact spelling. Returns (percent, present, correct);
    percent is None when no hint occurs in any reference.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"oov_accuracy: {len(hyps)} hypotheses vs {len(refs)} references")
    present = 0
    correct = 0
    hint_words = [h.split() for h in hints if h.strip()]
    for hyp, ref in zip(hyps, refs):
        rw = ref.split()
        hw = hyp.split()
        for phrase in hint_words:
            if _phrase_in(rw, phrase):
                present += 1
                if _phrase_in(hw, phrase):
                    correct += 1
    if present == 0:
        return None, 0, 0
    return 100.0 * correct / present, present, correct


@dataclass
class EvalReport:
    wer: float
    counts: WerCounts
    werr: Optional[float] = None
    oov_accuracy: Optional[float] = None
    hints_present: int = 0
    hints_correct: int = 0
    utterances: int = 0

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "werr": self.werr,
            "oov_accuracy": self.oov_accuracy,
            "substitutions": self.counts.substitutions,
            "deletions": self.counts.deletions,
            "insertions": self.counts.insertions,
            "reference_words": self.counts.ref_words,
            "hints_present": self.hints_present,
            "hints_correct": self.hints_correct,
            "utterances": self.utterances,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.2f}"

        lines = [
            f"{'utterances':<18}{self.utterances}",
            f"{'WER %':<18}{fmt(self.wer)}",
            f"{'WERR %':<18}{fmt(self.werr)}",
            f"{'OOV accuracy %':<18}{fmt(self.oov_accuracy)}",
            f"{'sub/del/ins':<18}{self.counts.substitutions}/{self.counts.deletions}/{self.counts.insertions}",
            f"{'reference words':<18}{self.counts.ref_words}",
            f"{'hints present':<18}{self.hints_present}",
            f"{'hints correct':<18}{self.hints_correct}",
        ]
        return "\n".join(lines)


def evaluate_transcripts(hyps: Sequence[str], refs: Sequence[str],
                         hints: Sequence[str] = (),
                         baseline_wer: Optional[float] = None) -> EvalReport:
    if len(hyps) != len(refs):
        raise ValueError(f"evaluate_transcripts: {len(hyps)} hypotheses vs {len(refs)} references")
    total = WerCounts()
    for hyp, ref in zip(hyps, refs):
        _, counts = word_error_rate(hyp, ref)
        total = total + counts
    wer = total.wer()
    acc, present, corr = oov_accuracy(hyps, refs, hints) if hints else (None, 0, 0)
    return EvalReport(
        wer=wer,
        counts=total,
        werr=None if baseline_wer is None else werr(wer, baseline_wer),
        oov_accuracy=acc,
        hints_present=present,
        hints_correct=corr,
        utterances=len(refs),
    )
