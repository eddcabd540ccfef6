"""Standalone driver for the end-to-end biasing experiment (acceptance 5).

Trains a toy model on a synthetic corpus, decodes the test set in the four
hinting configurations, and reports WER/WERR/OOV so noise level, learning
rate, and fusion weight can be tuned before freezing the acceptance test.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hintasr.data import (SynthConfig, Vocab, features_for_entry, generate_corpus,
                          read_manifest, read_wordlist, tokenize, detokenize)
from hintasr.decode import build_hint_trie, greedy_decode
from hintasr.metrics import evaluate_transcripts, werr, oov_accuracy
from hintasr.model import ModelConfig
from hintasr.train import OptimConfig, TrainSettings, train_loop


def run(tag, out_root, noise, lr, steps, lam, enc_dim=32, batch=4, n_utts=2000, seed=0,
        type_weights=(0.2, 0.3, 0.5)):
    out = Path(out_root) / tag
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.default()
    synth = SynthConfig(feature_dim=16, noise_sigma=noise, dataset_seed=1234 + seed)
    cfg = ModelConfig(vocab_size=vocab.size, feature_dim=16,
                      num_encoder_layers=2, encoder_dim=enc_dim, feedforward_dim=2 * enc_dim,
                      self_attention_heads=4, cross_attention_heads=2,
                      context_dim=enc_dim // 2, joiner_dim=enc_dim)
    paths = generate_corpus(out / "data", seed=seed, n_train_utts=n_utts,
                            n_test_hintfree=50, n_train_words=60,
                            n_negative_words=30, n_oov_words=20)
    entries = read_manifest(paths["train_manifest"])
    pool = read_wordlist(paths["negative_pool"])
    t0 = time.time()
    settings = TrainSettings(steps=steps, batch_size=batch, seed=seed, log_every=200,
                             type_weights=type_weights)
    params, _, losses = train_loop(entries, pool, cfg, OptimConfig(lr=lr), settings,
                                   synth, vocab, out / "run")
    train_s = time.time() - t0
    print(f"[{tag}] trained {steps} steps in {train_s:.0f}s; "
          f"loss {losses[0]:.2f} -> {np.mean(losses[-20:]):.3f}")

    test_entries = read_manifest(paths["test_manifest"])
    hints = read_wordlist(paths["eval_hints"])
    hint_tokens = [tokenize(w, vocab) for w in hints]
    refs = [e.text for e in test_entries]
    hintfree_idx = [i for i, e in enumerate(test_entries) if e.utterance_id.startswith("test-free")]

    t0 = time.time()
    outputs = {}
    trie = build_hint_trie(hint_tokens, lam)
    for mode, ctx_on, fus_on in (("none", False, False), ("context", True, False),
                                 ("fusion", False, True), ("both", True, True)):
        hyps = []
        for e in test_entries:
            feats = features_for_entry(e, vocab, synth)
            toks = greedy_decode(feats, params, cfg,
                                 hints=hint_tokens if (ctx_on or fus_on) else None,
                                 context_enabled=ctx_on, fusion_enabled=fus_on,
                                 lambda_token=lam, trie=trie if fus_on else None)
            hyps.append(detokenize(toks, vocab))
        outputs[mode] = hyps
    print(f"[{tag}] decoded 4 modes in {time.time() - t0:.0f}s")

    report = {}
    base_wer = evaluate_transcripts(outputs["none"], refs).wer
    base_free_wer = evaluate_transcripts([outputs["none"][i] for i in hintfree_idx],
                                         [refs[i] for i in hintfree_idx]).wer
    for mode, hyps in outputs.items():
        r = evaluate_transcripts(hyps, refs, hints=hints, baseline_wer=base_wer)
        free = evaluate_transcripts([hyps[i] for i in hintfree_idx],
                                    [refs[i] for i in hintfree_idx])
        report[mode] = {"wer": r.wer, "werr": r.werr, "oov": r.oov_accuracy,
                        "present": r.hints_present, "correct": r.hints_correct,
                        "free_wer": free.wer}
        print(f"[{tag}] {mode:8s} WER {r.wer:6.2f} WERR {r.werr if r.werr is not None else 0:7.2f} "
              f"OOV {r.oov_accuracy if r.oov_accuracy is not None else -1:6.2f} "
              f"({r.hints_correct}/{r.hints_present})  free-WER {free.wer:6.2f}")
    rel_free = (report["both"]["free_wer"] - base_free_wer) / max(base_free_wer, 1e-9) * 100
    print(f"[{tag}] hint-free WER degradation (both vs none): {rel_free:+.2f}%")
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


if __name__ == "__main__":
    tag = sys.argv[1] if len(sys.argv) > 1 else "base"
    noise = float(sys.argv[2]) if len(sys.argv) > 2 else 0.35
    lr = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3
    steps = int(sys.argv[4]) if len(sys.argv) > 4 else 2000
    lam = float(sys.argv[5]) if len(sys.argv) > 5 else 0.3
    enc = int(sys.argv[6]) if len(sys.argv) > 6 else 32
    run(tag, "/tmp/accept5", noise, lr, steps, lam, enc_dim=enc)
