"""Sweep the consistency weight and measure the trained loop's convergence:
the abs-mean-diff ratio iter3/iter1 plus the inference-mode exit rate at
th=1e-6 within N=6, and a quick greedy-decode WER sanity check."""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import hintasr.tensor as tz
from hintasr.data import (SynthConfig, Vocab, features_for_entry, generate_corpus,
                          read_manifest, read_wordlist, tokenize, detokenize)
from hintasr.decode import greedy_decode
from hintasr.metrics import evaluate_transcripts
from hintasr.model import (ModelConfig, bias_and_combine, encode_audio, encode_context,
                           predict_labels, self_consistent_joiner)
from hintasr.train import OptimConfig, TrainSettings, train_loop

VOCAB = Vocab.default()


def probe(params, cfg, synth, paths, n_cells=100, iters=6):
    entries = read_manifest(paths["test_manifest"])
    hints = [tokenize(w, VOCAB) for w in read_wordlist(paths["eval_hints"])]
    rng = np.random.default_rng(33)
    conv = 0
    tot = 0
    mean_by_iter = np.zeros(iters)
    max_by_iter = np.zeros(iters)
    with tz.no_grad():
        cells = 0
        while cells < n_cells:
            e = entries[int(rng.integers(0, len(entries)))]
            feats = features_for_entry(e, VOCAB, synth)
            target = tokenize(e.text, VOCAB)
            h_a = encode_audio(feats, params, cfg)
            ctx_a = encode_context(hints, params, cfg, side="audio")
            h_ac = bias_and_combine(h_a, ctx_a, params, cfg, "bias_audio", "combiner_audio")
            h_d = predict_labels(target, params, cfg)
            ctx_j = encode_context(hints, params, cfg, side="joiner")
            for _ in range(min(10, n_cells - cells)):
                t = int(rng.integers(0, feats.shape[0]))
                u = int(rng.integers(0, len(target) + 1))
                h_ac_t = tz.reshape(tz.slice_rows(h_ac, t, t + 1), (cfg.encoder_dim,))
                h_d_u = tz.reshape(tz.slice_rows(h_d, u, u + 1), (cfg.joiner_dim,))
                _, diag = self_consistent_joiner(h_ac_t, h_d_u, ctx_j, params, cfg,
                                                 mode="train", max_iters=iters)
                mean_by_iter += np.array(diag.mean_diffs)
                max_by_iter += np.array(diag.max_diffs)
                _, idiag = self_consistent_joiner(h_ac_t, h_d_u, ctx_j, params, cfg,
                                                  mode="infer", max_iters=iters,
                                                  threshold=1e-6)
                conv += int(idiag.converged)
                tot += 1
                cells += 1
    return mean_by_iter / tot, max_by_iter / tot, conv / tot


def quick_wer(params, cfg, synth, paths, limit=25):
    entries = read_manifest(paths["test_manifest"])[:limit]
    hyps = [detokenize(greedy_decode(features_for_entry(e, VOCAB, synth), params, cfg),
                       VOCAB) for e in entries]
    return evaluate_transcripts(hyps, [e.text for e in entries]).wer


def main():
    alpha = float(sys.argv[1])
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    n_iters = int(sys.argv[3]) if len(sys.argv) > 3 else 3
    noise = float(sys.argv[4]) if len(sys.argv) > 4 else 1.4
    out = Path(f"/tmp/convsweep/a{alpha}_s{steps}_n{n_iters}_z{noise}")
    out.mkdir(parents=True, exist_ok=True)
    synth = SynthConfig(feature_dim=16, noise_sigma=noise, dataset_seed=1234)
    cfg = ModelConfig(vocab_size=VOCAB.size, feature_dim=16, num_encoder_layers=2,
                      encoder_dim=32, feedforward_dim=64, self_attention_heads=4,
                      cross_attention_heads=2, context_dim=16, joiner_dim=32,
                      max_sc_iters=n_iters)
    paths = generate_corpus(out / "data", seed=0, n_train_utts=2000, n_test_hintfree=50,
                            n_train_words=60, n_negative_words=30, n_oov_words=20)
    entries = read_manifest(paths["train_manifest"])
    pool = read_wordlist(paths["negative_pool"])
    t0 = time.time()
    settings = TrainSettings(steps=steps, batch_size=4, seed=0, log_every=0,
                             sc_consistency_weight=alpha)
    params, _, losses = train_loop(entries, pool, cfg, OptimConfig(lr=2e-3), settings,
                                   synth, VOCAB, out / "run")
    print(f"alpha={alpha} N={n_iters}: {steps} steps in {(time.time()-t0)/60:.1f} min, "
          f"NLL -> {np.mean(losses[-20:]):.3f}")
    mean_d, max_d, conv = probe(params, cfg, synth, paths)
    ratio = abs(mean_d[2]) / max(abs(mean_d[0]), 1e-300)
    print("  avg mean diff by iter:", np.array2string(mean_d, precision=2))
    print("  avg max  diff by iter:", np.array2string(max_d, precision=3))
    print(f"  ratio iter3/iter1 = {ratio:.2e} (need <= 1e-3); "
          f"infer exit rate = {conv:.1%} (need >= 95%)")
    print(f"  quick no-hint WER on 25 utts: {quick_wer(params, cfg, synth, paths):.2f}")


if __name__ == "__main__":
    main()
