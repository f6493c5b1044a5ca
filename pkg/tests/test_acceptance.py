"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 share one run of the default benchmark (seeds 0-2, fusion off,
conditions acoustic/source/target plus the standard baselines).
"""

import time
import warnings

import numpy as np
import pytest

from decoupled_asr import autodiff as ad
from decoupled_asr.aed import AedModel
from decoupled_asr.checkpoint import load_checkpoint, save_checkpoint
from decoupled_asr.cli import main as cli_main
from decoupled_asr.config import build_config
from decoupled_asr.ctc import ctc_loss
from decoupled_asr.evalkit import BenchmarkConfig, benchmark_domains, benchmark_vocab, gen_corpus
from decoupled_asr.evalkit import matched_pairs_test, permutation_pvalue
from decoupled_asr.experiment import run_adaptation_experiment
from decoupled_asr.lm import LanguageModel
from decoupled_asr.nn import (CAUSAL, NO_MASK, AttentionConfig, DecoderLayer, Encoder, Mask, decoder_layer_forward,
                              encoder_forward)
from decoupled_asr.search import (DecodeConfig, aed_greedy_decode, decode_corpus, joint_beam_search,
                                  replace_internal_lm, transducer_search)
from decoupled_asr.transducer import TransducerModel, transducer_loss

from conftest import TINY, tiny_lm, tiny_vocab
from test_aed import batch as aed_batch
from test_ctc import brute_force_loss as ctc_brute, random_instance as ctc_instance
from test_search import LatticeModel, aed_oracle, bench_models, transducer_oracle
from test_transducer import _model_batch, brute_force_loss as rnnt_brute

from conftest import random_log_probs


def report(num: int, ok: bool, detail: str) -> None:
    print(f"\ncriterion {num}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1-2 loss oracles
# ---------------------------------------------------------------------------

def test_criterion_01_ctc_oracle():
    with ad.default_dtype(np.float64):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(200):
            lp, y = ctc_instance(rng)
            worst = max(worst, abs(ctc_loss(ad.tensor(lp), y).item() - ctc_brute(lp, y)))
        secs = time.perf_counter() - t0
    report(1, worst <= 1e-6 and secs < 10, f"max |diff| {worst:.2e} over 200 instances in {secs:.2f}s")


def test_criterion_02_transducer_oracle():
    with ad.default_dtype(np.float64):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2025)
        worst = 0.0
        for _ in range(200):
            V = int(rng.integers(2, 5))
            T = int(rng.integers(1, 8))
            N = int(rng.integers(0, 9 - T))
            y = list(rng.integers(1, V, size=N))
            lp = random_log_probs(rng, (T, N + 1, V))
            worst = max(worst, abs(transducer_loss(ad.tensor(lp), y).item() - rnnt_brute(lp, y)))
        secs = time.perf_counter() - t0
    report(2, worst <= 1e-6 and secs < 10, f"max |diff| {worst:.2e} over 200 instances in {secs:.2f}s")


# ---------------------------------------------------------------------------
# 3 gradients
# ---------------------------------------------------------------------------

def test_criterion_03_gradients():
    errs = {}
    frozen_ok = True
    with ad.default_dtype(np.float64):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = ad.parameter(rng.normal(size=(6, 4)))
            errs[("ctc", seed)] = ad.grad_check(lambda: ctc_loss(ad.log_softmax(x), [1, 2, 2]), {"x": x})["x"]
            z = ad.parameter(rng.normal(size=(4, 3, 4)))
            errs[("rnnt", seed)] = ad.grad_check(lambda: transducer_loss(ad.log_softmax(z), [2, 3]), {"z": z})["z"]

            v = tiny_vocab(3)
            aed = AedModel(v, 5, TINY, "decoupled", tiny_lm(v, seed + 1), seed=seed).eval()
            b = aed_batch(seed)
            errs[("aed", seed)] = max(ad.grad_check(lambda: aed.loss(b), aed.trainable(), max_entries=4,
                                                    seed=seed).values())
            aed.zero_grad()
            aed.loss(b).backward()
            frozen_ok &= all(p.grad is None or not p.grad.any() for k, p in aed.named_parameters()
                             if k.startswith("lm.") or k.startswith("embed."))

            rnnt, rb = _model_batch("decoupled", seed)
            rnnt.eval()
            errs[("rnnt_dec", seed)] = max(ad.grad_check(lambda: rnnt.loss(rb), rnnt.trainable(), max_entries=4,
                                                         seed=seed).values())
            rnnt.zero_grad()
            rnnt.loss(rb).backward()
            frozen_ok &= all(p.grad is None or not p.grad.any() for k, p in rnnt.named_parameters()
                             if k.startswith("lm."))
    worst = max(errs.values())
    by_kind = {k: max(e for (kk, _), e in errs.items() if kk == k) for k in ("ctc", "rnnt", "aed", "rnnt_dec")}
    detail = ", ".join(f"{k} {e:.1e}" for k, e in by_kind.items()) + f"; frozen LM zero grad: {frozen_ok}"
    report(3, worst <= 1e-4 and frozen_ok, detail)


# ---------------------------------------------------------------------------
# 4 masking
# ---------------------------------------------------------------------------

def test_criterion_04_masking():
    rng = np.random.default_rng(4)
    cfg = AttentionConfig(d_model=16, heads=2, d_ff=32, n_layers=2, dropout=0.0)
    ok = {}
    # causal future-token invariance: self-layers and the LM
    layer = DecoderLayer("self_layer", cfg, rng)
    y = rng.normal(size=(1, 7, 16)).astype(np.float32)
    base = decoder_layer_forward(layer, ad.tensor(y)).data
    good = True
    for j in range(1, 7):
        y2 = y.copy()
        y2[0, j:] = rng.normal(size=(7 - j, 16))
        good &= np.array_equal(decoder_layer_forward(layer, ad.tensor(y2)).data[0, :j], base[0, :j])
    v = tiny_vocab(5)
    lm = LanguageModel(v, cfg, seed=3, zero_head=False)
    ids = np.array([[2, 4, 5, 6, 7, 8]])
    lbase = lm.logits(ids).data
    for j in range(1, 6):
        ids2 = ids.copy()
        ids2[0, j:] = rng.integers(4, 9, size=6 - j)
        good &= np.array_equal(lm.logits(ids2).data[0, :j], lbase[0, :j])
    ok["causal"] = good
    # chunk future-frame invariance
    enc = Encoder(16, cfg, np.random.default_rng(0))
    x = rng.normal(size=(19, 16)).astype(np.float32)
    mask = Mask("chunk", 4)
    base = encoder_forward(enc, x, mask).h_enc.data[0]
    good = True
    for t in range(19):
        x2 = x.copy()
        x2[t:] += rng.normal(size=(19 - t, 16)).astype(np.float32)
        good &= np.array_equal(encoder_forward(enc, x2, mask).h_enc.data[0, : (t // 4) * 4], base[: (t // 4) * 4])
    ok["chunk"] = good
    off = encoder_forward(enc, x, NO_MASK).h_enc.data
    ok["offline==chunk>=T"] = all(np.array_equal(encoder_forward(enc, x, Mask("chunk", c)).h_enc.data, off)
                                  for c in (19, 20, 100))
    report(4, all(ok.values()), ", ".join(f"{k}: {v}" for k, v in ok.items()))


# ---------------------------------------------------------------------------
# 5 search
# ---------------------------------------------------------------------------

def test_criterion_05_search():
    ok = {}
    good = True
    with ad.default_dtype(np.float64):
        for seed, variant in enumerate(["decoupled", "decoupled", "standard", "preformer"]):
            v = tiny_vocab(3)
            m = AedModel(v, 5, TINY, variant, tiny_lm(v, seed + 1) if variant == "decoupled" else None,
                         seed=seed).eval()
            x = np.random.default_rng(seed).normal(size=(6, 5))
            for mu in (0.0, 0.3):
                best, _ = joint_beam_search(x, m, DecodeConfig(beam=50, ctc_weight=mu), max_len=2)
                s, yb = aed_oracle(m, x, mu, 2)
                good &= best.tokens == yb and abs(best.s_total - s) <= 1e-9
        for seed in range(4):
            lat = LatticeModel(3, 6, seed, scale=2.0)
            h = transducer_search(None, lat, DecodeConfig(beam=500, max_symbols_per_frame=1))
            s, yb = transducer_oracle(lat, 3, 3, 1)
            good &= h.tokens == yb and abs(h.s_total - s) <= 1e-9
    ok["exhaustive"] = good
    good = True
    for seed in range(5):
        v = tiny_vocab(5)
        m = AedModel(v, 5, TINY, "decoupled", tiny_lm(v, seed + 1), seed=seed).eval()
        x = np.random.default_rng(seed).normal(size=(12, 5))
        cfg = DecodeConfig(beam=1, ctc_weight=0.0)
        good &= list(joint_beam_search(x, m, cfg)[0].tokens) == aed_greedy_decode(x, m, cfg)
        t = TransducerModel(v, 5, TINY, "decoupled", tiny_lm(v, seed + 1), d_joint=6, seed=seed).eval()
        good &= (transducer_search(x, t, DecodeConfig(beam=1)).tokens
                 == transducer_search(x, t, DecodeConfig(beam=1), mode="greedy").tokens)
    ok["beam1==greedy"] = good
    a, t, lm, v, cfg = bench_models()
    other = LanguageModel(v, cfg, seed=7, zero_head=False)
    utts = gen_corpus(benchmark_domains(BenchmarkConfig(dim=5))[1], 5, 1)
    swap_ok = sf_ok = True
    for m in (a, t):
        base = decode_corpus(m, utts, DecodeConfig(beam=3))
        swap_ok &= decode_corpus(replace_internal_lm(m, m.lm), utts, DecodeConfig(beam=3)) == base
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            back = replace_internal_lm(replace_internal_lm(m, other), lm)
        swap_ok &= decode_corpus(back, utts, DecodeConfig(beam=3)) == base
        sf_ok &= decode_corpus(m, utts, DecodeConfig(beam=3, sf_lm=other, sf_weight=0.0)) == base
    ok["swap identity/reversible"] = swap_ok
    ok["fusion w=0"] = sf_ok
    report(5, all(ok.values()), ", ".join(f"{k}: {v}" for k, v in ok.items()))


# ---------------------------------------------------------------------------
# 6-8 adaptation experiment on the default benchmark
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_run():
    cfg = build_config(overrides={"conditions": "acoustic,source,target", "fusion": "off"})
    t0 = time.perf_counter()
    rep = run_adaptation_experiment(cfg)
    minutes = (time.perf_counter() - t0) / 60
    print("\n" + rep.to_markdown())
    return rep, minutes


def _checks(rep, prefix):
    return [(n, ok, d) for n, ok, d in rep.checks() if n.startswith(prefix)]


def test_criterion_06_adaptation_swap(default_run):
    rep, minutes = default_run
    checks = _checks(rep, "swap gain")
    ok = len(checks) == 3 and all(c[1] for c in checks) and minutes <= 60
    detail = f"runtime {minutes:.1f} min; " + " | ".join(f"{n}: {'ok' if o else 'FAIL'} ({d})" for n, o, d in checks)
    report(6, ok, detail)


def test_criterion_07_intra_parity(default_run):
    rep, _ = default_run
    checks = _checks(rep, "intra parity")
    ok = len(checks) == 3 and all(c[1] for c in checks)
    report(7, ok, " | ".join(f"{n}: {'ok' if o else 'FAIL'} ({d})" for n, o, d in checks))


def test_criterion_08_ablation_order(default_run):
    rep, _ = default_run
    checks = _checks(rep, "ablation order")
    ok = len(checks) == 3 and all(c[1] for c in checks)
    report(8, ok, " | ".join(f"{n}: {'ok' if o else 'FAIL'} ({d})" for n, o, d in checks))


# ---------------------------------------------------------------------------
# 9 determinism
# ---------------------------------------------------------------------------

TINY_RUN = dict(n_train=16, n_test=4, n_dev=2, n_text=40, d_model=8, heads=2, d_ff=16, n_layers=1, d_joint=8,
                dropout=0.0, epochs=1, lm_epochs=1, ft_epochs=1, beam=2, batch_size=8, seeds="0",
                models="aed_decoupled,transducer_decoupled_chunk,aed_standard")


def test_criterion_09_determinism(tmp_path):
    ok = {}
    v = tiny_vocab(3)
    lm = tiny_lm(v)
    models = [lm, AedModel(v, 5, TINY, "decoupled", lm), AedModel(v, 5, TINY, "preformer"),
              TransducerModel(v, 5, TINY, "decoupled", lm, d_joint=6, mask=Mask("chunk", 4)),
              TransducerModel(v, 5, TINY, "stateless", None, d_joint=6)]
    good = True
    for i, m in enumerate(models):
        save_checkpoint(tmp_path / f"{i}a", m)
        save_checkpoint(tmp_path / f"{i}b", load_checkpoint(tmp_path / f"{i}a"))
        good &= (tmp_path / f"{i}a").read_bytes() == (tmp_path / f"{i}b").read_bytes()
    ok["checkpoint round-trip"] = good
    cfg = build_config(overrides=TINY_RUN)
    r1, r2 = run_adaptation_experiment(cfg), run_adaptation_experiment(cfg)
    ok["experiment report"] = r1.to_tsv() == r2.to_tsv() and r1.to_markdown() == r2.to_markdown()
    # command-line pipeline twice into separate directories
    conf = tmp_path / "c.txt"
    conf.write_text("".join(f"{k} = {v}\n" for k, v in TINY_RUN.items()))
    outs = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        steps = [["gen-data", "--out", d / "data"],
                 ["train-lm", "--text", d / "data/text_source.txt", "--vocab", d / "data/vocab.txt",
                  "--out", d / "src.lm"],
                 ["train-asr", "--train", d / "data/train.dce", "--vocab", d / "data/vocab.txt", "--lm", d / "src.lm",
                  "--out", d / "m.ckpt"],
                 ["decode", "--model", d / "m.ckpt", "--data", d / "data/test_target.dce", "--out", d / "h.tsv"],
                 ["score", d / "h.tsv", "--out", d / "score"]]
        codes = [cli_main([s[0], "--config", str(conf), *map(str, s[1:])]) for s in steps]
        outs.append((codes, *((d / f).read_bytes() for f in ("m.ckpt", "h.tsv", "score.tsv", "score.md"))))
    ok["cli files"] = outs[0] == outs[1] and outs[0][0] == [0] * 5
    report(9, all(ok.values()), ", ".join(f"{k}: {v}" for k, v in ok.items()))


# ---------------------------------------------------------------------------
# 10 significance test
# ---------------------------------------------------------------------------

def test_criterion_10_significance():
    rng = np.random.default_rng(10)
    diffs = []
    for i in range(20):
        d = rng.normal(rng.uniform(0.0, 0.5), 1.0, size=50)
        p = matched_pairs_test(d, np.zeros(50)).p
        diffs.append(abs(p - permutation_pvalue(d, 100_000, seed=i)))
    report(10, max(diffs) <= 0.02, f"max |p - p_perm| {max(diffs):.4f} over 20 instances")
