import math
import warnings

import numpy as np
import pytest

from decoupled_asr import autodiff as ad
from decoupled_asr.evalkit import BenchmarkConfig, benchmark_domains, benchmark_vocab, gen_text
from decoupled_asr.lm import (CompatibilityWarning, IncompatibleLMError, LanguageModel, check_swap_compatible,
                              lm_finetune, lm_forward, lm_sequence_logprob, lm_train, next_token_logprobs, perplexity)
from decoupled_asr.nn import AttentionConfig
from decoupled_asr.vocab import EOS_ID, SOS_ID, Vocabulary, read_text_corpus, write_text_corpus

from conftest import TINY, tiny_lm, tiny_vocab

SMALL = AttentionConfig(d_model=16, heads=2, d_ff=32, n_layers=1, dropout=0.0)


def params_of(lm):
    return {k: p.data.copy() for k, p in lm.named_parameters()}


def test_vocabulary_reserved_ids(tmp_path):
    v = tiny_vocab(2)
    assert (v.blank_id, v.unk_id, v.sos_id, v.eos_id) == (0, 1, 2, 3)
    assert v.encode("w1 zz") == [5, 1] and v.decode([4, 5]) == "w0 w1"
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    with pytest.raises(ValueError):
        Vocabulary(("a", "b"))


def test_text_corpus_round_trip(tmp_path):
    v = tiny_vocab(3)
    corpus = [[4, 5], [6], [6, 6, 4]]
    write_text_corpus(tmp_path / "t.txt", corpus, v)
    assert read_text_corpus(tmp_path / "t.txt", v) == corpus


def test_zero_head_is_uniform():
    v = tiny_vocab(3)
    lm = LanguageModel(v, TINY, seed=0)
    logits = lm_forward(lm, [SOS_ID, 4, 5])
    assert np.array_equal(logits, np.zeros((3, v.V), dtype=logits.dtype))
    p = np.exp(next_token_logprobs(lm, [[4]]))
    assert np.allclose(p, 1.0 / v.V)


def test_out_of_range_id():
    lm = tiny_lm(tiny_vocab(3))
    with pytest.raises(IndexError):
        lm_forward(lm, [SOS_ID, 99])


def test_causality_bitwise():
    lm = tiny_lm(tiny_vocab(4))
    base = lm_forward(lm, [SOS_ID, 4, 5, 6, 7])
    for j in range(1, 5):
        ids = [SOS_ID, 4, 5, 6, 7]
        ids[j] = 4 if ids[j] != 4 else 5
        out = lm_forward(lm, ids)
        assert np.array_equal(out[:j], base[:j])


def test_learns_deterministic_alternation():
    v = Vocabulary.from_words(["a", "b"])
    corpus = [[4, 5] * 4 for _ in range(200)]
    lm = lm_train(corpus, v, SMALL, epochs=10, lr=5e-3, seed=0, batch_size=32)
    p = np.exp(next_token_logprobs(lm, [[4], [4, 5, 4]]))
    assert (p[:, 5] >= 0.9).all()


def test_one_symbol_corpus_loss_decreases():
    v = Vocabulary.from_words(["a"])
    history = []
    lm = lm_train([[4]] * 64, v, SMALL, epochs=5, lr=3e-3, seed=0, batch_size=16, history=history)
    assert len(history) == 5 and all(b < a for a, b in zip(history, history[1:]))
    # the per-token loss converges to the cost of predicting "a" then eos
    lp = next_token_logprobs(lm, [[], [4]])
    final = -(lp[0, 4] + lp[1, EOS_ID]) / 2
    assert final < history[0]


def test_training_is_deterministic():
    v = tiny_vocab(3)
    corpus = [[4, 5, 6], [6, 5], [4]] * 10
    a = lm_train(corpus, v, TINY, epochs=2, seed=3)
    b = lm_train(corpus, v, TINY, epochs=2, seed=3)
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_empty_corpus():
    with pytest.raises(ValueError):
        lm_train([], tiny_vocab(2), TINY)


@pytest.fixture(scope="module")
def domain_lms():
    bc = BenchmarkConfig()
    src, tgt = benchmark_domains(bc)
    v = benchmark_vocab(bc)
    text_s, text_t = gen_text(src, 1500, 1), gen_text(tgt, 1500, 2)
    held_s, held_t = gen_text(src, 200, 3), gen_text(tgt, 200, 4)
    lm = lm_train(text_s, v, SMALL, epochs=2, lr=3e-3, seed=0)
    ft = lm_finetune(lm, text_t, epochs=2, lr=2e-3, seed=0)
    return v, lm, ft, held_s, held_t


def test_perplexity_beats_uniform(domain_lms):
    v, lm, _, held_s, _ = domain_lms
    assert perplexity(lm, held_s) < v.V


def test_finetune_adapts_and_forgets(domain_lms):
    _, lm, ft, held_s, held_t = domain_lms
    assert perplexity(ft, held_t) < perplexity(lm, held_t)
    assert perplexity(ft, held_s) >= perplexity(lm, held_s)
    assert ft.domain_tag == "target" and ft.lineage[0] == lm.lineage[0]


def test_finetune_zero_epochs_is_identity_and_leaves_input_untouched():
    lm = tiny_lm(tiny_vocab(3))
    before = params_of(lm)
    same = lm_finetune(lm, [[4, 5]], epochs=0)
    after = params_of(same)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    lm_finetune(lm, [[4, 5]] * 8, epochs=1)
    assert all(np.array_equal(before[k], p) for k, p in params_of(lm).items())


def test_finetune_vocab_mismatch():
    lm = tiny_lm(tiny_vocab(3))
    with pytest.raises(IncompatibleLMError):
        lm_finetune(lm, [[4]], vocab=tiny_vocab(4))


def test_swap_compatibility_rules():
    v = tiny_vocab(3)
    lm = tiny_lm(v)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        check_swap_compatible(lm, lm_finetune(lm, [[4]], epochs=0))
    with pytest.warns(CompatibilityWarning):
        check_swap_compatible(lm, tiny_lm(v, seed=5))
    with pytest.raises(IncompatibleLMError):
        check_swap_compatible(lm, tiny_lm(tiny_vocab(4)))


def test_sequence_logprob_examples(f64):
    v = tiny_vocab(3)
    zero = LanguageModel(v, TINY, seed=0)
    assert lm_sequence_logprob(zero, [4, 5, 6]) == pytest.approx(-3 * math.log(v.V), abs=1e-12)
    lm = tiny_lm(v)
    full = lm_sequence_logprob(lm, [4, 6, 5], include_eos=True)
    steps = sum(next_token_logprobs(lm, [[4, 6, 5][:i]])[0, y] for i, y in enumerate([4, 6, 5, EOS_ID]))
    assert full == pytest.approx(steps, abs=1e-12)
    logits = lm_forward(lm, [SOS_ID, 5])
    manual = sum(logits[i, y] - math.log(np.exp(logits[i]).sum()) for i, y in enumerate([5, 4]))
    assert lm_sequence_logprob(lm, [5, 4]) == pytest.approx(manual, abs=1e-12)


def test_next_token_distribution_normalises():
    lm = tiny_lm(tiny_vocab(5))
    rng = np.random.default_rng(0)
    hists = [list(rng.integers(4, 9, size=n)) for n in range(6)]
    assert np.allclose(np.exp(next_token_logprobs(lm, hists)).sum(-1), 1.0, atol=1e-6)


def test_freeze_blocks_gradients(f64):
    lm = tiny_lm(tiny_vocab(3)).freeze()
    assert lm.frozen and not lm.trainable()
