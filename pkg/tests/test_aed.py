import numpy as np
import pytest

from decoupled_asr import autodiff as ad
from decoupled_asr.aed import (AedHyper, AedModel, acoustic_stack_forward, aed_loss, combine_dec_logits, smoothed_ce,
                               standard_decoder_forward)
from decoupled_asr.batch import Batch
from decoupled_asr.ctc import ctc_loss_batch
from decoupled_asr.evalkit import Utterance
from decoupled_asr.lm import IncompatibleLMError, LanguageModel, pad_batch
from decoupled_asr.train import train_asr
from decoupled_asr.vocab import EOS_ID, SOS_ID

from conftest import TINY, tiny_lm, tiny_vocab


def make(variant="decoupled", seed=0, hyper=AedHyper(), vocab=None):
    v = vocab or tiny_vocab(3)
    lm = tiny_lm(v) if variant == "decoupled" else None
    return AedModel(v, 5, TINY, variant, lm, hyper=hyper, seed=seed)


def batch(seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Batch.from_pairs([rng.normal(size=(6, 5)), rng.normal(size=(4, 5))], [[4, 5, 4], [6]], dtype=dtype)


def test_combine_examples():
    assert np.array_equal(combine_dec_logits(np.array([1.0, 0.0]), np.array([0.0, 2.0]), 0.5), [1.0, 1.0])
    ac = np.array([0.3, -2.0, 5.0])
    out = combine_dec_logits(ac, np.array([7.0, 1.0, -4.0]), 0.0)
    assert np.array_equal(out, ac) and out is not ac
    with pytest.raises(ad.DimensionError):
        combine_dec_logits(np.zeros(3), np.zeros(4), 0.5)


def test_combine_constant_lm_keeps_argmax():
    rng = np.random.default_rng(0)
    ac = rng.normal(size=7)
    assert np.argmax(combine_dec_logits(ac, np.full(7, 3.3), 0.5)) == np.argmax(ac)


def test_combine_tensor_gradient(f64):
    a = ad.parameter(np.array([1.0, 2.0]))
    b = ad.parameter(np.array([3.0, -1.0]))
    ad.tsum(combine_dec_logits(a, b, 0.5)).backward()
    assert np.array_equal(a.grad, [1, 1]) and np.array_equal(b.grad, [0.5, 0.5])


def test_acoustic_stack_positions_independent(f64):
    m = make()
    m.eval()
    enc = m.encode(batch().feats[:1])
    base = acoustic_stack_forward(m, [SOS_ID, 4, 5, 6], enc).data
    other = acoustic_stack_forward(m, [SOS_ID, 6, 5, 4], enc).data
    # position 2 sees token 5 in both histories; the other tokens must not matter
    assert np.array_equal(base[2], other[2])
    assert not np.allclose(base[1], other[1])


def test_acoustic_stack_needs_encoder():
    with pytest.raises(ad.ContractError):
        acoustic_stack_forward(make(), [SOS_ID], None)


def test_standard_decoder_is_causal(f64):
    m = make("standard")
    m.eval()
    enc = m.encode(batch().feats[:1])
    a = standard_decoder_forward(m, [SOS_ID, 4, 5, 6], enc).data
    b = standard_decoder_forward(m, [SOS_ID, 4, 6, 4], enc).data
    assert np.array_equal(a[:2], b[:2]) and not np.allclose(a[2], b[2])


def _ctc_term(m, b):
    enc = m.encode(b.feats, b.feat_lens)
    lp = ad.log_softmax(m.ctc_head(enc.h_enc))
    return ctc_loss_batch(lp, b.targets, enc.lengths).data.sum() / b.n_tokens, enc


def _ce_terms(m, b, enc, ls):
    hist, lens = pad_batch([[SOS_ID] + y for y in b.targets], pad=EOS_ID)
    tgt, _ = pad_batch([y + [EOS_ID] for y in b.targets], pad=EOS_ID)
    valid = np.arange(hist.shape[1])[None, :] < lens[:, None]
    ac, lm_logits = m.decoder_logits(hist, enc)
    dec = combine_dec_logits(ac, lm_logits, m.hyper.lm_weight)
    n = valid.sum()
    return smoothed_ce(dec, tgt, valid, ls).item() / n, smoothed_ce(ac, tgt, valid, ls).item() / n


def test_loss_collapses(f64):
    m = make()
    m.eval()
    b = batch()
    ctc, enc = _ctc_term(m, b)
    dec, ac = _ce_terms(m, b, enc, 0.0)
    assert m.loss(b, AedHyper(ctc_weight=1.0)).item() == pytest.approx(ctc, abs=1e-12)
    assert m.loss(b, AedHyper(ctc_weight=0.0, main_weight=1.0, label_smoothing=0.0)).item() == pytest.approx(dec, abs=1e-12)
    assert m.loss(b, AedHyper(ctc_weight=0.0, main_weight=0.0, label_smoothing=0.0)).item() == pytest.approx(ac, abs=1e-12)
    full = m.loss(b, AedHyper(label_smoothing=0.0)).item()
    assert full == pytest.approx(0.3 * ctc + 0.7 * (0.5 * dec + 0.5 * ac), abs=1e-12)
    assert aed_loss(b, m, AedHyper(label_smoothing=0.0)).item() == full


def test_smoothed_ce_example(f64):
    logits = ad.tensor(np.zeros((1, 1, 4)))
    out = smoothed_ce(logits, np.array([[2]]), np.array([[True]]), 0.0)
    assert out.item() == pytest.approx(np.log(4))
    out = smoothed_ce(logits, np.array([[2]]), np.array([[False]]), 0.1)
    assert out.item() == 0.0


def test_hyper_validation():
    with pytest.raises(ValueError):
        AedHyper(ctc_weight=1.5)
    with pytest.raises(ValueError):
        AedHyper(lm_weight=-1)
    with pytest.raises(ValueError):
        AedModel(tiny_vocab(), 5, TINY, "decoupled", None)
    with pytest.raises(ValueError):
        AedModel(tiny_vocab(), 5, TINY, "other")


@pytest.mark.parametrize("variant", ["decoupled", "standard", "preformer"])
def test_loss_gradient(variant, f64):
    m = make(variant, seed=1)
    m.eval()
    b = batch(1)
    errs = ad.grad_check(lambda: m.loss(b), m.trainable(), max_entries=3, seed=2)
    assert max(errs.values()) <= 1e-4, errs


def test_frozen_lm_has_no_grad_and_is_unchanged_by_training():
    v = tiny_vocab(3)
    lm = tiny_lm(v)
    before = {k: p.data.copy() for k, p in lm.named_parameters()}
    m = AedModel(v, 5, TINY, "decoupled", lm, seed=0)
    assert not any(k.startswith("lm.") or k.startswith("embed.") for k in m.trainable())
    rng = np.random.default_rng(0)
    utts = [Utterance(f"u{i}", [4 + i % 3, 4 + (i + 1) % 3], rng.normal(size=(6, 5))) for i in range(8)]
    train_asr(m, utts, epochs=2, batch_size=4)
    for k, p in lm.named_parameters():
        assert np.array_equal(p.data, before[k]), k


def test_parameter_counts():
    v = tiny_vocab(3)
    std = make("standard", vocab=v)
    dec = make("decoupled", vocab=v)
    n_std = sum(p.data.size for p in std.trainable().values())
    n_dec = sum(p.data.size for p in dec.trainable().values())
    # the decoupled decoder drops the self-attention and the embedding table
    d, V = TINY.d_model, v.V
    self_attn = 4 * d * d + 3 * d + 2 * d  # q/k/v/out weights, q/v/out biases, its layer norm
    assert n_std - n_dec == V * d + self_attn * TINY.n_layers


@pytest.mark.parametrize("variant", ["decoupled", "standard"])
def test_next_logits_match_teacher_forcing(variant, f64):
    m = make(variant, seed=3)
    m.eval()
    enc, _ = m.prepare(batch(2).feats[0])
    hist = [4, 6, 5]
    hist_ids = np.array([[SOS_ID] + hist])
    out = m.decoder_logits(hist_ids, enc)
    if variant == "decoupled":
        out = combine_dec_logits(out[0], out[1], m.hyper.lm_weight)
    full = out.data[0]
    for k in range(len(hist) + 1):
        got = m.next_logits(enc, [hist[:k]])[0]
        assert np.allclose(got, full[k], atol=1e-10)
    several = m.next_logits(enc, [hist[:1], hist[:3], []], lm_cache={})
    assert np.allclose(several, full[[1, 3, 0]], atol=1e-10)


def test_with_lm_swaps_only_the_lm(f64):
    v = tiny_vocab(3)
    m = make(vocab=v)
    m.eval()
    other = tiny_lm(v, seed=9)
    swapped = m.with_lm(other)
    assert swapped.lm is other and m.lm is not other
    assert swapped.embed is m.embed
    assert m.with_lm(other, swap_embedding=True).embed is other.embed
    enc, _ = m.prepare(batch().feats[0])
    ac_a = m.next_logits(enc, [[4]], beta=0.0)
    ac_b = swapped.next_logits(enc, [[4]], beta=0.0)
    assert np.array_equal(ac_a, ac_b)
    with pytest.raises(IncompatibleLMError):
        m.with_lm(tiny_lm(tiny_vocab(4)))
    with pytest.raises(ValueError):
        make("standard").with_lm(other)


def test_preformer_init_from_lm(f64):
    v = tiny_vocab(3)
    lm = tiny_lm(v)
    m = make("preformer", vocab=v)
    m.init_self_layers_from_lm(lm)
    src = lm.parameters()
    for k, p in m.parameters().items():
        if k.startswith("self_layers."):
            assert np.array_equal(p.data, src[k.replace("self_layers.", "layers.")].data)
    assert np.array_equal(m.embed.weight.data, lm.embed.weight.data)
    with pytest.raises(ValueError):
        make("standard").init_self_layers_from_lm(lm)
