import itertools
import math

import numpy as np
import pytest

from decoupled_asr import autodiff as ad
from decoupled_asr.batch import Batch
from decoupled_asr.nn import AttentionConfig
from decoupled_asr.transducer import (JointNetwork, StatelessPrediction, TransducerHyper, TransducerModel,
                                      TransformerPrediction, combine_nt_logits, joint_forward, prediction_forward,
                                      transducer_loss, transducer_loss_batch)
from decoupled_asr.vocab import SOS_ID

from conftest import TINY, random_log_probs, tiny_lm, tiny_vocab


def brute_force_loss(lp: np.ndarray, y) -> float:
    """-log of the sum over all C(T-1+N, N) emit/blank orderings; the final blank is fixed at (T-1, N)."""
    T, U, V = lp.shape
    N = len(y)
    total = -math.inf
    for emit_pos in itertools.combinations(range(T - 1 + N), N):
        t = u = 0
        s = 0.0
        for step in range(T - 1 + N):
            if step in emit_pos:
                s += lp[t, u, y[u]]
                u += 1
            else:
                s += lp[t, u, 0]
                t += 1
        s += lp[T - 1, N, 0]
        total = np.logaddexp(total, s)
    return -total


def test_spec_examples(f64):
    lp = np.log(np.full((1, 2, 2), 0.5))
    assert transducer_loss(ad.tensor(lp), [1]).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    lp = np.log(np.full((2, 2, 2), 0.5))
    assert transducer_loss(ad.tensor(lp), [1]).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    lp = random_log_probs(np.random.default_rng(0), (4, 1, 3))
    assert transducer_loss(ad.tensor(lp), []).item() == pytest.approx(-lp[:, 0, 0].sum(), abs=1e-12)


def test_zero_frames_is_contract_error():
    with pytest.raises(ad.ContractError):
        transducer_loss(ad.tensor(np.zeros((0, 2, 3))), [1])


def test_brute_force_oracle_200(f64):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        V = int(rng.integers(2, 5))
        T = int(rng.integers(1, 8))
        N = int(rng.integers(0, 9 - T))
        y = list(rng.integers(1, V, size=N))
        lp = random_log_probs(rng, (T, N + 1, V))
        worst = max(worst, abs(transducer_loss(ad.tensor(lp), y).item() - brute_force_loss(lp, y)))
    assert worst <= 1e-6


def test_batch_lengths_match_single(f64):
    rng = np.random.default_rng(2)
    lp = random_log_probs(rng, (2, 5, 3, 4))
    out = transducer_loss_batch(ad.tensor(lp), [[1, 2], [3]], input_lengths=[5, 2]).data
    assert out[0] == pytest.approx(transducer_loss(ad.tensor(lp[0]), [1, 2]).item(), abs=1e-12)
    assert out[1] == pytest.approx(transducer_loss(ad.tensor(lp[1, :2, :2]), [3]).item(), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed, f64):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.normal(size=(4, 3, 4)))
    errs = ad.grad_check(lambda: transducer_loss(ad.log_softmax(x), [2, 3]), {"x": x})
    assert errs["x"] <= 1e-4


def test_combine_nt_examples():
    out = combine_nt_logits(np.array([1.5, 0.0, 0.0]), np.zeros(3))
    assert out[0] == 3.0
    ac = np.array([0.2, -1.0, 4.0])
    out = combine_nt_logits(ac, np.zeros(3))
    assert np.array_equal(out, [0.4, -1.0, 4.0])
    assert np.array_equal(combine_nt_logits(np.array([1.0, 2.0, 3.0]), np.array([9.0, 1.0, -1.0]), 0), [2, 3, 2])
    with pytest.raises(ad.DimensionError):
        combine_nt_logits(np.zeros(3), np.zeros(4))


def test_combine_nt_properties():
    rng = np.random.default_rng(3)
    ac = rng.normal(size=6)
    const = np.full(6, 2.7)
    out = combine_nt_logits(ac, const)
    assert np.argmax(out[1:]) == np.argmax(ac[1:])
    probs = []
    for b in np.linspace(-3, 3, 7):
        a = ac.copy()
        a[0] = b
        z = combine_nt_logits(a, rng.normal(size=6) * 0 + const)
        probs.append(np.exp(z[0]) / np.exp(z).sum())
    assert all(q > p for p, q in zip(probs, probs[1:]))


def test_combine_nt_without_blank_factor(f64):
    ac, lm = np.array([1.0, 2.0]), np.array([5.0, 1.0])
    assert np.array_equal(combine_nt_logits(ac, lm, blank_factor=1.0), [1.0, 3.0])
    t = combine_nt_logits(ad.tensor(ac), ad.tensor(lm), blank_factor=2.0)
    assert np.array_equal(t.data, [2.0, 3.0])


def test_joint_examples(f64):
    rng = np.random.default_rng(4)
    joint = JointNetwork(8, 6, 5, rng)
    for lin in (joint.enc_proj, joint.out_proj):
        lin.bias.data[:] = 0.0
    assert np.array_equal(joint_forward(np.zeros(8), np.zeros(8), joint).data, np.zeros(5))
    he, hp = rng.normal(size=8), rng.normal(size=8)
    joint.enc_proj.bias.data[:] = rng.normal(size=6)
    want = np.tanh(he @ joint.enc_proj.weight.data + joint.enc_proj.bias.data + hp @ joint.pre_proj.weight.data)
    want = want @ joint.out_proj.weight.data + joint.out_proj.bias.data
    assert np.abs(joint_forward(he, hp, joint).data - want).max() <= 1e-6
    # the two projections enter additively inside tanh: swapping inputs and weights commutes
    swapped = JointNetwork(8, 6, 5, rng)
    swapped.enc_proj.weight.data = joint.pre_proj.weight.data.copy()
    swapped.enc_proj.bias.data = joint.enc_proj.bias.data.copy()
    swapped.pre_proj.weight.data = joint.enc_proj.weight.data.copy()
    swapped.out_proj = joint.out_proj
    assert np.allclose(joint_forward(hp, he, swapped).data, joint_forward(he, hp, joint).data, atol=1e-12)


def test_lattice_matches_pointwise_joint(f64):
    rng = np.random.default_rng(5)
    joint = JointNetwork(8, 6, 5, rng)
    he, hp = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 2, 8))
    lat = joint.lattice(ad.tensor(he), ad.tensor(hp)).data[0]
    for t in range(3):
        for u in range(2):
            assert np.allclose(lat[t, u], joint_forward(he[0, t], hp[0, u], joint).data, atol=1e-12)


def test_stateless_prediction_rows(f64):
    pred = StatelessPrediction(6, 8, np.random.default_rng(0))
    h = prediction_forward(pred, [4, 5]).data
    w = pred.weight.data
    assert np.array_equal(h, w[[SOS_ID, 4, 5]])


def test_transformer_prediction_causal(f64):
    pred = TransformerPrediction(7, TINY, np.random.default_rng(1))
    base = prediction_forward(pred, [4, 5, 6]).data
    out = prediction_forward(pred, [4, 6, 4]).data
    assert np.array_equal(out[:2], base[:2])


def test_transformer_prediction_one_layer_manual(f64):
    pred = TransformerPrediction(7, TINY, np.random.default_rng(2))
    ids = np.array([[SOS_ID, 4, 5]])
    layer = pred.layers[0]
    from decoupled_asr.nn import sinusoidal_positions
    x = ad.tensor(pred.weight.data[ids] + sinusoidal_positions(3, 8, np.float64))
    h = layer(x)
    want = pred.final_norm(h).data
    assert np.abs(pred(ids).data - want).max() <= 1e-6


def _model_batch(kind, seed=0, hyper=TransducerHyper()):
    v = tiny_vocab(3)
    lm = tiny_lm(v) if kind == "decoupled" else None
    m = TransducerModel(v, 5, TINY, kind, lm, d_joint=6, hyper=hyper, seed=seed)
    rng = np.random.default_rng(seed)
    b = Batch.from_pairs([rng.normal(size=(6, 5)), rng.normal(size=(4, 5))], [[4, 5, 4], [6]], dtype=np.float64)
    return m, b


def test_loss_weight_collapse(f64):
    m, b = _model_batch("decoupled")
    ctc_only = m.loss(b, TransducerHyper(ctc_weight=1.0)).item()
    enc = m.encode(b.feats, b.feat_lens)
    from decoupled_asr.ctc import ctc_loss_batch
    ctc = ctc_loss_batch(ad.log_softmax(m.ctc_head(enc.h_enc)), b.targets, enc.lengths).data.sum() / b.n_tokens
    assert ctc_only == pytest.approx(ctc, abs=1e-12)
    main = m.loss(b, TransducerHyper(ctc_weight=0.0, main_weight=1.0)).item()
    ac, lm_logits = m.lattice_logits(enc, b.targets)
    nt = combine_nt_logits(ac, lm_logits)
    want = transducer_loss_batch(ad.log_softmax(nt), b.targets, enc.lengths).data.sum() / b.n_tokens
    assert main == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_decoupled_loss_gradient_and_frozen_lm(seed, f64):
    m, b = _model_batch("decoupled", seed)
    m.eval()
    params = m.trainable()
    assert not any(k.startswith("lm.") for k in params)
    errs = ad.grad_check(lambda: m.loss(b), params, max_entries=4, seed=seed)
    assert max(errs.values()) <= 1e-4
    m.zero_grad()
    m.loss(b).backward()
    assert all(p.grad is None for k, p in m.named_parameters() if k.startswith("lm."))


def test_zero_lm_equals_plain_transducer(f64):
    m, b = _model_batch("decoupled", seed=3, hyper=TransducerHyper(ctc_weight=0.0, main_weight=1.0, blank_factor=1.0))
    for p in m.lm.head.parameters().values():
        p.data[:] = 0.0
    enc = m.encode(b.feats, b.feat_lens)
    ac, _ = m.lattice_logits(enc, b.targets)
    plain = transducer_loss_batch(ad.log_softmax(ac), b.targets, enc.lengths).data.sum() / b.n_tokens
    assert m.loss(b).item() == pytest.approx(plain, abs=1e-12)


def test_lattice_rows_normalise(f64):
    m, b = _model_batch("decoupled")
    enc = m.encode(b.feats, b.feat_lens)
    ac, lm_logits = m.lattice_logits(enc, b.targets)
    lp = ad.log_softmax(combine_nt_logits(ac, lm_logits)).data
    assert np.allclose(np.exp(lp).sum(-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", ["stateless", "transformer"])
def test_baseline_gradients(kind, f64):
    m, b = _model_batch(kind, 1)
    m.eval()
    errs = ad.grad_check(lambda: m.loss(b), m.trainable(), max_entries=3)
    assert max(errs.values()) <= 1e-4


def test_step_logits_match_lattice(f64):
    m, b = _model_batch("decoupled", 2)
    m.eval()
    enc = m.encode(b.feats[:1], b.feat_lens[:1])
    y = b.targets[0]
    ac, lm_logits = m.lattice_logits(enc, [y])
    nt = combine_nt_logits(ac, lm_logits).data[0]
    ej = m.prepare(b.feats[0])
    for t in range(3):
        for u in range(len(y) + 1):
            got = m.step_logits(ej[t], [tuple(y[:u])])[0]
            assert np.allclose(got, nt[t, u], atol=1e-10)
