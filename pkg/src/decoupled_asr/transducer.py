"""Neural transducer: prediction networks, joint network, lattice loss, decoupled logits.

Lattice convention: ``log_probs[t, u, k]`` is the log-probability of emitting
``k`` at frame ``t`` after ``u`` labels.  Emitting ``y[u]`` moves to
``(t, u+1)``; blank moves to ``(t+1, u)``; a path ends with the blank
emitted at ``(T-1, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .batch import Batch
from .ctc import ctc_loss_batch
from .lm import LanguageModel, check_swap_compatible, pad_batch
from .nn import (AttentionConfig, DecoderLayer, Encoder, LayerNorm, Linear, Mask, Module, NO_MASK,
                 sinusoidal_positions)
from .vocab import BLANK_ID, SOS_ID, Vocabulary

NEG_INF = -np.inf


@dataclass(frozen=True)
class TransducerHyper:
    ctc_weight: float = 0.3        # lambda
    main_weight: float = 0.5       # eta'
    blank_factor: float = 2.0

    def __post_init__(self):
        for k in ("ctc_weight", "main_weight"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")


# ---------------------------------------------------------------------------
# lattice loss
# ---------------------------------------------------------------------------

def _lattice_terms(lp: np.ndarray, targets, T_lens, blank: int):
    B, T, U, V = lp.shape
    N_lens = np.array([len(y) for y in targets], dtype=np.int64)
    ys = np.zeros((B, max(U - 1, 1)), dtype=np.int64)
    for b, y in enumerate(targets):
        ys[b, : len(y)] = y
    blank_lp = lp[..., blank]                                         # (B, T, U)
    emit = np.zeros((B, T, U))
    if U > 1:
        emit[:, :, :-1] = np.take_along_axis(lp[:, :, :-1, :], ys[:, None, :, None], axis=3)[..., 0]
    u_valid = np.arange(U)[None, :] < N_lens[:, None]                 # emit allowed from u
    emit = np.where(u_valid[:, None, :], emit, 0.0)
    return blank_lp, emit, N_lens


def _forward(blank_lp, emit, N_lens, T_lens):
    B, T, U = blank_lp.shape
    E = np.concatenate([np.zeros((B, T, 1)), np.cumsum(emit, axis=2)[:, :, :-1]], axis=2)
    alpha = np.full((B, T, U), NEG_INF)
    A = np.full((B, U), NEG_INF)
    A[:, 0] = 0.0
    for t in range(T):
        if t > 0:
            A = alpha[:, t - 1] + blank_lp[:, t - 1]
        alpha[:, t] = E[:, t] + np.logaddexp.accumulate(A - E[:, t], axis=1)
    u_ok = np.arange(U)[None, :] <= N_lens[:, None]
    alpha = np.where(u_ok[:, None, :], alpha, NEG_INF)
    bidx = np.arange(B)
    loglik = alpha[bidx, T_lens - 1, N_lens] + blank_lp[bidx, T_lens - 1, N_lens]
    return alpha, loglik


def _backward(blank_lp, emit, N_lens, T_lens):
    B, T, U = blank_lp.shape
    u_ok = np.arange(U)[None, :] <= N_lens[:, None]
    F = np.concatenate([np.zeros((B, T, 1)), np.cumsum(emit, axis=2)[:, :, :-1]], axis=2)
    beta = np.full((B, T, U), NEG_INF)
    last = T_lens - 1
    for t in range(T - 1, -1, -1):
        Bk = np.full((B, U), NEG_INF)
        is_last = t == last
        bidx = np.nonzero(is_last)[0]
        Bk[bidx, N_lens[bidx]] = blank_lp[bidx, t, N_lens[bidx]]
        if t + 1 < T:
            inner = beta[:, t + 1] + blank_lp[:, t]
            Bk = np.where((t < last)[:, None], inner, Bk)
        Bk = np.where(u_ok, Bk, NEG_INF)
        rev = np.logaddexp.accumulate((Bk + F[:, t])[:, ::-1], axis=1)[:, ::-1]
        beta[:, t] = np.where((t <= last)[:, None] & u_ok, rev - F[:, t], NEG_INF)
    return beta


def transducer_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], input_lengths=None,
                          blank_id: int = BLANK_ID) -> Tensor:
    """Per-utterance transducer NLL, shape (B,); ``log_probs`` is (B, T, N_max+1, V)."""
    B, T, U, V = log_probs.shape
    if T == 0:
        raise ContractError("transducer loss needs at least one frame")
    targets = [list(map(int, y)) for y in targets]
    if len(targets) != B or max((len(y) for y in targets), default=0) + 1 > U:
        raise DimensionError(f"lattice {log_probs.shape} inconsistent with targets")
    T_lens = np.full(B, T, dtype=np.int64) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if (T_lens < 1).any():
        raise ContractError("transducer loss needs at least one frame")
    lp = log_probs.data.astype(np.float64)
    blank_lp, emit, N_lens = _lattice_terms(lp, targets, T_lens, blank_id)
    with np.errstate(invalid="ignore"):
        alpha, loglik = _forward(blank_lp, emit, N_lens, T_lens)
    nll = (-loglik).astype(log_probs.dtype)

    def backward(g):
        with np.errstate(invalid="ignore"):
            beta = _backward(blank_lp, emit, N_lens, T_lens)
        bidx = np.arange(B)
        last = T_lens - 1
        # blank transitions (t, u) -> (t+1, u), plus the terminal blank
        nxt = np.full((B, T, U), NEG_INF)
        nxt[:, :-1] = beta[:, 1:]
        t_ar = np.arange(T)[None, :, None]
        nxt = np.where(t_ar < last[:, None, None], nxt, NEG_INF)
        nxt[bidx, last, N_lens] = 0.0
        with np.errstate(invalid="ignore"):
            gb = alpha + blank_lp + nxt - loglik[:, None, None]
            gb = np.where(np.isfinite(gb), np.exp(gb), 0.0)
            nxt_u = np.full((B, T, U), NEG_INF)
            nxt_u[:, :, :-1] = beta[:, :, 1:]
            u_valid = np.arange(U)[None, None, :] < N_lens[:, None, None]
            ge = alpha + emit + nxt_u - loglik[:, None, None]
            ge = np.where(np.isfinite(ge) & u_valid, np.exp(ge), 0.0)
        grad = np.zeros((B, T, U, V))
        grad[..., blank_id] -= gb
        if U > 1:
            ys = np.zeros((B, U), dtype=np.int64)
            for b, y in enumerate(targets):
                ys[b, : len(y)] = y
            bi, ti, ui = np.meshgrid(np.arange(B), np.arange(T), np.arange(U), indexing="ij")
            ki = np.broadcast_to(ys[:, None, :], (B, T, U))
            np.add.at(grad, (bi, ti, ui, ki), -ge)
        grad *= np.asarray(g, dtype=np.float64)[:, None, None, None]
        return (grad.astype(log_probs.dtype),)

    return ad._make(nll, (log_probs,), backward)


def transducer_loss(log_probs: Tensor, y: Sequence[int], blank_id: int = BLANK_ID) -> Tensor:
    """Scalar loss for one utterance; ``log_probs`` is (T, N+1, V)."""
    lp = log_probs if isinstance(log_probs, Tensor) else ad.tensor(log_probs)
    if lp.shape[0] == 0:
        raise ContractError("transducer loss needs at least one frame")
    out = transducer_loss_batch(ad.reshape(lp, (1,) + lp.shape), [y], blank_id=blank_id)
    return ad.reshape(out, ())


# ---------------------------------------------------------------------------
# logit combination
# ---------------------------------------------------------------------------

def combine_nt_logits(ac, lm, blank_id: int = BLANK_ID, blank_factor: float = 2.0):
    """Blank logit from the acoustic side (scaled), other logits acoustic + LM.

    Works on numpy arrays or tensors; ``lm`` may broadcast against ``ac``.
    """
    is_tensor = isinstance(ac, Tensor) or isinstance(lm, Tensor)
    ac_shape = ac.shape
    lm_shape = lm.shape
    if ac_shape[-1] != lm_shape[-1]:
        raise DimensionError(f"logit shapes differ: {ac_shape} vs {lm_shape}")
    V = ac_shape[-1]
    dtype = (ac.dtype if not isinstance(ac, Tensor) else ac.data.dtype)
    blank_col = np.zeros(V, dtype=dtype)
    blank_col[blank_id] = 1.0
    if not is_tensor:
        if np.broadcast_shapes(ac_shape, lm_shape) != tuple(ac_shape):
            raise DimensionError(f"logit shapes differ: {ac_shape} vs {lm_shape}")
        out = ac + lm * (1 - blank_col)
        out[..., blank_id] = blank_factor * ac[..., blank_id]
        return out
    ac = ac if isinstance(ac, Tensor) else Tensor(np.asarray(ac, dtype=dtype))
    lm = lm if isinstance(lm, Tensor) else Tensor(np.asarray(lm, dtype=dtype))
    out = ad.add(ac, ad.mul(lm, 1 - blank_col))
    if blank_factor != 1.0:
        out = ad.add(out, ad.mul(ac, blank_col * (blank_factor - 1.0)))
    return out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class JointNetwork(Module):
    """out_proj(tanh(enc_proj(h_enc) + pre_proj(h_pre)))."""

    def __init__(self, d_model: int, d_joint: int, V: int, rng: np.random.Generator):
        self.enc_proj = Linear(d_model, d_joint, rng)
        self.pre_proj = Linear(d_model, d_joint, rng, bias=False)
        self.out_proj = Linear(d_joint, V, rng)

    def lattice(self, h_enc: Tensor, h_pre: Tensor) -> Tensor:
        """(B, T, d) x (B, U, d) -> logits (B, T, U, V)."""
        e = self.enc_proj(h_enc)
        p = self.pre_proj(h_pre)
        B, T, J = e.shape
        U = p.shape[1]
        z = ad.add(ad.reshape(e, (B, T, 1, J)), ad.reshape(p, (B, 1, U, J)))
        return self.out_proj(ad.tanh(z))

    def __call__(self, h_enc_t: Tensor, h_pre_u: Tensor) -> Tensor:
        return self.out_proj(ad.tanh(ad.add(self.enc_proj(h_enc_t), self.pre_proj(h_pre_u))))


def joint_forward(h_enc_t, h_pre_u, joint: JointNetwork) -> Tensor:
    h_enc_t = h_enc_t if isinstance(h_enc_t, Tensor) else ad.tensor(h_enc_t)
    h_pre_u = h_pre_u if isinstance(h_pre_u, Tensor) else ad.tensor(h_pre_u)
    if h_enc_t.ndim == 1 and h_pre_u.ndim == 1:
        out = joint(ad.reshape(h_enc_t, (1, -1)), ad.reshape(h_pre_u, (1, -1)))
        return ad.reshape(out, (out.shape[-1],))
    return joint(h_enc_t, h_pre_u)


class StatelessPrediction(Module):
    """Row u is the embedding of the previous token (sos for u = 0)."""

    kind = "stateless"

    def __init__(self, V: int, d_model: int, rng: np.random.Generator, table: Tensor | None = None):
        self.weight = table if table is not None else ad.parameter(rng.normal(0.0, 1.0, size=(V, d_model)))

    def __call__(self, histories: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, histories)


class TransformerPrediction(Module):
    """Causal self-layer stack over sos-prefixed histories."""

    kind = "transformer"

    def __init__(self, V: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.weight = ad.parameter(rng.normal(0.0, 1.0, size=(V, cfg.d_model)))
        self.layers = [DecoderLayer("self_layer", cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self._d = cfg.d_model

    def __call__(self, histories: np.ndarray) -> Tensor:
        histories = np.asarray(histories)
        h = ad.add(ad.embedding(self.weight, histories),
                   sinusoidal_positions(histories.shape[-1], self._d, self.weight.dtype))
        for layer in self.layers:
            h = layer(h)
        return self.final_norm(h)


def prediction_forward(pred: Module, y: Sequence[int]) -> Tensor:
    """h_pre for one label sequence: (N+1, d_model), row u sees sos + y[:u]."""
    ids = np.asarray([SOS_ID] + list(y))[None]
    return ad.reshape(pred(ids), (len(y) + 1, -1))


class TransducerModel(Module):
    """Transducer with ``pred_kind`` in {stateless, transformer, decoupled}.

    The decoupled kind reads token embeddings from the frozen internal LM's
    table (stateless acoustic prediction) and adds the LM's non-blank logits
    to the acoustic joint logits.
    """

    def __init__(self, vocab: Vocabulary, input_dim: int, cfg: AttentionConfig, pred_kind: str = "decoupled",
                 lm: LanguageModel | None = None, d_joint: int = 64, mask: Mask = NO_MASK,
                 hyper: TransducerHyper = TransducerHyper(), seed: int = 0):
        if pred_kind not in ("stateless", "transformer", "decoupled"):
            raise ValueError(f"unknown prediction kind {pred_kind!r}")
        if pred_kind == "decoupled" and lm is None:
            raise ValueError("decoupled transducer needs an internal LM")
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.pred_kind = pred_kind
        self.mask = mask
        self.hyper = hyper
        self.encoder = Encoder(input_dim, cfg, rng)
        self.ctc_head = Linear(cfg.d_model, vocab.V, rng)
        if pred_kind == "transformer":
            self.prediction = TransformerPrediction(vocab.V, cfg, rng)
        elif pred_kind == "stateless":
            self.prediction = StatelessPrediction(vocab.V, cfg.d_model, rng)
        else:
            lm.freeze()
            self.prediction = StatelessPrediction(vocab.V, cfg.d_model, rng, table=lm.embed.weight)
        self.joint = JointNetwork(cfg.d_model, d_joint, vocab.V, rng)
        self._lm = lm

    @property
    def lm(self) -> LanguageModel | None:
        return self._lm

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self._lm is not None:
            yield from self._lm.named_parameters(prefix + "lm.")

    def with_lm(self, lm: LanguageModel, swap_embedding: bool = False) -> "TransducerModel":
        """Shallow copy whose internal LM is ``lm``; every other parameter is shared."""
        if self.pred_kind != "decoupled":
            raise ValueError("only decoupled models have a replaceable internal LM")
        check_swap_compatible(self._lm, lm)
        new = object.__new__(TransducerModel)
        new.__dict__.update(self.__dict__)
        new._lm = lm.freeze() if not lm.frozen else lm
        if swap_embedding:
            new.prediction = StatelessPrediction(self.vocab.V, self.cfg.d_model, None, table=lm.embed.weight)
        return new

    # -- training ----------------------------------------------------------
    def encode(self, feats, lengths=None):
        return self.encoder(feats, lengths, self.mask)

    def lattice_logits(self, enc, targets: Sequence[Sequence[int]]):
        """Acoustic lattice logits (B, T, U, V) and, if decoupled, the LM logits (B, 1, U, V)."""
        hist, _ = pad_batch([[SOS_ID] + list(y) for y in targets], pad=SOS_ID)
        ac = self.joint.lattice(enc.h_enc, self.prediction(hist))
        lm_logits = None
        if self.pred_kind == "decoupled":
            lm_logits = self._lm.logits(hist)
            lm_logits = ad.reshape(lm_logits, (lm_logits.shape[0], 1) + lm_logits.shape[1:])
        return ac, lm_logits

    def loss(self, batch: Batch, hyper: TransducerHyper | None = None) -> Tensor:
        """lambda*L_ctc + (1-lambda)*(eta'*L_nt(logits^NT) + (1-eta')*L_nt(logits^AC)).

        Baseline kinds use lambda*L_ctc + (1-lambda)*L_nt.  Every term is
        normalised by the number of target labels in the batch.
        """
        h = hyper or self.hyper
        enc = self.encode(batch.feats, batch.feat_lens)
        n_tok = max(1, batch.n_tokens)
        terms = []
        if h.ctc_weight > 0:
            ctc_lp = ad.log_softmax(self.ctc_head(enc.h_enc))
            l_ctc = ad.scale(ad.tsum(ctc_loss_batch(ctc_lp, batch.targets, enc.lengths)), 1.0 / n_tok)
            terms.append(ad.scale(l_ctc, h.ctc_weight))
        if h.ctc_weight < 1:
            ac, lm_logits = self.lattice_logits(enc, batch.targets)
            rest = 1.0 - h.ctc_weight
            if lm_logits is None:
                l_nt = transducer_loss_batch(ad.log_softmax(ac), batch.targets, enc.lengths)
                terms.append(ad.scale(ad.tsum(l_nt), rest / n_tok))
            else:
                if h.main_weight > 0:
                    nt = combine_nt_logits(ac, lm_logits, BLANK_ID, h.blank_factor)
                    l_main = transducer_loss_batch(ad.log_softmax(nt), batch.targets, enc.lengths)
                    terms.append(ad.scale(ad.tsum(l_main), rest * h.main_weight / n_tok))
                if h.main_weight < 1:
                    l_aux = transducer_loss_batch(ad.log_softmax(ac), batch.targets, enc.lengths)
                    terms.append(ad.scale(ad.tsum(l_aux), rest * (1 - h.main_weight) / n_tok))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    # -- decoding helpers ----------------------------------------------------
    def prepare(self, feats: np.ndarray) -> np.ndarray:
        """Encoder output projected into the joint space, (T, d_joint)."""
        with ad.no_grad():
            enc = self.encode(np.asarray(feats, dtype=self.encoder.in_proj.weight.dtype)[None])
            return self.joint.enc_proj(enc.h_enc).data[0]

    def step_logits(self, enc_t: np.ndarray, histories: Sequence[Sequence[int]], lm_cache: dict | None = None,
                    mode: str = "combined") -> np.ndarray:
        """Logits (H, V) at one frame for each token history.

        ``mode``: "combined" (logits^NT), "acoustic" (logits^AC).
        """
        with ad.no_grad():
            last = np.array([[h[-1] if h else SOS_ID] for h in histories])
            if self.pred_kind == "transformer":
                ids, lens = pad_batch([[SOS_ID] + list(h) for h in histories], pad=SOS_ID)
                hp = self.prediction(ids).data[np.arange(len(histories)), lens - 1]
            else:
                hp = self.prediction(last).data[:, 0]
            p = self.joint.pre_proj(Tensor(hp)).data
            ac = self.joint.out_proj(Tensor(np.tanh(enc_t[None] + p))).data
            if self.pred_kind != "decoupled" or mode == "acoustic":
                return ac
            lm_rows = self.lm_logits_for(histories, lm_cache)
            return combine_nt_logits(ac, lm_rows, BLANK_ID, self.hyper.blank_factor)

    def lm_logits_for(self, histories, cache: dict | None) -> np.ndarray:
        rows = [None] * len(histories)
        todo = []
        for i, h in enumerate(histories):
            key = tuple(h)
            if cache is not None and key in cache:
                rows[i] = cache[key]
            else:
                todo.append(i)
        if todo:
            ids, lens = pad_batch([[SOS_ID] + list(histories[i]) for i in todo], pad=SOS_ID)
            with ad.no_grad():
                out = self._lm.logits(ids).data
            for j, i in enumerate(todo):
                rows[i] = out[j, lens[j] - 1]
                if cache is not None:
                    cache[tuple(histories[i])] = rows[i]
        return np.stack(rows)
