"""Attention-based encoder-decoder models: standard, Preformer and decoupled.

The decoupled decoder splits into an acoustic stack of cross-layers (no
token-to-token attention) producing logits^AC and a frozen, replaceable
internal LM producing logits^LM; decoding uses logits^AC + beta * logits^LM.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .batch import Batch
from .ctc import ctc_loss_batch
from .lm import LanguageModel, TokenEmbedding, check_swap_compatible, pad_batch
from .nn import (AttentionConfig, DecoderLayer, Encoder, EncoderOutput, LayerNorm, Linear, Mask, Module,
                 NO_MASK, sinusoidal_positions)
from .vocab import EOS_ID, SOS_ID, Vocabulary

VARIANTS = ("standard", "preformer", "decoupled")


@dataclass(frozen=True)
class AedHyper:
    ctc_weight: float = 0.3        # gamma
    main_weight: float = 0.5       # eta
    lm_weight: float = 0.5         # beta
    decode_ctc_weight: float = 0.3  # mu
    label_smoothing: float = 0.1

    def __post_init__(self):
        for k in ("ctc_weight", "main_weight", "decode_ctc_weight"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be non-negative")


def combine_dec_logits(ac, lm, beta: float):
    """logits^AC + beta * logits^LM for tensors or arrays of equal shape."""
    if tuple(ac.shape) != tuple(lm.shape):
        raise DimensionError(f"logit shapes differ: {ac.shape} vs {lm.shape}")
    if isinstance(ac, Tensor) or isinstance(lm, Tensor):
        return ad.add(ac, ad.scale(lm if isinstance(lm, Tensor) else ad.tensor(lm, dtype=ac.dtype), beta))
    if beta == 0:
        return ac.copy()
    return ac + beta * lm


def smoothed_ce(logits: Tensor, targets: np.ndarray, valid: np.ndarray, smoothing: float) -> Tensor:
    """Summed cross-entropy over valid positions against label-smoothed targets."""
    V = logits.shape[-1]
    logp = ad.log_softmax(logits)
    dist = np.zeros(logits.shape, dtype=logits.dtype)
    if smoothing > 0:
        dist[:] = smoothing / (V - 1)
    b, t = np.nonzero(valid)
    dist[b, t, targets[b, t]] = 1.0 - smoothing
    dist *= valid[..., None]
    return ad.scale(ad.tsum(ad.mul(logp, dist)), -1.0)


class AedModel(Module):
    def __init__(self, vocab: Vocabulary, input_dim: int, cfg: AttentionConfig, variant: str = "decoupled",
                 lm: LanguageModel | None = None, hyper: AedHyper = AedHyper(), mask: Mask = NO_MASK,
                 cross_ff: bool = True, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown AED variant {variant!r}")
        if variant == "decoupled" and lm is None:
            raise ValueError("decoupled AED needs an internal LM")
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.variant = variant
        self.hyper = hyper
        self.mask = mask
        self._cross_ff = cross_ff
        self.encoder = Encoder(input_dim, cfg, rng)
        self.ctc_head = Linear(cfg.d_model, vocab.V, rng)
        n = cfg.n_layers
        if variant == "standard":
            self.embed = TokenEmbedding(vocab.V, cfg.d_model, rng)
            self.layers = [DecoderLayer("interleaved", cfg, rng) for _ in range(n)]
        elif variant == "preformer":
            self.embed = TokenEmbedding(vocab.V, cfg.d_model, rng)
            self.self_layers = [DecoderLayer("self_layer", cfg, rng) for _ in range(n)]
            self.cross_layers = [DecoderLayer("cross_layer", cfg, rng, cross_ff) for _ in range(n)]
        else:
            lm.freeze()
            self.embed = lm.embed
            self.cross_layers = [DecoderLayer("cross_layer", cfg, rng, cross_ff) for _ in range(n)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, vocab.V, rng)
        self._lm = lm if variant == "decoupled" else None

    @property
    def lm(self) -> LanguageModel | None:
        return self._lm

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self._lm is not None:
            yield from self._lm.named_parameters(prefix + "lm.")

    def init_self_layers_from_lm(self, lm: LanguageModel) -> None:
        """Preformer: copy embedding and self-layer weights from a trained LM."""
        if self.variant != "preformer":
            raise ValueError("only the Preformer has separately pre-trainable self-layers")
        src = lm.parameters()
        for name, p in self.parameters().items():
            if name.startswith("embed.") or name.startswith("self_layers."):
                key = name.replace("self_layers.", "layers.")
                p.data = src[key].data.copy()

    def with_lm(self, lm: LanguageModel, swap_embedding: bool = False) -> "AedModel":
        """Shallow copy with a different internal LM; acoustic parameters are shared."""
        if self.variant != "decoupled":
            raise ValueError("only decoupled models have a replaceable internal LM")
        check_swap_compatible(self._lm, lm)
        new = object.__new__(AedModel)
        new.__dict__.update(self.__dict__)
        new._lm = lm if lm.frozen else lm.freeze()
        if swap_embedding:
            new.embed = lm.embed
        return new

    # -- forward -------------------------------------------------------------
    def encode(self, feats, lengths=None) -> EncoderOutput:
        return self.encoder(feats, lengths, self.mask)

    def acoustic_stack(self, emb: Tensor, enc: EncoderOutput) -> Tensor:
        h = emb
        for layer in self.cross_layers:
            h = layer(h, enc.h_enc, None, enc.cross_allowed())
        return self.head(self.final_norm(h))

    def decoder_logits(self, hist: np.ndarray, enc: EncoderOutput):
        """Teacher-forced logits for sos-prefixed histories (B, n).

        Standard/Preformer return one tensor; decoupled returns (logits^AC, logits^LM).
        """
        if enc is None:
            raise ContractError("decoder needs the encoder output")
        emb = self.embed(hist)
        if self.variant == "decoupled":
            return self.acoustic_stack(emb, enc), self._lm.logits(hist)
        h = emb
        if self.variant == "standard":
            for layer in self.layers:
                h = layer(h, enc.h_enc, None, enc.cross_allowed())
        else:
            for layer in self.self_layers:
                h = layer(h)
            for layer in self.cross_layers:
                h = layer(h, enc.h_enc, None, enc.cross_allowed())
        return self.head(self.final_norm(h))

    def loss(self, batch: Batch, hyper: AedHyper | None = None) -> Tensor:
        """gamma*L_ctc + (1-gamma)*L_att with per-token normalisation.

        Decoupled: L_att = eta*CE(logits^Dec) + (1-eta)*CE(logits^AC).
        """
        h = hyper or self.hyper
        enc = self.encode(batch.feats, batch.feat_lens)
        terms = []
        if h.ctc_weight > 0:
            ctc_lp = ad.log_softmax(self.ctc_head(enc.h_enc))
            l_ctc = ad.tsum(ctc_loss_batch(ctc_lp, batch.targets, enc.lengths))
            terms.append(ad.scale(l_ctc, h.ctc_weight / max(1, batch.n_tokens)))
        if h.ctc_weight < 1:
            hist, lens = pad_batch([[SOS_ID] + y for y in batch.targets], pad=EOS_ID)
            tgt, _ = pad_batch([y + [EOS_ID] for y in batch.targets], pad=EOS_ID)
            valid = np.arange(hist.shape[1])[None, :] < lens[:, None]
            n_pos = valid.sum()
            rest = 1.0 - h.ctc_weight
            out = self.decoder_logits(hist, enc)
            ls = h.label_smoothing
            if self.variant == "decoupled":
                ac, lm_logits = out
                if h.main_weight > 0:
                    dec = combine_dec_logits(ac, lm_logits, h.lm_weight)
                    terms.append(ad.scale(smoothed_ce(dec, tgt, valid, ls), rest * h.main_weight / n_pos))
                if h.main_weight < 1:
                    terms.append(ad.scale(smoothed_ce(ac, tgt, valid, ls), rest * (1 - h.main_weight) / n_pos))
            else:
                terms.append(ad.scale(smoothed_ce(out, tgt, valid, ls), rest / n_pos))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    # -- decoding helpers ----------------------------------------------------
    def prepare(self, feats: np.ndarray):
        """Encoder output and CTC log-probs (T, V) for one utterance."""
        with ad.no_grad():
            feats = np.asarray(feats, dtype=self.encoder.in_proj.weight.dtype)
            enc = self.encode(feats[None])
            ctc_lp = ad.log_softmax(self.ctc_head(enc.h_enc)).data[0]
        return enc, ctc_lp

    def next_logits(self, enc: EncoderOutput, histories: Sequence[Sequence[int]], lm_cache: dict | None = None,
                    beta: float | None = None) -> np.ndarray:
        """Decoder logits (H, V) for the next token after each history (no sos)."""
        beta = self.hyper.lm_weight if beta is None else beta
        H = len(histories)
        with ad.no_grad():
            if self.variant == "decoupled":
                # positions are independent in the acoustic stack: evaluate only the last one
                last = np.array([h[-1] if h else SOS_ID for h in histories])
                pos = np.array([len(h) for h in histories])
                width = self.cfg.d_model
                pe = sinusoidal_positions(int(pos.max()) + 1, width, self.embed.weight.dtype)[pos]
                # the H last positions become H query rows of a single sequence
                emb = ad.add(ad.embedding(self.embed.weight, last[None, :]), pe[None])
                ac = self.acoustic_stack(emb, enc).data[0]
                if beta == 0:
                    return ac
                lm_rows = self.lm_logits_for(histories, lm_cache)
                return combine_dec_logits(ac, lm_rows, beta)
            ids, lens = pad_batch([[SOS_ID] + list(h) for h in histories], pad=EOS_ID)
            logits = self.decoder_logits(ids, _repeat_enc(enc, H)).data
            return logits[np.arange(H), lens - 1]

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
            ids, lens = pad_batch([[SOS_ID] + list(histories[i]) for i in todo], pad=EOS_ID)
            with ad.no_grad():
                out = self._lm.logits(ids).data
            for j, i in enumerate(todo):
                rows[i] = out[j, lens[j] - 1]
                if cache is not None:
                    cache[tuple(histories[i])] = rows[i]
        return np.stack(rows)


def _repeat_enc(enc: EncoderOutput, H: int) -> EncoderOutput:
    h = enc.h_enc.data
    return EncoderOutput(Tensor(np.broadcast_to(h, (H,) + h.shape[1:])), np.repeat(enc.lengths[:1], H))


def standard_decoder_forward(model: AedModel, y_hist: Sequence[int], enc: EncoderOutput) -> Tensor:
    """Logits (n, V) for one sos-prefixed history (standard / Preformer)."""
    if model.variant == "decoupled":
        raise ValueError("use acoustic_stack_forward for decoupled models")
    return ad.reshape(model.decoder_logits(np.asarray(y_hist)[None], enc), (len(y_hist), -1))


def acoustic_stack_forward(model: AedModel, y_hist: Sequence[int], enc: EncoderOutput) -> Tensor:
    """logits^AC (n, V) for one sos-prefixed history."""
    if enc is None:
        raise ContractError("acoustic stack needs the encoder output")
    emb = model.embed(np.asarray(y_hist)[None])
    return ad.reshape(model.acoustic_stack(emb, enc), (len(y_hist), -1))


def aed_loss(batch: Batch, model: AedModel, hyper: AedHyper | None = None) -> Tensor:
    return model.loss(batch, hyper)
