"""Causal Transformer language model: the replaceable internal LM and the fusion LM."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import AttentionConfig, DecoderLayer, LayerNorm, Linear, Module, sinusoidal_positions
from .optim import Adam
from .vocab import EOS_ID, SOS_ID, Vocabulary

logger = logging.getLogger(__name__)


class IncompatibleLMError(ValueError):
    """An LM cannot stand in for another (vocabulary or shape mismatch)."""


class CompatibilityWarning(UserWarning):
    pass


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, lengths.max(initial=0))), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class TokenEmbedding(Module):
    """Token table plus sinusoidal positions."""

    def __init__(self, V: int, d_model: int, rng: np.random.Generator):
        self.weight = ad.parameter(rng.normal(0.0, 1.0, size=(V, d_model)))
        self._d = d_model

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        e = ad.embedding(self.weight, ids)
        return ad.add(e, sinusoidal_positions(ids.shape[-1], self._d, e.dtype))


class LanguageModel(Module):
    """Embedding, ``n_layers`` causal self-layers, final norm, output head.

    ``logits(ids)`` maps sos-prefixed histories (B, n) to next-token logits
    (B, n, V); row i depends only on tokens 0..i.
    """

    def __init__(self, vocab: Vocabulary, cfg: AttentionConfig, seed: int = 0,
                 domain_tag: str = "source", zero_head: bool = True):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.cfg = cfg
        self.domain_tag = domain_tag
        self.lineage: tuple = (f"{domain_tag}:{seed}",)
        self.embed = TokenEmbedding(vocab.V, cfg.d_model, rng)
        self.layers = [DecoderLayer("self_layer", cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, vocab.V, rng, zero=zero_head)
        self.frozen = False

    def freeze(self) -> "LanguageModel":
        self.frozen = True
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        self.eval()
        return self

    def unfreeze(self) -> "LanguageModel":
        self.frozen = False
        for p in self.parameters().values():
            p.requires_grad = True
        return self

    def hidden(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.V):
            raise IndexError(f"token id out of range [0, {self.vocab.V})")
        h = self.embed(ids)
        for layer in self.layers:
            h = layer(h)
        return self.final_norm(h)

    def logits(self, ids: np.ndarray) -> Tensor:
        return self.head(self.hidden(ids))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return self.logits(ids)


def lm_forward(lm: LanguageModel, tokens: Sequence[int]) -> np.ndarray:
    """Raw logits (n, V) for a single sos-prefixed sequence."""
    with ad.no_grad():
        return lm.logits(np.asarray(tokens)[None]).data[0]


def lm_loss(lm: LanguageModel, batch: Sequence[Sequence[int]]) -> Tensor:
    """Mean next-token cross-entropy over sos-prefixed, eos-suffixed sentences."""
    inputs, lengths = pad_batch([[SOS_ID] + list(s) for s in batch])
    targets, _ = pad_batch([list(s) + [EOS_ID] for s in batch])
    logp = ad.log_softmax(lm.logits(inputs))
    valid = np.arange(inputs.shape[1])[None, :] < lengths[:, None]
    onehot = np.zeros(logp.shape, dtype=logp.dtype)
    b, t = np.nonzero(valid)
    onehot[b, t, targets[b, t]] = 1.0
    return ad.scale(ad.tsum(ad.mul(logp, onehot)), -1.0 / valid.sum())


def _train_loop(lm: LanguageModel, corpus, epochs: int, lr: float, seed: int,
                batch_size: int, warmup: int, log_every_epoch: bool = True) -> list[float]:
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(seed)
    # dropout masks follow the training seed
    for m in lm._modules():
        if hasattr(m, "_rng"):
            m._rng = rng
    n_batches = math.ceil(len(corpus) / batch_size)
    opt = Adam(lm.trainable(), lr=lr, warmup=warmup, total_steps=max(1, epochs * n_batches))
    history = []
    lm.train()
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total, count = 0.0, 0
        for i in range(n_batches):
            batch = [corpus[j] for j in order[i * batch_size:(i + 1) * batch_size]]
            opt.zero_grad()
            loss = lm_loss(lm, batch)
            loss.backward()
            opt.step()
            ntok = sum(len(s) + 1 for s in batch)
            total += loss.item() * ntok
            count += ntok
        history.append(total / count)
        if log_every_epoch:
            logger.info("lm %s epoch %d loss %.4f", lm.domain_tag, epoch + 1, history[-1])
    lm.eval()
    return history


def lm_train(corpus, vocab: Vocabulary, cfg: AttentionConfig, epochs: int = 3, lr: float = 2e-3,
             seed: int = 0, batch_size: int = 64, domain_tag: str = "source",
             history: list | None = None) -> LanguageModel:
    """Train a fresh LM on ``corpus`` (list of token id lists, no sos/eos)."""
    if not corpus:
        raise ValueError("empty training corpus")
    lm = LanguageModel(vocab, cfg, seed=seed, domain_tag=domain_tag)
    h = _train_loop(lm, corpus, epochs, lr, seed, batch_size, warmup=min(200, 4 * len(corpus) // batch_size + 1))
    if history is not None:
        history.extend(h)
    return lm


def lm_finetune(lm: LanguageModel, corpus, epochs: int = 2, lr: float = 1e-3, seed: int = 0,
                batch_size: int = 64, domain_tag: str = "target", vocab: Vocabulary | None = None,
                history: list | None = None) -> LanguageModel:
    """Continue training a copy of ``lm`` on ``corpus``; the input LM is untouched."""
    if vocab is not None and vocab != lm.vocab:
        raise IncompatibleLMError("fine-tuning corpus vocabulary differs from the LM vocabulary")
    new = copy.deepcopy(lm)
    new.unfreeze()
    new.domain_tag = domain_tag
    new.lineage = lm.lineage + (f"{domain_tag}:{seed}",)
    if epochs > 0:
        h = _train_loop(new, corpus, epochs, lr, seed, batch_size, warmup=0)
        if history is not None:
            history.extend(h)
    new.eval()
    return new


def check_swap_compatible(current: LanguageModel, new: LanguageModel) -> None:
    """Raise on vocabulary/shape mismatch; warn when ``new`` is not derived from ``current``."""
    if new.vocab.digest() != current.vocab.digest():
        raise IncompatibleLMError("replacement LM vocabulary differs from the model's LM vocabulary")
    if new.cfg.d_model != current.cfg.d_model:
        raise IncompatibleLMError("replacement LM embedding width differs")
    if current.lineage[0] != new.lineage[0]:
        warnings.warn("replacement LM was not fine-tuned from the model's source LM",
                      CompatibilityWarning, stacklevel=3)


def lm_sequence_logprob(lm: LanguageModel, tokens: Sequence[int], include_eos: bool = False) -> float:
    """Sum of log p(y_i | sos, y_<i) over ``tokens`` (no sos), optionally plus eos."""
    tokens = list(tokens)
    if not tokens and not include_eos:
        raise ValueError("empty token sequence")
    targets = tokens + ([EOS_ID] if include_eos else [])
    with ad.no_grad():
        logp = ad.log_softmax(lm.logits(np.asarray([SOS_ID] + tokens)[None])).data[0]
    return float(sum(logp[i, y] for i, y in enumerate(targets)))


def next_token_logprobs(lm: LanguageModel, histories: Sequence[Sequence[int]]) -> np.ndarray:
    """log p(. | sos + history) for each history; shape (H, V)."""
    ids, lengths = pad_batch([[SOS_ID] + list(h) for h in histories])
    with ad.no_grad():
        logp = ad.log_softmax(lm.logits(ids)).data
    return logp[np.arange(len(histories)), lengths - 1]


def perplexity(lm: LanguageModel, corpus, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(corpus), batch_size):
            batch = corpus[i:i + batch_size]
            ntok = sum(len(s) + 1 for s in batch)
            total += lm_loss(lm, batch).item() * ntok
            count += ntok
    return math.exp(total / count)
