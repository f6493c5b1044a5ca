"""Transformer building blocks: attention, masks, encoder and decoder layers.

All layers use the pre-layer-norm residual arrangement and operate on
batched inputs shaped ``(B, n, d_model)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        for k in ("d_model", "heads", "d_ff", "n_layers"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mask:
    """Self-attention visibility pattern.

    ``kind`` is ``"none"``, ``"causal"`` or ``"chunk"``; chunk masks let a
    frame see its own chunk and every earlier chunk.
    """

    kind: str = "none"
    chunk_frames: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "causal", "chunk"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "chunk" and self.chunk_frames < 1:
            raise ValueError("chunk masks need chunk_frames >= 1")

    def allowed(self, n: int) -> np.ndarray | None:
        """Boolean ``(n, n)`` matrix, or None when everything is visible."""
        if self.kind == "none":
            return None
        i = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        if self.kind == "causal":
            return j <= i
        return (j // self.chunk_frames) <= (i // self.chunk_frames)


NO_MASK = Mask("none")
CAUSAL = Mask("causal")


def combine_masks(allowed: np.ndarray | None, key_valid: np.ndarray | None) -> np.ndarray | None:
    """Merge an ``(n_q, n_k)`` pattern with a ``(B, n_k)`` key-padding mask.

    Returns an array broadcastable to ``(B, H, n_q, n_k)``.
    """
    if allowed is None and key_valid is None:
        return None
    if key_valid is None:
        return allowed[None, None]
    kv = key_valid[:, None, None, :]
    if allowed is None:
        return kv
    return allowed[None, None] & kv


# ---------------------------------------------------------------------------
# parameter container
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container; submodules and tensors are found by attribute."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val._modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item._modules()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else _init(rng, d_in, (d_in, d_out))
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            lead = x.shape[:-1]
            y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), self.weight)
            y = ad.reshape(y, lead + (y.shape[-1],))
        else:
            y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self._rng, self.training)


def sinusoidal_positions(n: int, d: int, dtype=None) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe.astype(dtype or ad.get_default_dtype())


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray | None = None,
                         dropout: Dropout | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with disallowed scores filled before the softmax.

    ``q``: (..., n_q, d_k), ``k``: (..., n_k, d_k), ``v``: (..., n_k, d_v).
    ``allowed`` broadcasts to (..., n_q, n_k); every query row must keep at
    least one key.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    d_k = q.shape[-1]
    kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(d_k))
    if allowed is not None:
        allowed = np.broadcast_to(allowed, scores.shape)
        if not allowed.any(axis=-1).all():
            raise ContractError("attention mask leaves a query row with no visible key")
        scores = ad.masked_fill(scores, ~allowed, ad.mask_fill_value(scores.dtype))
    probs = ad.softmax(scores, axis=-1)
    if dropout is not None:
        probs = dropout(probs)
    return ad.matmul(probs, v)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.heads = cfg.heads
        self.q_proj = Linear(d, d, rng)
        # no key bias: it shifts every score of a query equally, so it never affects the output
        self.k_proj = Linear(d, d, rng, bias=False)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.attn_drop = Dropout(cfg.dropout, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        return ad.transpose(ad.reshape(x, (B, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        B, n_q, d = x_q.shape
        q = self._split(self.q_proj(x_q))
        k = self._split(self.k_proj(x_kv))
        v = self._split(self.v_proj(x_kv))
        ctx = scaled_dot_attention(q, k, v, allowed, self.attn_drop)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, n_q, d))
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.w1 = Linear(cfg.d_model, cfg.d_ff, rng)
        self.w2 = Linear(cfg.d_ff, cfg.d_model, rng)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(self.drop(ad.gelu(self.w1(x))))


class EncoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.ff = FeedForward(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor, allowed: np.ndarray | None) -> Tensor:
        h = self.norm1(x)
        x = ad.add(x, self.drop(self.self_attn(h, h, allowed)))
        return ad.add(x, self.drop(self.ff(self.norm2(x))))


class DecoderLayer(Module):
    """One decoder layer of kind ``self_layer``, ``cross_layer`` or ``interleaved``.

    self_layer: causal self-attention + feed-forward (no encoder access).
    cross_layer: cross-attention over the encoder output + feed-forward; no
    token-to-token interaction, so each position is computed independently.
    interleaved: self-attention, cross-attention, feed-forward.
    """

    KINDS = ("self_layer", "cross_layer", "interleaved")

    def __init__(self, kind: str, cfg: AttentionConfig, rng: np.random.Generator,
                 cross_ff: bool = True):
        if kind not in self.KINDS:
            raise ValueError(f"unknown decoder layer kind {kind!r}")
        self.kind = kind
        d = cfg.d_model
        self.drop = Dropout(cfg.dropout, rng)
        if kind in ("self_layer", "interleaved"):
            self.self_attn = MultiHeadAttention(cfg, rng)
            self.norm_self = LayerNorm(d)
        if kind in ("cross_layer", "interleaved"):
            self.cross_attn = MultiHeadAttention(cfg, rng)
            self.norm_cross = LayerNorm(d)
        if kind != "cross_layer" or cross_ff:
            self.ff = FeedForward(cfg, rng)
            self.norm_ff = LayerNorm(d)

    def __call__(self, y: Tensor, h_enc: Tensor | None = None,
                 self_allowed: np.ndarray | None = None,
                 enc_allowed: np.ndarray | None = None) -> Tensor:
        """``self_allowed`` defaults to a causal mask; ``enc_allowed`` masks encoder padding."""
        if self.kind != "self_layer" and h_enc is None:
            raise ContractError(f"{self.kind} decoder layer needs the encoder output")
        if hasattr(self, "self_attn"):
            if self_allowed is None:
                self_allowed = CAUSAL.allowed(y.shape[1])[None, None]
            h = self.norm_self(y)
            y = ad.add(y, self.drop(self.self_attn(h, h, self_allowed)))
        if hasattr(self, "cross_attn"):
            h = self.norm_cross(y)
            y = ad.add(y, self.drop(self.cross_attn(h, h_enc, enc_allowed)))
        if hasattr(self, "ff"):
            y = ad.add(y, self.drop(self.ff(self.norm_ff(y))))
        return y


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    h_enc: Tensor          # (B, T, d_model)
    lengths: np.ndarray    # (B,)

    @property
    def T(self) -> int:
        return self.h_enc.shape[1]

    def key_valid(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.lengths[:, None]

    def cross_allowed(self) -> np.ndarray:
        """Padding mask for cross-attention, shaped (B, 1, 1, T)."""
        return self.key_valid()[:, None, None, :]


class Encoder(Module):
    """Input projection + sinusoidal positions + pre-LN self-attention stack."""

    def __init__(self, input_dim: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.input_dim = input_dim
        self.in_proj = Linear(input_dim, cfg.d_model, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)
        self._d_model = cfg.d_model

    def __call__(self, x: np.ndarray | Tensor, lengths=None, mask: Mask = NO_MASK) -> EncoderOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.in_proj.weight.dtype))
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        B, T, D = x.shape
        if D != self.input_dim:
            raise DimensionError(f"feature dim {D} != configured input dim {self.input_dim}")
        if T < 1:
            raise ContractError("encoder needs at least one frame")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        h = ad.add(self.in_proj(x), sinusoidal_positions(T, self._d_model, x.dtype))
        h = self.drop(h)
        key_valid = np.arange(T)[None, :] < lengths[:, None]
        pad = None if key_valid.all() else key_valid
        allowed = combine_masks(mask.allowed(T), pad)
        for layer in self.layers:
            h = layer(h, allowed)
        return EncoderOutput(self.final_norm(h), lengths)


def encoder_forward(encoder: Encoder, x, mask: Mask = NO_MASK) -> EncoderOutput:
    return encoder(x, None, mask)


def decoder_layer_forward(layer: DecoderLayer, y_repr: Tensor, h_enc: EncoderOutput | None = None,
                          mask: Mask = CAUSAL) -> Tensor:
    h = None if h_enc is None else h_enc.h_enc
    enc_allowed = None if h_enc is None else h_enc.cross_allowed()
    self_allowed = mask.allowed(y_repr.shape[1])
    self_allowed = None if self_allowed is None else self_allowed[None, None]
    if layer.kind != "self_layer" and h is None:
        raise ContractError(f"{layer.kind} decoder layer needs the encoder output")
    if hasattr(layer, "self_attn") and self_allowed is None:
        self_allowed = np.ones((1, 1, y_repr.shape[1], y_repr.shape[1]), dtype=bool)
    return layer(y_repr, h, self_allowed, enc_allowed)
