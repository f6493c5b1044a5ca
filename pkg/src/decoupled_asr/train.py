"""Mini-batch training of ASR models (AED and transducer families)."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from .batch import Batch
from .optim import Adam

logger = logging.getLogger(__name__)


def length_batches(utts: Sequence, batch_size: int) -> list[list[int]]:
    """Index batches of similar frame counts (sorted by length, then id)."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].frames.shape[0], utts[i].id))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_asr(model, utts: Sequence, epochs: int = 10, lr: float = 2e-3, batch_size: int = 32,
              seed: int = 0, warmup: int = 100, history: list | None = None, dtype=np.float32) -> list[float]:
    """Train ``model`` in place with Adam; returns the per-epoch mean loss.

    Batches group utterances of similar length; batch order is shuffled
    each epoch from ``seed``, as are dropout masks.
    """
    if not utts:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    for m in model._modules():
        if hasattr(m, "_rng"):
            m._rng = rng
    batches = [Batch.from_utterances([utts[i] for i in b], dtype) for b in length_batches(utts, batch_size)]
    opt = Adam(model.trainable(), lr=lr, warmup=min(warmup, epochs * len(batches) // 4 + 1),
               total_steps=epochs * len(batches))
    losses = [] if history is None else history
    model.train()
    for epoch in range(epochs):
        total = 0.0
        for bi in rng.permutation(len(batches)):
            opt.zero_grad()
            loss = model.loss(batches[bi])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss in epoch {epoch + 1}")
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / len(batches))
        logger.info("asr epoch %d loss %.4f", epoch + 1, losses[-1])
    model.eval()
    return losses
