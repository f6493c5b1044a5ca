"""Padded mini-batches of (features, tokens) pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Batch:
    feats: np.ndarray          # (B, T, D)
    feat_lens: np.ndarray      # (B,)
    targets: list              # B lists of token ids (no sos/eos)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def n_tokens(self) -> int:
        return sum(len(y) for y in self.targets)

    @classmethod
    def from_pairs(cls, frames: Sequence[np.ndarray], targets: Sequence[Sequence[int]], dtype=np.float32):
        lens = np.array([f.shape[0] for f in frames], dtype=np.int64)
        D = frames[0].shape[1]
        feats = np.zeros((len(frames), lens.max(), D), dtype=dtype)
        for i, f in enumerate(frames):
            feats[i, : f.shape[0]] = f
        return cls(feats, lens, [list(map(int, y)) for y in targets])

    @classmethod
    def from_utterances(cls, utts, dtype=np.float32) -> "Batch":
        return cls.from_pairs([u.frames for u in utts], [u.tokens for u in utts], dtype)

    def astype(self, dtype) -> "Batch":
        return Batch(self.feats.astype(dtype), self.feat_lens, self.targets)
