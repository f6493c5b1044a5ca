"""Token inventory with fixed reserved ids."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

BLANK_ID = 0
UNK_ID = 1
SOS_ID = 2
EOS_ID = 3
RESERVED = ("<blank>", "<unk>", "<sos>", "<eos>")


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple

    def __post_init__(self):
        if tuple(self.symbols[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    blank_id = BLANK_ID
    unk_id = UNK_ID
    sos_id = SOS_ID
    eos_id = EOS_ID

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        return cls(RESERVED + tuple(words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @property
    def V(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def word_ids(self) -> range:
        """Ids of the non-reserved tokens."""
        return range(len(RESERVED), len(self.symbols))

    def id(self, sym: str) -> int:
        try:
            return self._index[sym]
        except KeyError:
            return UNK_ID

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.symbols[i] for i in ids)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()


def read_text_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    """One utterance per line, whitespace-separated symbols."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [vocab.encode(line) for line in lines if line.strip()]


def write_text_corpus(path, corpus: Iterable[Sequence[int]], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in corpus:
            f.write(vocab.decode(seq) + "\n")
