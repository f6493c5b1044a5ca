"""Synthetic domain-shift corpora, WER scoring and matched-pairs significance.

Two domains share one acoustic inventory (per-token anchor vectors) but
differ in their token Markov chains.  Confusable pairs have nearly equal
anchors, so only linguistic context tells them apart; the domains prefer
opposite members of some pairs in some contexts.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import Vocabulary


class SpecError(ValueError):
    """Malformed domain specification."""


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

@dataclass
class DomainSpec:
    """Token Markov chain plus the shared acoustic rendering settings.

    ``markov``, ``initial`` and the pair members index the non-reserved words
    (0-based; word i is vocabulary id i + 4).
    """

    name: str
    markov: np.ndarray
    initial: np.ndarray
    stop_prob: float
    confusable_pairs: list
    sigma: float = 0.3
    dim: int = 16
    anchor_seed: int = 1234
    durations: tuple = (2, 5)
    length_range: tuple = (3, 15)

    def __post_init__(self):
        self.markov = np.asarray(self.markov, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        K = self.markov.shape[0]
        if self.markov.shape != (K, K) or self.initial.shape != (K,):
            raise SpecError("transition matrix must be square and match the initial distribution")
        if (self.markov < 0).any() or (self.initial < 0).any():
            raise SpecError("negative probabilities")
        rows = self.markov.sum(axis=1)
        if np.any(rows == 0):
            raise SpecError("absorbing zero row in transition matrix")
        if np.abs(rows - 1).max() > 1e-9 or abs(self.initial.sum() - 1) > 1e-9:
            raise SpecError("rows must sum to 1")
        if not 0 < self.stop_prob < 1:
            raise SpecError("stop probability must lie in (0, 1)")
        for a, b, ov in self.confusable_pairs:
            if not (0 <= a < K and 0 <= b < K and a != b) or not 0 <= ov <= 1:
                raise SpecError(f"bad confusable pair {(a, b, ov)}")
        lo, hi = self.length_range
        if not 1 <= lo <= hi or self.durations[0] < 2:
            raise SpecError("lengths must be positive and durations at least 2 frames")

    @property
    def n_words(self) -> int:
        return self.markov.shape[0]

    def anchors(self) -> np.ndarray:
        """Per-word anchor vectors (K, dim); confusable members are pulled together."""
        rng = np.random.default_rng(self.anchor_seed)
        base = rng.normal(0.0, 1.0, size=(self.n_words, self.dim))
        out = base.copy()
        for a, b, ov in self.confusable_pairs:
            mid = 0.5 * (base[a] + base[b])
            out[a] = mid + (1 - ov) * (base[a] - mid)
            out[b] = mid + (1 - ov) * (base[b] - mid)
        return out


def total_variation(p: DomainSpec, q: DomainSpec) -> float:
    """Mean over rows of the total-variation distance between two chains."""
    return float(0.5 * np.abs(p.markov - q.markov).sum(axis=1).mean())


@dataclass(frozen=True)
class BenchmarkConfig:
    n_pairs: int = 6
    n_contexts: int = 8
    overlap: float = 0.85
    sigma: float = 0.3
    dim: int = 16
    anchor_seed: int = 1234
    context_peak: float = 0.8
    source_focus: float = 0.97
    target_focus: float = 0.75
    stop_prob: float = 0.12


def word_names(cfg: BenchmarkConfig = BenchmarkConfig()) -> list[str]:
    names = []
    for k in range(cfg.n_pairs):
        names += [f"p{k}a", f"p{k}b"]
    names += [f"s{j}" for j in range(cfg.n_contexts)]
    return names


def benchmark_vocab(cfg: BenchmarkConfig = BenchmarkConfig()) -> Vocabulary:
    return Vocabulary.from_words(word_names(cfg))


def benchmark_domains(cfg: BenchmarkConfig = BenchmarkConfig()) -> tuple[DomainSpec, DomainSpec]:
    """Source and target domains of the default benchmark.

    Words: pairs (p_k a, p_k b) then context words s_j.  Sentences alternate
    context word -> pair member -> context word ...  Context s_j points at
    pair j mod n_pairs.  The first half of the contexts behaves identically
    in both domains (prefers member a); in the second half the source
    prefers a and the target prefers b.  The source visits its own half of
    the contexts with probability ``source_focus``, the target its half with
    ``target_focus``.
    """
    P, C = cfg.n_pairs, cfg.n_contexts
    if C % 2 or P < 1:
        raise SpecError("need an even number of context words and at least one pair")
    K = 2 * P + C
    ctx = [2 * P + j for j in range(C)]
    half = C // 2
    pairs = [(2 * k, 2 * k + 1, cfg.overlap) for k in range(P)]

    def chain(prefer_b_in_second_half: bool, frequent: list[int], focus: float):
        M = np.zeros((K, K))
        rare = [c for c in ctx if c not in frequent]
        for w in range(2 * P):
            M[w, frequent] = focus / len(frequent)
            M[w, rare] = (1 - focus) / len(rare)
        for j, c in enumerate(ctx):
            k = j % P
            member = 2 * k + (1 if (j >= half and prefer_b_in_second_half) else 0)
            others = [w for w in range(2 * P) if w != member]
            M[c, others] = (1 - cfg.context_peak) / len(others)
            M[c, member] = cfg.context_peak
        init = np.zeros(K)
        init[frequent] = focus / len(frequent)
        init[rare] = (1 - focus) / len(rare)
        return M, init

    common = dict(confusable_pairs=pairs, sigma=cfg.sigma, dim=cfg.dim, anchor_seed=cfg.anchor_seed,
                  stop_prob=cfg.stop_prob)
    Ms, init_s = chain(False, ctx[:half], cfg.source_focus)
    Mt, init_t = chain(True, ctx[half:], cfg.target_focus)
    src = DomainSpec("source", Ms, init_s, **common)
    tgt = DomainSpec("target", Mt, init_t, **common)
    tv = total_variation(src, tgt)
    if tv < 0.3:
        raise SpecError(f"domains too similar: mean row total variation {tv:.3f} < 0.3")
    return src, tgt


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    tokens: list
    frames: np.ndarray
    domain: str = ""


def sample_sentences(spec: DomainSpec, n: int, rng: np.random.Generator) -> list[list[int]]:
    """Word-index sentences (0-based) with lengths inside ``spec.length_range``."""
    lo, hi = spec.length_range
    cum = np.cumsum(spec.markov, axis=1)
    cum_init = np.cumsum(spec.initial)
    out = []
    for _ in range(n):
        w = int(np.searchsorted(cum_init, rng.random() * cum_init[-1], side="right"))
        sent = [w]
        while len(sent) < hi:
            if len(sent) >= lo and rng.random() < spec.stop_prob:
                break
            w = int(np.searchsorted(cum[w], rng.random() * cum[w, -1], side="right"))
            sent.append(w)
        out.append(sent)
    return out


def render_frames(words: Sequence[int], anchors: np.ndarray, sigma: float, durations: tuple,
                  rng: np.random.Generator) -> np.ndarray:
    lo, hi = durations
    reps = rng.integers(lo, hi + 1, size=len(words))
    means = np.repeat(anchors[np.asarray(words)], reps, axis=0)
    return means + sigma * rng.normal(size=means.shape)


def gen_corpus(spec: DomainSpec, n_utts: int, seed: int, prefix: str | None = None) -> list[Utterance]:
    """``n_utts`` utterances with vocabulary-id tokens and rendered frames."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng(seed)
    anchors = spec.anchors()
    prefix = spec.name if prefix is None else prefix
    sents = sample_sentences(spec, n_utts, rng)
    utts = []
    width = len(str(n_utts - 1))
    for i, s in enumerate(sents):
        frames = render_frames(s, anchors, spec.sigma, spec.durations, rng)
        utts.append(Utterance(f"{prefix}-{i:0{width}d}", [w + 4 for w in s], frames, spec.name))
    return utts


def gen_text(spec: DomainSpec, n: int, seed: int) -> list[list[int]]:
    """Text-only corpus (vocabulary ids), independent of the audio corpora."""
    rng = np.random.default_rng(seed)
    return [[w + 4 for w in s] for s in sample_sentences(spec, n, rng)]


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"DCE1"
DATASET_VERSION = 1


def save_dataset(path, utts: Sequence[Utterance]) -> None:
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(utts))]
    for u in utts:
        uid = u.id.encode("utf-8")
        parts.append(struct.pack("<I", len(uid)) + uid)
        parts.append(struct.pack("<I", len(u.tokens)) + np.asarray(u.tokens, dtype="<u4").tobytes())
        fr = np.asarray(u.frames, dtype="<f4")
        parts.append(struct.pack("<II", *fr.shape) + fr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path, domain: str = "") -> list[Utterance]:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    off = 12
    utts = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            uid = data[off + 4: off + 4 + n].decode("utf-8")
            off += 4 + n
            (N,) = struct.unpack_from("<I", data, off)
            toks = np.frombuffer(data, dtype="<u4", count=N, offset=off + 4).astype(int).tolist()
            off += 4 + 4 * N
            T, D = struct.unpack_from("<II", data, off)
            fr = np.frombuffer(data, dtype="<f4", count=T * D, offset=off + 8).reshape(T, D).astype(np.float32)
            off += 8 + 4 * T * D
            utts.append(Utterance(uid, toks, fr, domain))
    except (struct.error, ValueError) as e:
        raise DatasetFormatError(f"{path}: truncated dataset") from e
    if off != len(data):
        raise DatasetFormatError(f"{path}: trailing bytes")
    return utts


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def wer(ref: Sequence, hyp: Sequence) -> tuple[int, int, int, int]:
    """(substitutions, deletions, insertions, ref length) of a minimum-edit alignment.

    Among optimal alignments, substitution is preferred over an
    insertion/deletion pair; then deletion over insertion.
    """
    n, m = len(ref), len(hyp)
    # cost, then number of edit operations (fewer ops = more substitutions)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(S), D, I, n


@dataclass
class ScoreReport:
    ids: list
    counts: list                  # (S, D, I, ref_len) per utterance
    significance: tuple | None = None

    @property
    def errors(self) -> np.ndarray:
        return np.array([s + d + i for s, d, i, _ in self.counts], dtype=np.int64)

    @property
    def ref_len(self) -> int:
        return int(sum(c[3] for c in self.counts))

    @property
    def corpus_wer(self) -> float:
        """Percent; total errors over total reference words."""
        return 100.0 * float(self.errors.sum()) / max(1, self.ref_len)

    def totals(self) -> tuple[int, int, int, int]:
        arr = np.array(self.counts, dtype=np.int64).reshape(-1, 4)
        return tuple(int(x) for x in arr.sum(axis=0))


def score_corpus(pairs: Sequence[tuple]) -> ScoreReport:
    """``pairs`` of (id, ref, hyp); output ordered by id."""
    pairs = sorted(pairs, key=lambda p: p[0])
    return ScoreReport([p[0] for p in pairs], [wer(p[1], p[2]) for p in pairs])


@dataclass(frozen=True)
class PairedTest:
    z: float
    p: float
    degenerate: bool = False


def matched_pairs_test(errs_a: Sequence[float], errs_b: Sequence[float]) -> PairedTest:
    """Two-sided matched-pairs test on per-segment error differences (normal approximation)."""
    a = np.asarray(errs_a, dtype=np.float64)
    b = np.asarray(errs_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("error lists differ in length")
    if a.ndim != 1 or a.size < 2:
        raise ValueError("need at least two segments")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return PairedTest(0.0, 1.0)
        return PairedTest(math.copysign(math.inf, mean), 0.0, degenerate=True)
    z = float(mean / (sd / math.sqrt(d.size)))
    return PairedTest(z, math.erfc(abs(z) / math.sqrt(2.0)))


def permutation_pvalue(d: Sequence[float], n_resamples: int = 100_000, seed: int = 0) -> float:
    """Two-sided sign-flip permutation p-value for mean(d) = 0."""
    d = np.asarray(d, dtype=np.float64)
    rng = np.random.default_rng(seed)
    obs = abs(d.mean())
    hits = 0
    chunk = 10_000
    for start in range(0, n_resamples, chunk):
        k = min(chunk, n_resamples - start)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(k, d.size))
        hits += int((np.abs((signs * d).mean(axis=1)) >= obs - 1e-12).sum())
    return hits / n_resamples
