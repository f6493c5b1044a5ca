"""Decoding: joint CTC/attention beam search, transducer search, LM fusion and swap.

Scores are log-probabilities (higher is better).  Ties are broken by the
token sequence in lexicographic order so results are fully deterministic.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .aed import AedModel
from .ctc import CtcPrefixScorer
from .lm import LanguageModel, next_token_logprobs
from .transducer import TransducerModel
from .vocab import BLANK_ID, EOS_ID


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 10
    ctc_weight: float = 0.3          # mu
    sf_weight: float = 0.0
    sf_lm: LanguageModel | None = None
    max_len_ratio: float = 0.5
    beta: float | None = None        # None: the model's training value
    acoustic_only: bool = False
    max_symbols_per_frame: int = 10

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.sf_weight < 0:
            raise ValueError("shallow-fusion weight must be non-negative")

    @property
    def fusion(self) -> bool:
        return self.sf_lm is not None and self.sf_weight > 0


@dataclass
class Hypothesis:
    tokens: tuple = ()
    s_att: float = 0.0
    s_ctc: float = 0.0
    s_lm: float = 0.0
    s_total: float = 0.0
    finished: bool = False
    ctc_state: object = field(default=None, repr=False, compare=False)


def total_score(s_att: float, s_ctc: float, s_lm: float, mu: float, sf_weight: float) -> float:
    return mu * s_ctc + (1.0 - mu) * s_att + sf_weight * s_lm


def _rank_key(h: Hypothesis):
    return (-h.s_total, h.tokens)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


class _FusionLM:
    """Cached next-token log-probs of an external LM."""

    def __init__(self, lm: LanguageModel):
        self.lm = lm
        self.cache: dict = {}

    def logprobs(self, histories: Sequence[tuple]) -> np.ndarray:
        todo = [h for h in dict.fromkeys(histories) if h not in self.cache]
        if todo:
            out = next_token_logprobs(self.lm, todo)
            for h, row in zip(todo, out):
                self.cache[h] = row.astype(np.float64)
        return np.stack([self.cache[h] for h in histories])


def replace_internal_lm(model, lm: LanguageModel, swap_embedding: bool = False):
    """Model sharing every acoustic parameter with ``model`` but decoding with ``lm``.

    The original model is left untouched, so swapping back is exact.
    """
    return model.with_lm(lm, swap_embedding=swap_embedding)


def shallow_fusion_score(hyp: Hypothesis, increment: float, weight: float) -> Hypothesis:
    """Add one external-LM log-prob increment to a hypothesis."""
    if weight == 0:
        return hyp
    s_lm = hyp.s_lm + increment
    return replace(hyp, s_lm=s_lm, s_total=hyp.s_total + weight * increment)


# ---------------------------------------------------------------------------
# AED
# ---------------------------------------------------------------------------

def _output_ids(V: int, eos: bool) -> np.ndarray:
    ids = list(range(4, V))
    if eos:
        ids.append(EOS_ID)
    return np.array(ids)


def _decode_beta(model: AedModel, cfg: DecodeConfig) -> float | None:
    if model.variant != "decoupled":
        return None
    if cfg.acoustic_only:
        return 0.0
    return cfg.beta


def joint_beam_search(feats: np.ndarray, model: AedModel, cfg: DecodeConfig = DecodeConfig(),
                      max_len: int | None = None) -> tuple[Hypothesis, list[Hypothesis]]:
    """Length-synchronous joint CTC/attention beam search.

    Returns the best finished hypothesis and all finished ones, ranked.
    """
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("empty encoder input")
    enc, ctc_lp = model.prepare(feats)
    T = ctc_lp.shape[0]
    V = model.vocab.V
    mu = cfg.ctc_weight
    sfw = cfg.sf_weight if cfg.fusion else 0.0
    beta = _decode_beta(model, cfg)
    if max_len is None:
        max_len = max(1, math.ceil(cfg.max_len_ratio * T))
    scorer = CtcPrefixScorer(ctc_lp, EOS_ID) if mu > 0 else None
    fusion = _FusionLM(cfg.sf_lm) if sfw > 0 else None
    lm_cache: dict = {}
    allowed = _output_ids(V, eos=True)
    pre_beam = min(len(allowed), max(1, int(1.5 * cfg.beam)))

    running = [Hypothesis(ctc_state=scorer.initial_state() if scorer else None)]
    ended: list[Hypothesis] = []
    for step in range(max_len + 1):
        histories = [h.tokens for h in running]
        logp = _log_softmax(model.next_logits(enc, histories, lm_cache, beta))
        if step == max_len:
            cands = np.full((len(running), 1), EOS_ID)
        else:
            sub = logp[:, allowed]
            # stable order: best first, ties by token id
            order = np.lexsort((np.broadcast_to(allowed, sub.shape), -sub), axis=-1)[:, :pre_beam]
            cands = allowed[order]
        att = np.take_along_axis(logp, cands, axis=1)
        ctc_scores, ctc_r = (scorer.score([h.ctc_state for h in running], cands)
                             if scorer else (np.zeros(cands.shape), None))
        lm_inc = (np.take_along_axis(fusion.logprobs(histories), cands, axis=1)
                  if fusion else np.zeros(cands.shape))
        new = []
        for i, h in enumerate(running):
            for j, c in enumerate(cands[i]):
                c = int(c)
                s_att = h.s_att + float(att[i, j])
                s_ctc = float(ctc_scores[i, j]) if scorer else 0.0
                s_lm = h.s_lm + float(lm_inc[i, j]) if fusion else 0.0
                fin = c == EOS_ID
                state = None if (fin or scorer is None) else (ctc_r[i, j], c)
                new.append(Hypothesis(h.tokens if fin else h.tokens + (c,), s_att, s_ctc, s_lm,
                                      total_score(s_att, s_ctc, s_lm, mu, sfw), fin, state))
        new.sort(key=lambda h: (_rank_key(h), h.finished))
        kept = new[: cfg.beam]
        ended.extend(h for h in kept if h.finished)
        running = [h for h in kept if not h.finished]
        if not running:
            break
        if ended:
            best_end = max(h.s_total for h in ended)
            if best_end >= running[0].s_total:
                break
    ended.sort(key=_rank_key)
    for h in ended:
        h.ctc_state = None
    return ended[0], ended


def aed_greedy_decode(feats: np.ndarray, model: AedModel, cfg: DecodeConfig = DecodeConfig(),
                      max_len: int | None = None) -> list[int]:
    """Argmax rollout of the decoder distribution over output tokens."""
    enc, ctc_lp = model.prepare(np.asarray(feats))
    T = ctc_lp.shape[0]
    if max_len is None:
        max_len = max(1, math.ceil(cfg.max_len_ratio * T))
    allowed = _output_ids(model.vocab.V, eos=True)
    beta = _decode_beta(model, cfg)
    tokens: tuple = ()
    cache: dict = {}
    for _ in range(max_len):
        logp = _log_softmax(model.next_logits(enc, [tokens], cache, beta))[0]
        c = int(allowed[np.argmax(logp[allowed])])
        if c == EOS_ID:
            break
        tokens += (c,)
    return list(tokens)


# ---------------------------------------------------------------------------
# transducer
# ---------------------------------------------------------------------------

def _tmode(model, cfg: DecodeConfig) -> str:
    return "acoustic" if cfg.acoustic_only else "combined"


def transducer_search(feats: np.ndarray, model: TransducerModel, cfg: DecodeConfig = DecodeConfig(),
                      mode: str = "beam") -> Hypothesis:
    """Greedy or frame-synchronous beam search over transducer logits.

    Each frame, hypotheses are expanded repeatedly; candidates ending in
    blank leave the frame, the rest keep emitting (at most
    ``max_symbols_per_frame`` labels, then blank is forced).  With beam 1
    this reduces to greedy decoding.
    """
    if mode == "greedy":
        return _transducer_greedy(feats, model, cfg)
    if mode != "beam":
        raise ValueError(f"unknown search mode {mode!r}")
    enc = model.prepare(np.asarray(feats))
    T = enc.shape[0]
    words = _output_ids(model.vocab.V, eos=False)
    tmode = _tmode(model, cfg)
    sfw = cfg.sf_weight if cfg.fusion else 0.0
    fusion = _FusionLM(cfg.sf_lm) if sfw > 0 else None
    lm_cache: dict = {}
    beam = cfg.beam
    cap = cfg.max_symbols_per_frame
    k_emit = min(len(words), beam)

    # hypothesis: tokens -> (path log-prob, fusion LM log-prob)
    hyps = {(): (0.0, 0.0)}
    for t in range(T):
        A = sorted(hyps.items(), key=lambda kv: (-(kv[1][0] + sfw * kv[1][1]), kv[0]))[:beam]
        B: dict = {}
        for n_emit in range(cap + 1):
            if not A:
                break
            hist = [k for k, _ in A]
            logp = _log_softmax(model.step_logits(enc[t], hist, lm_cache, tmode))
            lm_lp = fusion.logprobs(hist) if fusion else None
            cands = []
            for i, (toks, (s, sl)) in enumerate(A):
                sb = s + float(logp[i, BLANK_ID])
                cands.append((sb + sfw * sl, toks, sb, sl, True))
                if n_emit < cap:
                    sub = logp[i, words]
                    order = np.lexsort((words, -sub))[:k_emit]
                    for j in order:
                        k = int(words[j])
                        se = s + float(sub[j])
                        sle = sl + float(lm_lp[i, k]) if fusion else 0.0
                        cands.append((se + sfw * sle, toks + (k,), se, sle, False))
            cands.sort(key=lambda c: (-c[0], c[1], not c[4]))
            A = []
            for _, toks, s, sl, is_blank in cands[:beam]:
                if is_blank:
                    if toks in B:
                        B[toks] = (float(np.logaddexp(B[toks][0], s)), sl)
                    else:
                        B[toks] = (s, sl)
                else:
                    A.append((toks, (s, sl)))
            if len(B) >= beam and A:
                worst_b = sorted(v[0] + sfw * v[1] for v in B.values())[-beam]
                if worst_b >= max(s + sfw * sl for _, (s, sl) in A):
                    break
        hyps = dict(sorted(B.items(), key=lambda kv: (-(kv[1][0] + sfw * kv[1][1]), kv[0]))[:beam])
    return _finish_transducer(hyps, fusion, sfw)


def _finish_transducer(hyps: dict, fusion, sfw: float) -> Hypothesis:
    out = []
    keys = list(hyps)
    eos_lp = fusion.logprobs(keys)[:, EOS_ID] if fusion else np.zeros(len(keys))
    for k, e in zip(keys, eos_lp):
        s, sl = hyps[k]
        sl = sl + float(e) if fusion else 0.0
        out.append(Hypothesis(k, s, 0.0, sl, s + sfw * sl, True))
    out.sort(key=_rank_key)
    return out[0]


def _transducer_greedy(feats: np.ndarray, model: TransducerModel, cfg: DecodeConfig) -> Hypothesis:
    enc = model.prepare(np.asarray(feats))
    words = _output_ids(model.vocab.V, eos=False)
    allowed = np.concatenate([[BLANK_ID], words])
    tmode = _tmode(model, cfg)
    cache: dict = {}
    tokens: tuple = ()
    score = 0.0
    for t in range(enc.shape[0]):
        for n_emit in range(cfg.max_symbols_per_frame + 1):
            logp = _log_softmax(model.step_logits(enc[t], [tokens], cache, tmode))[0]
            if n_emit == cfg.max_symbols_per_frame:
                k = BLANK_ID
            else:
                k = int(allowed[np.lexsort((allowed, -logp[allowed]))[0]])
            score += float(logp[k])
            if k == BLANK_ID:
                break
            tokens += (k,)
    return Hypothesis(tokens, score, 0.0, 0.0, score, True)


# ---------------------------------------------------------------------------
# corpus-level decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeRecord:
    id: str
    ref: list
    hyp: list
    s_att: float
    s_ctc: float
    s_lm: float
    s_total: float


def decode_utterance(model, feats: np.ndarray, cfg: DecodeConfig) -> Hypothesis:
    if isinstance(model, AedModel):
        best, _ = joint_beam_search(feats, model, cfg)
        return best
    return transducer_search(feats, model, cfg, mode="beam")


def _decode_one(args) -> DecodeRecord:
    model, u, cfg = args
    h = decode_utterance(model, u.frames, cfg)
    return DecodeRecord(u.id, list(u.tokens), list(h.tokens), h.s_att, h.s_ctc, h.s_lm, h.s_total)


def decode_corpus(model, utts, cfg: DecodeConfig, workers: int = 1) -> list[DecodeRecord]:
    """Decode every utterance; results are sorted by id whatever ``workers`` is."""
    jobs = [(model, u, cfg) for u in sorted(utts, key=lambda u: u.id)]
    if workers <= 1 or len(jobs) < 2:
        return [_decode_one(j) for j in jobs]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(workers) as pool:
        return pool.map(_decode_one, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
