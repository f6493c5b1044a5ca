"""Connectionist temporal classification.

The loss runs the forward-backward recursion over the blank-extended label
sequence entirely in log space and registers the resulting occupancy
gradient on the tape.  Prefix scoring follows the two-state (blank-ending /
label-ending) recursion used in joint CTC/attention decoding.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import BLANK_ID

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned to the available frames."""


def collapse(path: Sequence[int], blank_id: int = BLANK_ID) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out, prev = [], None
    for q in path:
        q = int(q)
        if q != prev and q != blank_id:
            out.append(q)
        prev = q
    return out


def min_frames(y: Sequence[int]) -> int:
    """Frames needed to emit ``y``: one per label plus one blank per adjacent repeat."""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def _lse(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def _ctc_alpha_beta(lp: np.ndarray, targets: list, in_lens: np.ndarray, blank: int):
    """Batched forward/backward log-lattices.

    lp: (B, T, V) float64 log-probs.  Returns alpha, beta (B, T, S), the
    extended label matrix (B, S), S lengths and per-utterance log-likelihood.
    """
    B, T, _ = lp.shape
    S = 2 * max((len(y) for y in targets), default=0) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    s_len = np.empty(B, dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1:2 * len(y):2] = y
        s_len[b] = 2 * len(y) + 1
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    s_idx = np.arange(S)[None, :]
    s_valid = s_idx < s_len[:, None]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(s_valid[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a1 = np.concatenate([np.full((B, 1), NEG_INF), prev[:, :-1]], axis=1)
        a2 = np.concatenate([np.full((B, 2), NEG_INF), prev[:, :-2]], axis=1)[:, :S]
        a2 = np.where(skip, a2, NEG_INF)
        alpha[:, t] = _lse(prev, a1, a2) + emit[:, t]

    beta = np.full((B, T, S), NEG_INF)
    last = in_lens - 1
    bidx = np.arange(B)
    beta[bidx, last, s_len - 1] = emit[bidx, last, s_len - 1]
    has2 = s_len > 1
    beta[bidx[has2], last[has2], s_len[has2] - 2] = emit[bidx[has2], last[has2], s_len[has2] - 2]
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        b1 = np.concatenate([nxt[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
        b2 = np.concatenate([nxt[:, 2:], np.full((B, 2), NEG_INF)], axis=1)[:, :S]
        b2 = np.where(skip_next, b2, NEG_INF)
        val = _lse(nxt, b1, b2) + emit[:, t]
        active = (t < last)[:, None]
        beta[:, t] = np.where(active, val, beta[:, t])

    end = alpha[bidx, last, s_len - 1]
    end2 = np.where(has2, alpha[bidx, last, np.maximum(s_len - 2, 0)], NEG_INF)
    loglik = np.logaddexp(end, end2)
    return alpha, beta, ext, emit, loglik


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], input_lengths=None,
                   blank_id: int = BLANK_ID) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, V) and already log-softmaxed.
    """
    lp_t = log_probs
    B, T, V = lp_t.shape
    targets = [list(map(int, y)) for y in targets]
    in_lens = np.full(B, T, dtype=np.int64) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if len(targets) != B:
        raise ValueError("one target sequence per utterance required")
    for b, y in enumerate(targets):
        if min_frames(y) > in_lens[b]:
            raise InfeasibleAlignmentError(
                f"utterance {b}: {len(y)} labels need {min_frames(y)} frames, have {in_lens[b]}")
    lp = lp_t.data.astype(np.float64)
    with np.errstate(invalid="ignore"):
        alpha, beta, ext, emit, loglik = _ctc_alpha_beta(lp, targets, in_lens, blank_id)
    nll = (-loglik).astype(lp_t.dtype)

    def backward(g):
        with np.errstate(invalid="ignore", over="ignore"):
            occ = alpha + beta - emit - loglik[:, None, None]
            occ = np.where(np.isfinite(occ), np.exp(occ), 0.0)
        grad = np.zeros((B, T, V))
        bi = np.broadcast_to(np.arange(B)[:, None, None], occ.shape)
        ti = np.broadcast_to(np.arange(T)[None, :, None], occ.shape)
        ki = np.broadcast_to(ext[:, None, :], occ.shape)
        np.add.at(grad, (bi, ti, ki), occ)
        grad *= -np.asarray(g, dtype=np.float64)[:, None, None]
        return (grad.astype(lp_t.dtype),)

    return ad._make(nll, (lp_t,), backward)


def ctc_loss(log_probs: Tensor, y: Sequence[int], blank_id: int = BLANK_ID) -> Tensor:
    """Scalar CTC loss for one utterance; ``log_probs`` is (T, V)."""
    lp = log_probs if isinstance(log_probs, Tensor) else ad.tensor(log_probs)
    return ad.reshape(ctc_loss_batch(ad.reshape(lp, (1,) + lp.shape), [y], blank_id=blank_id), ())


# ---------------------------------------------------------------------------
# prefix scoring
# ---------------------------------------------------------------------------

def ctc_prefix_score(log_probs: np.ndarray, g: Sequence[int], up_to_frame: int | None = None,
                     blank_id: int = BLANK_ID) -> float:
    """log P(collapsed output of the first ``up_to_frame`` frames starts with ``g``).

    Returns -inf when ``g`` cannot fit.
    """
    x = np.asarray(log_probs, dtype=np.float64)
    T = x.shape[0] if up_to_frame is None else up_to_frame
    x = x[:T]
    g = list(g)
    if not g:
        return 0.0
    if min_frames(g) > T:
        return -math.inf
    r = _initial_r(x, blank_id)
    last = None
    psi = 0.0
    for c in g:
        r, psi = _extend_one(x, r, last, c, blank_id)
        last = c
    return float(psi)


def ctc_full_score(log_probs: np.ndarray, g: Sequence[int], blank_id: int = BLANK_ID) -> float:
    """log P(collapsed output equals ``g`` exactly)."""
    x = np.asarray(log_probs, dtype=np.float64)
    r = _initial_r(x, blank_id)
    last = None
    for c in g:
        r, _ = _extend_one(x, r, last, c, blank_id)
        last = c
    return float(np.logaddexp(r[-1, 0], r[-1, 1]))


def _initial_r(x: np.ndarray, blank: int) -> np.ndarray:
    """r[t] = (label-ending, blank-ending) log-probs for the empty prefix."""
    T = x.shape[0]
    r = np.full((T, 2), NEG_INF)
    r[:, 1] = np.cumsum(x[:, blank])
    return r


def _extend_one(x, r_prev, last, c, blank):
    T = x.shape[0]
    r = np.full((T, 2), NEG_INF)
    empty_prefix = last is None
    r[0, 0] = x[0, c] if empty_prefix else NEG_INF
    psi = r[0, 0]
    for t in range(1, T):
        phi = r_prev[t - 1, 1] if c == last else np.logaddexp(r_prev[t - 1, 0], r_prev[t - 1, 1])
        r[t, 0] = np.logaddexp(r[t - 1, 0], phi) + x[t, c]
        r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + x[t, blank]
        psi = np.logaddexp(psi, phi + x[t, c])
    return r, psi


class CtcPrefixScorer:
    """Vectorised prefix scoring for beam search over one utterance.

    State per hypothesis is the (T, 2) array of label-/blank-ending
    log-probabilities plus its last token.
    """

    def __init__(self, log_probs: np.ndarray, eos_id: int, blank_id: int = BLANK_ID):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.T = self.x.shape[0]
        self.eos_id = eos_id
        self.blank = blank_id

    def initial_state(self) -> tuple[np.ndarray, int | None]:
        return _initial_r(self.x, self.blank), None

    def score(self, states: Sequence[tuple], cands: np.ndarray):
        """Prefix scores for every (hypothesis, candidate) pair.

        ``cands`` is (H, C) token ids.  Returns scores (H, C) and the new r
        arrays (H, C, T, 2).  ``eos`` candidates get the full-sequence score.
        """
        x, T, blank = self.x, self.T, self.blank
        H, C = cands.shape
        r_prev = np.stack([s[0] for s in states])                        # (H, T, 2)
        last = np.array([-1 if s[1] is None else s[1] for s in states])  # (H,)
        empty = (last == -1)[:, None]
        xc = x[:, cands.reshape(-1)].T.reshape(H, C, T)                  # (H, C, T)
        xb = x[:, blank]
        same = cands == last[:, None]
        prev_sum = np.logaddexp(r_prev[:, :, 0], r_prev[:, :, 1])       # (H, T)
        r = np.full((H, C, T, 2), NEG_INF)
        r[:, :, 0, 0] = np.where(empty, xc[:, :, 0], NEG_INF)
        psi = r[:, :, 0, 0].copy()
        with np.errstate(invalid="ignore"):
            for t in range(1, T):
                phi = np.where(same, r_prev[:, None, t - 1, 1], prev_sum[:, None, t - 1])
                r[:, :, t, 0] = np.logaddexp(r[:, :, t - 1, 0], phi) + xc[:, :, t]
                r[:, :, t, 1] = np.logaddexp(r[:, :, t - 1, 0], r[:, :, t - 1, 1]) + xb[t]
                psi = np.logaddexp(psi, phi + xc[:, :, t])
        is_eos = cands == self.eos_id
        psi = np.where(is_eos, prev_sum[:, None, T - 1], psi)
        return psi, r


def ctc_greedy_decode(log_probs: np.ndarray, blank_id: int = BLANK_ID) -> list[int]:
    return collapse(np.asarray(log_probs).argmax(axis=-1).tolist(), blank_id)
