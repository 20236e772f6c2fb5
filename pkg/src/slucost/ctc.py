"""Connectionist Temporal Classification: loss, gradient, greedy decoding.

The blank symbol is index 0. ``logprobs`` are T x V matrices of per-frame
log-probabilities (rows log-sum-exp to 0). Gradients are returned with
respect to the pre-softmax logits ``z`` where ``logprobs = log_softmax(z)``,
so each gradient row sums to zero.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

BLANK = 0

_NEG_INF = -np.inf


class CTCError(ValueError):
    pass


def extend_with_blanks(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check(logprobs: np.ndarray, target: Sequence[int]) -> None:
    if logprobs.ndim != 2:
        raise CTCError(f"expected a T x V matrix, got shape {logprobs.shape}")
    T, V = logprobs.shape
    for label in target:
        if not 1 <= label < V:
            raise CTCError(f"label {label} outside [1, {V - 1}]")
    if min_frames(target) > T:
        raise CTCError(
            f"target longer than input allows: {len(target)} labels need "
            f"{min_frames(target)} frames, got {T}"
        )


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(invalid="ignore"):
        s = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
    with np.errstate(divide="ignore"):
        return np.where(np.isneginf(m), _NEG_INF, safe + np.log(s))


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """s may be entered from s-2 when both are distinct non-blank labels."""
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allowed


def _forward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T = lp.shape[0]
    S = len(ext)
    alpha = np.full((T, S), _NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    emit = lp[:, ext]
    shifted1 = np.full(S, _NEG_INF)
    shifted2 = np.full(S, _NEG_INF)
    for t in range(1, T):
        prev = alpha[t - 1]
        shifted1[1:] = prev[:-1]
        shifted2[2:] = np.where(skip[2:], prev[:-2], _NEG_INF)
        alpha[t] = _logsumexp3(prev, shifted1, shifted2) + emit[t]
    return alpha


def _backward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """beta[t, s]: log prob of emitting the rest of the labelling after frame t, given state s at t."""
    T = lp.shape[0]
    S = len(ext)
    beta = np.full((T, S), _NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    emit = lp[:, ext]
    nxt1 = np.full(S, _NEG_INF)
    nxt2 = np.full(S, _NEG_INF)
    for t in range(T - 2, -1, -1):
        cur = beta[t + 1] + emit[t + 1]
        nxt1[:-1] = cur[1:]
        nxt2[:-2] = np.where(skip[2:], cur[2:], _NEG_INF)
        beta[t] = _logsumexp3(cur, nxt1, nxt2)
    return beta


def _total_logprob(alpha: np.ndarray) -> float:
    last = alpha[-1]
    with np.errstate(invalid="ignore"):
        return float(np.logaddexp(last[-1], last[-2]) if len(last) > 1 else last[-1])


def _clamp(loss: float) -> float:
    # rounding can leave -1e-16 for a certain path; NaN must pass through
    return 0.0 if loss < 0.0 else loss


def ctc_loss(logprobs: np.ndarray, target: Sequence[int]) -> float:
    """Negative log-probability of all frame paths collapsing to ``target``."""
    lp = np.asarray(logprobs, dtype=np.float64)
    target = list(target)
    _check(lp, target)
    ext = extend_with_blanks(target)
    alpha = _forward(lp, ext, _skip_allowed(ext))
    return _clamp(-_total_logprob(alpha))


def ctc_loss_and_grad(logprobs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the pre-softmax logits, via alpha/beta recursions.

    d loss / d z[t, k] = softmax(z)[t, k] - occupancy[t, k], where occupancy is
    the posterior mass of the extended-label states carrying label k at t.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    target = list(target)
    _check(lp, target)
    ext = extend_with_blanks(target)
    skip = _skip_allowed(ext)
    alpha = _forward(lp, ext, skip)
    beta = _backward(lp, ext, skip)
    log_p = _total_logprob(alpha)
    post = np.exp(alpha + beta - log_p)
    occupancy = np.zeros_like(lp)
    np.add.at(occupancy.T, ext, post.T)
    grad = np.exp(lp) - occupancy
    return _clamp(-log_p), grad


def ctc_grad(logprobs: np.ndarray, target: Sequence[int]) -> np.ndarray:
    return ctc_loss_and_grad(logprobs, target)[1]


def best_path_decode(logprobs: np.ndarray) -> list[int]:
    """Greedy decoding: per-frame argmax (lowest index on ties), merge repeats, drop blanks."""
    best = np.argmax(np.asarray(logprobs), axis=1)
    out = []
    prev = -1
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out
