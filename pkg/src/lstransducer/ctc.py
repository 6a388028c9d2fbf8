"""Target-side CTC: forward-backward loss and a streaming prefix score.

Column 0 of the posterior is the blank. Labels passed to this module are
posterior columns (``>= 1``); :func:`to_ctc_labels` shifts main-vocabulary ids
by one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

BLANK = 0
NEG = -1e30


def to_ctc_labels(tokens) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64) + 1


@dataclass
class CtcPosterior:
    log_probs: np.ndarray

    def __post_init__(self):
        lp = self.log_probs.data if isinstance(self.log_probs, Tensor) else self.log_probs
        self.log_probs = np.asarray(lp, dtype=np.float64)


def _lp(post) -> np.ndarray:
    if isinstance(post, CtcPosterior):
        return post.log_probs
    if isinstance(post, Tensor):
        return post.data
    return np.asarray(post, dtype=np.float64)


def min_frames(labels) -> int:
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def forward_backward(logp: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. ``logp`` ([T, K])."""
    labels = np.asarray(labels, dtype=np.int64)
    T, K = logp.shape
    L = len(labels)
    if L < 1:
        raise ValueError("CTC needs at least one label")
    if np.any(labels <= BLANK) or np.any(labels >= K):
        raise ValueError("CTC labels must be non-blank posterior columns")
    if T < min_frames(labels):
        warnings.warn(f"CTC label sequence of length {L} cannot fit {T} frames", RuntimeWarning)
        return float("inf"), np.zeros_like(logp)

    S = 2 * L + 1
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = labels[1:] != labels[:-1]
    emit = logp[:, ext]                                  # [T, S]

    alpha = np.full((T, S), NEG)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        a = alpha[t - 1]
        s1 = np.concatenate(([NEG], a[:-1]))
        s2 = np.where(skip, np.concatenate(([NEG, NEG], a[:-2])), NEG)
        alpha[t] = np.logaddexp(np.logaddexp(a, s1), s2) + emit[t]

    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = 0.0
    beta[T - 1, S - 2] = 0.0
    skip_from = np.concatenate((skip[2:], [False, False]))  # s -> s+2 allowed
    for t in range(T - 2, -1, -1):
        nb = beta[t + 1] + emit[t + 1]
        n1 = np.concatenate((nb[1:], [NEG]))
        n2 = np.where(skip_from, np.concatenate((nb[2:], [NEG, NEG])), NEG)
        beta[t] = np.logaddexp(np.logaddexp(nb, n1), n2)

    log_z = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    occ = np.exp(alpha + beta - log_z)                   # [T, S]
    grad = np.zeros_like(logp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_z), grad


def ctc_loss(post, labels) -> Tensor:
    """Scalar loss; differentiable when ``post`` is a taped Tensor of log-probs [T, K]."""
    x = post if isinstance(post, Tensor) else Tensor(_lp(post))
    loss, grad = forward_backward(x.data, labels)
    return tn.custom_op(np.array(loss), (x,), lambda g: (g * grad,))


def ctc_loss_batch(log_probs: Tensor, lengths, labels_list) -> Tensor:
    """Per-utterance losses [B] for padded log-probs [B, T, K]."""
    B = log_probs.shape[0]
    losses = np.zeros(B)
    grads = np.zeros_like(log_probs.data)
    for b in range(B):
        n = int(lengths[b])
        losses[b], grads[b, :n] = forward_backward(log_probs.data[b, :n], labels_list[b])
    return tn.custom_op(losses, (log_probs,), lambda g: (g[:, None, None] * grads,))


class CtcPrefixScorer:
    """Log-probability that the first ``horizon`` frames collapse to a string starting
    with ``prefix``. Each :meth:`extend` adds frames without touching earlier columns."""

    def __init__(self, post, prefix):
        self.logp = _lp(post)
        self.prefix = np.asarray(prefix, dtype=np.int64)
        m = len(self.prefix)
        self.horizon = 0
        self.r_blank = np.full(m + 1, NEG)
        self.r_blank[0] = 0.0
        self.r_label = np.full(m + 1, NEG)
        self._psi = NEG
        # continuing from k-1 labels into label k without a blank needs a different label
        prev = np.concatenate(([-1], self.prefix[:-1])) if m else np.zeros(0, dtype=np.int64)
        self._can_follow_label = prev != self.prefix

    @property
    def score(self) -> float:
        return 0.0 if len(self.prefix) == 0 else float(self._psi)

    def full_score(self) -> float:
        """Log-probability that the frames so far collapse to exactly ``prefix``."""
        return float(np.logaddexp(self.r_blank[-1], self.r_label[-1]))

    def extend(self, horizon: int) -> float:
        T = self.logp.shape[0]
        if horizon > T or horizon < 0:
            raise ValueError(f"horizon {horizon} outside 0..{T}")
        m = len(self.prefix)
        for t in range(self.horizon, horizon):
            lp = self.logp[t]
            rb, rl = self.r_blank, self.r_label
            if m:
                phi = np.logaddexp(rb[:-1], np.where(self._can_follow_label, rl[:-1], NEG))
                new_rl = np.concatenate(([NEG], np.logaddexp(rl[1:], phi) + lp[self.prefix]))
                self._psi = np.logaddexp(self._psi, phi[-1] + lp[self.prefix[-1]])
            else:
                new_rl = rl
            self.r_blank = np.logaddexp(rl, rb) + lp[BLANK]
            self.r_label = new_rl
        self.horizon = max(self.horizon, horizon)
        return self.score


def ctc_prefix_score(post, prefix, horizon: int) -> float:
    T = _lp(post).shape[0]
    if horizon > T or horizon < 0:
        raise ValueError(f"horizon {horizon} outside 0..{T}")
    return CtcPrefixScorer(post, prefix).extend(horizon)
