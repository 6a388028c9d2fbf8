"""Auto-regressive integrate-and-fire: frame weights, firing boundaries, extraction.

Frame ``t`` carries weight ``alpha_t = (1 - delta) * sigmoid(e_t[-1]) + delta``.
Token ``i`` (1-based) fires at the first frame whose running sum strictly
exceeds ``i + epsilon``; if that frame is ``T_i + 1`` the token is extracted
from ``E[:T_i]``. When the threshold is never exceeded, ``T_i = T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .model import NEG_INF, EncoderOutput, Transducer, attention
from .tensor import Tensor


@dataclass
class FrameWeights:
    alpha: Tensor
    cumsum: np.ndarray
    delta: float

    @property
    def T(self) -> int:
        return self.alpha.shape[-1]


def frame_weights(E, delta: float, scale: float = 1.0) -> FrameWeights:
    """``E`` is an :class:`EncoderOutput`, or a Tensor whose last axis is features."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    enc = E.E if isinstance(E, EncoderOutput) else E
    raw = tn.getitem(enc, (Ellipsis, -1))
    alpha = tn.add_scalar(tn.scale(tn.sigmoid(raw), 1.0 - delta), delta)
    if scale != 1.0:
        alpha = tn.scale(alpha, scale)
    # np.cumsum accumulates left to right, so a prefix of frames has a prefix of sums
    return FrameWeights(alpha, np.cumsum(alpha.data, axis=-1), delta)


def find_boundary(w, i: int, epsilon: float = 0.0) -> int:
    """``T_i`` for token ``i``: the number of running sums that do not exceed ``i + epsilon``.

    ``w`` is a :class:`FrameWeights` or a 1-D array of running sums.
    """
    if i < 1:
        raise ValueError("token index must be >= 1")
    cumsum = w.cumsum if isinstance(w, FrameWeights) else np.asarray(w, dtype=np.float64)
    return int(np.searchsorted(cumsum, i + epsilon, side="right"))


def boundaries(cumsum: np.ndarray, n_tokens: int, epsilon: float = 0.0) -> np.ndarray:
    """``T_1 .. T_n`` in one call."""
    thresholds = np.arange(1, n_tokens + 1) + epsilon
    return np.searchsorted(np.asarray(cumsum, dtype=np.float64), thresholds, side="right")


def is_last_in_chunk(cumsum_at_chunk_end: float, next_token_index: int, epsilon: float = 0.0) -> bool:
    """True when the next token cannot fire inside the chunk just read."""
    return bool(cumsum_at_chunk_end <= next_token_index + epsilon)


def quantity_loss(w: FrameWeights | Tensor, L: int) -> Tensor:
    if L < 1:
        raise ValueError("target length must be >= 1")
    alpha = w.alpha if isinstance(w, FrameWeights) else w
    return tn.abs_(tn.add_scalar(tn.sum_(alpha), -float(L)))


def extraction_mask(bounds: np.ndarray, n_frames: int) -> np.ndarray:
    """bool [..., n_frames]: frame ``t`` (0-based) visible iff ``t < max(T_i, 1)``.

    A zero boundary (only reachable with negative epsilon) still sees the first frame.
    """
    b = np.maximum(np.asarray(bounds), 1)
    return np.arange(n_frames) < b[..., None]


def extract_batch(model: Transducer, query: Tensor, E: Tensor, bounds: np.ndarray,
                  mode: str | None = None) -> Tensor:
    """``query``: [B, L, d]; ``E``: [B, T, d]; ``bounds``: int [B, L] -> h_aif [B, L, d]."""
    mode = mode or model.cfg.aif_mode
    bounds = np.asarray(bounds)
    if np.any(bounds > E.shape[1]) or np.any(bounds < 0):
        raise ValueError("boundary outside the encoded frames")
    keep = extraction_mask(bounds, E.shape[1])
    if mode == "multihead":
        return attention(model.params, "aif.attn", query, E, keep, model.cfg.n_heads)
    if mode == "dotproduct":
        scores = tn.masked_fill(tn.matmul(query, tn.swap_last(E)), keep, NEG_INF)
        return tn.matmul(tn.softmax_lastdim(scores), E)
    raise ValueError(f"unknown extraction mode {mode!r}")


def extract(model: Transducer, q, E, T_i: int, mode: str | None = None) -> Tensor:
    """Single-token extraction: ``q`` [d], ``E`` an EncoderOutput or [T, d]."""
    enc = E.E if isinstance(E, EncoderOutput) else (E if isinstance(E, Tensor) else Tensor(E))
    T = enc.shape[0]
    if T_i > T or T_i < 0:
        raise ValueError(f"boundary {T_i} outside 0..{T}")
    qt = q if isinstance(q, Tensor) else Tensor(q)
    d = qt.shape[-1]
    out = extract_batch(model, tn.reshape(qt, (1, 1, d)), tn.reshape(enc, (1, T, d)),
                        np.array([[T_i]]), mode)
    return tn.reshape(out, (d,))
