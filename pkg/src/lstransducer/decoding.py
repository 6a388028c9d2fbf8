"""Chunk-based incremental joint decoding.

Source frames arrive chunk by chunk. After each chunk the encoder is re-run on
everything read so far and the running frame-weight sum decides how many tokens
may fire: token ``i`` fires once the sum strictly exceeds ``i + epsilon``. A
beam is kept while tokens fire inside a chunk; when the next token cannot fire
before more input arrives, the beam collapses onto its best hypothesis and the
shared prefix is committed. After the last chunk the remaining tokens are
produced with full context until EOS or the length cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as tn
from .aif import extract_batch, find_boundary, frame_weights, is_last_in_chunk
from .ctc import NEG, CtcPrefixScorer
from .evaluation import StreamingTrace
from .model import BOS, EOS, PredictorState, Transducer, predictor_start, predictor_step
from .tensor import Tensor

MODES = ("chunked", "tail_beam", "greedy")


@dataclass
class DecodeConfig:
    epsilon: float = 0.0
    beam_in_chunk: int = 10
    mode: str = "chunked"
    lambda_ctc: float = 0.0
    fusion_mu: float = 0.0
    max_len_ratio: float = 1.5
    check_invariants: bool = True

    def __post_init__(self):
        if self.beam_in_chunk < 1:
            raise ValueError("beam_in_chunk must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    emit_frames: tuple[int, ...]
    pred_state: PredictorState
    h_pred: np.ndarray = field(repr=False)     # prediction output for the next position
    query: np.ndarray = field(repr=False)
    lm_state: PredictorState | None = field(default=None, repr=False)
    lm_logp: np.ndarray | None = field(default=None, repr=False)
    ctc_score: float = 0.0

    def next_threshold(self, epsilon: float) -> float:
        return len(self.tokens) + 1 + epsilon


@dataclass
class Extension:
    parent: int
    token: int
    score: float
    ctc_score: float = 0.0


@dataclass
class DecodeResult:
    tokens: list[int]
    emit_frames: list[int]
    score: float
    trace: StreamingTrace
    commits: list[tuple[int, ...]]         # committed prefix at every pruning event
    n_frames: int


def _lm_logp(lm: Transducer, h: np.ndarray) -> np.ndarray:
    return tn.log_softmax_lastdim(lm.lm_logits(Tensor(h))).data


class Decoder:
    """One object per (model, config); :meth:`decode` runs an independent session."""

    def __init__(self, model: Transducer, cfg: DecodeConfig, lm: Transducer | None = None):
        self.model = model
        self.cfg = cfg
        self.lm = lm
        if cfg.fusion_mu and lm is None:
            raise ValueError("shallow fusion needs an external LM")

    # -- hypothesis plumbing
    def initial(self) -> Hypothesis:
        h, q, st = predictor_step(self.model, predictor_start(self.model), BOS)
        lm_state = lm_logp = None
        if self.lm is not None:
            lh, _, lm_state = predictor_step(self.lm, predictor_start(self.lm), BOS)
            lm_logp = _lm_logp(self.lm, lh)
        return Hypothesis((), 0.0, (), st, h, q, lm_state, lm_logp, 0.0)

    def extend(self, hyp: Hypothesis, ext: Extension, frame: int) -> Hypothesis:
        h, q, st = predictor_step(self.model, hyp.pred_state, ext.token)
        lm_state, lm_logp = hyp.lm_state, hyp.lm_logp
        if self.lm is not None:
            lh, _, lm_state = predictor_step(self.lm, hyp.lm_state, ext.token)
            lm_logp = _lm_logp(self.lm, lh)
        return Hypothesis(hyp.tokens + (ext.token,), ext.score, hyp.emit_frames + (frame,),
                          st, h, q, lm_state, lm_logp, ext.ctc_score)

    def finish(self, hyp: Hypothesis, ext: Extension) -> Hypothesis:
        return replace(hyp, score=ext.score)

    # -- scoring
    def token_scores(self, beam: Sequence[Hypothesis], E: np.ndarray, T_i: int,
                     ctc_logp: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        """Per-hypothesis next-token scores [n, V] and the CTC prefix scores backing them."""
        model, cfg = self.model, self.cfg
        n, d = len(beam), model.cfg.d_model
        q = np.stack([h.query for h in beam])[None]
        bounds = np.full((1, n), T_i)
        h_aif = extract_batch(model, Tensor(q), Tensor(E[None]), bounds).data[0]
        h_pred = np.stack([h.h_pred for h in beam])
        logits = model.joint(Tensor(h_aif), Tensor(h_pred))
        scores = tn.log_softmax_lastdim(logits).data
        if cfg.fusion_mu:
            scores = scores + cfg.fusion_mu * np.stack([h.lm_logp for h in beam])
        ctc = np.zeros_like(scores)
        if cfg.lambda_ctc and ctc_logp is not None:
            ctc = self._ctc_scores(beam, scores, ctc_logp, max(T_i, 1))
            scores = scores + cfg.lambda_ctc * (ctc - np.array([h.ctc_score for h in beam])[:, None])
        return scores, ctc

    def _ctc_scores(self, beam, scores, ctc_logp, horizon) -> np.ndarray:
        """Prefix scores for the best joint candidates; everything else is ruled out."""
        V = scores.shape[1]
        pre = min(V, int(math.ceil(1.5 * self.cfg.beam_in_chunk)) + 1)
        out = np.full_like(scores, NEG)
        for r, hyp in enumerate(beam):
            for tok in np.argsort(-scores[r], kind="stable")[:pre]:
                tok = int(tok)
                if tok == EOS:
                    base = CtcPrefixScorer(ctc_logp, np.array(hyp.tokens, dtype=np.int64) + 1)
                    base.extend(horizon)
                    out[r, tok] = base.full_score()
                else:
                    s = CtcPrefixScorer(ctc_logp, np.array(hyp.tokens + (tok,), dtype=np.int64) + 1)
                    out[r, tok] = s.extend(horizon)
        return out

    def score_step(self, beam: Sequence[Hypothesis], E: np.ndarray, T_i: int, width: int,
                   ctc_logp: np.ndarray | None = None, allow_eos: bool = True) -> list[Extension]:
        """Top ``width`` extensions over the whole beam; ties go to the smaller token id."""
        scores, ctc = self.token_scores(beam, E, T_i, ctc_logp)
        if not allow_eos:
            scores[:, EOS] = -np.inf
        pool = []
        for r, hyp in enumerate(beam):
            total = hyp.score + scores[r]
            # stable sort on -score keeps ascending token order among equal scores
            for tok in np.argsort(-total, kind="stable")[:width]:
                pool.append(Extension(r, int(tok), float(total[tok]), float(ctc[r, tok])))
        pool.sort(key=lambda e: (-e.score, e.parent, e.token))
        return pool[:width]

    # -- search
    def _width(self, final: bool) -> int:
        mode = self.cfg.mode
        if mode == "greedy" or (mode == "tail_beam" and not final):
            return 1
        return self.cfg.beam_in_chunk

    def _advance(self, state: "_Session", E: np.ndarray, cumsum: np.ndarray, n_frames: int,
                 final: bool, offline: bool = False) -> bool:
        """Fire every token the available weight allows; returns True when decoding is done."""
        cfg = self.cfg
        eps = cfg.epsilon
        width = self._width(final)
        ctc_logp = None
        if cfg.lambda_ctc:
            ctc_logp = self.model.ctc_log_probs(Tensor(E)).data
        fired = False
        while state.beam:
            i = len(state.beam[0].tokens) + 1
            if not final and not cumsum[-1] > i + eps:
                break
            if final and i > state.cap:
                state.finished.extend(state.beam)
                state.beam = []
                return True
            T_i = n_frames if offline else min(find_boundary(cumsum, i, eps), n_frames)
            exts = self.score_step(state.beam, E, T_i, width, ctc_logp, allow_eos=final)
            parents = state.beam
            state.beam = []
            for ext in exts:
                if ext.token == EOS:
                    state.finished.append(self.finish(parents[ext.parent], ext))
                else:
                    state.beam.append(self.extend(parents[ext.parent], ext, n_frames))
            fired = True
            if state.finished and (not state.beam or
                                   max(h.score for h in state.finished) > max(h.score for h in state.beam)):
                return True
        if fired and not final and state.beam and is_last_in_chunk(cumsum[-1], len(state.beam[0].tokens) + 1, eps):
            state.prune(self.cfg.check_invariants)
        return not state.beam

    def decode(self, frames, chunks: Sequence[np.ndarray] | None = None,
               ms_per_frame: float = 10.0) -> DecodeResult:
        """Streaming decode. ``frames`` [T, feat] is split into encoder-sized chunks
        unless explicit arrival ``chunks`` are given."""
        model = self.model
        if chunks is None:
            frames = np.asarray(frames, dtype=np.float64)
            C = model.cfg.chunk_size
            chunks = [frames[s : s + C] for s in range(0, len(frames), C)]
        if not chunks:
            raise ValueError("need at least one chunk")
        T = sum(len(c) for c in chunks)
        state = _Session(self.initial())
        reads: list[int] = []
        seen = np.zeros((0, model.cfg.feat_dim))
        prev_alpha = np.zeros(0)
        done = False
        for c, chunk in enumerate(chunks):
            seen = np.concatenate([seen, np.asarray(chunk, dtype=np.float64)])
            n = len(seen)
            reads.append(n)
            enc = model.encode(seen)
            fw = frame_weights(enc, model.cfg.delta, model.cfg.alpha_scale)
            alpha = fw.alpha.data
            if self.cfg.check_invariants and not np.allclose(alpha[: len(prev_alpha)], prev_alpha,
                                                             rtol=0.0, atol=1e-9):
                raise AssertionError("frame weights of earlier chunks changed after new input")
            prev_alpha = alpha
            final = c == len(chunks) - 1
            if final:
                state.cap = int(math.ceil(self.cfg.max_len_ratio * fw.cumsum[-1])) + 1
            done = self._advance(state, enc.E.data, fw.cumsum, n, final)
            if done:
                break
        if not done or state.beam:
            state.finished.extend(state.beam)
        return state.result(reads, T, ms_per_frame)

    def decode_offline(self, frames, ms_per_frame: float = 10.0) -> DecodeResult:
        """Whole-utterance reference: every token attends over all frames."""
        model = self.model
        frames = np.asarray(frames, dtype=np.float64)
        enc = model.encode(frames)
        fw = frame_weights(enc, model.cfg.delta, model.cfg.alpha_scale)
        state = _Session(self.initial())
        state.cap = int(math.ceil(self.cfg.max_len_ratio * fw.cumsum[-1])) + 1
        self._advance(state, enc.E.data, fw.cumsum, len(frames), final=True, offline=True)
        state.finished.extend(state.beam)
        return state.result([len(frames)], len(frames), ms_per_frame)


class _Session:
    def __init__(self, start: Hypothesis):
        self.beam = [start]
        self.finished: list[Hypothesis] = []
        self.commits: list[tuple[int, ...]] = []
        self.cap = 10**9

    def prune(self, check: bool) -> None:
        best = max(self.beam, key=lambda h: h.score)
        if check and self.commits and best.tokens[: len(self.commits[-1])] != self.commits[-1]:
            raise AssertionError("pruning would retract committed tokens")
        self.beam = [best]
        # earlier EOS endings diverge from the new commitment and already score lower
        self.finished = []
        self.commits.append(best.tokens)

    def result(self, reads: list[int], T: int, ms_per_frame: float) -> DecodeResult:
        best = max(self.finished, key=lambda h: h.score)
        trace = StreamingTrace.from_frames(reads, T, list(best.tokens), list(best.emit_frames), ms_per_frame)
        return DecodeResult(list(best.tokens), list(best.emit_frames), best.score, trace,
                            list(self.commits), T)


def decode_streaming(model: Transducer, frames, cfg: DecodeConfig, lm: Transducer | None = None,
                     chunks: Sequence[np.ndarray] | None = None, ms_per_frame: float = 10.0):
    res = Decoder(model, cfg, lm).decode(frames, chunks, ms_per_frame)
    return res.tokens, res.trace


def decode_offline(model: Transducer, frames, cfg: DecodeConfig, lm: Transducer | None = None) -> list[int]:
    return Decoder(model, cfg, lm).decode_offline(frames).tokens


def decode_corpus(model: Transducer, records: Sequence, cfg: DecodeConfig,
                  lm: Transducer | None = None, offline: bool = False) -> list[DecodeResult]:
    dec = Decoder(model, cfg, lm)
    out = []
    for r in records:
        if offline:
            out.append(dec.decode_offline(r.frames, r.ms_per_frame))
        else:
            out.append(dec.decode(r.frames, ms_per_frame=r.ms_per_frame))
    return out
