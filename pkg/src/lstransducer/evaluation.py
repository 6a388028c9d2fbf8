"""Latency and quality metrics for streaming output, plus the epsilon sweep."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

READ, WRITE = "read", "write"
CSV_HEADER = ("epsilon", "bleu", "al_ms", "laal_ms", "mean_emit_ms")


@dataclass
class StreamingTrace:
    """Interleaved reads and writes; ``ms`` is the source time consumed so far."""

    source_ms: float
    events: list[tuple[str, float, int | None]] = field(default_factory=list)
    ms_per_frame: float = 10.0

    def __post_init__(self):
        last = 0.0
        for kind, ms, _ in self.events:
            if kind not in (READ, WRITE):
                raise ValueError(f"unknown event kind {kind!r}")
            if ms < last:
                raise ValueError("consumed time must not decrease")
            last = ms

    @classmethod
    def from_frames(cls, reads: Sequence[int], n_frames: int, tokens: Sequence[int],
                    emit_frames: Sequence[int], ms_per_frame: float = 10.0) -> "StreamingTrace":
        """Build from frame counts: reads after each chunk, tokens timestamped by frame."""
        if len(tokens) != len(emit_frames):
            raise ValueError("one emission frame per token")
        events: list[tuple[str, float, int | None]] = []
        k = 0
        for n in list(reads) + ([n_frames] if not reads or reads[-1] != n_frames else []):
            while k < len(tokens) and emit_frames[k] < n:
                events.append((WRITE, emit_frames[k] * ms_per_frame, int(tokens[k])))
                k += 1
            events.append((READ, n * ms_per_frame, None))
        for tok, f in zip(tokens[k:], emit_frames[k:]):
            events.append((WRITE, f * ms_per_frame, int(tok)))
        return cls(n_frames * ms_per_frame, events, ms_per_frame)

    def delays(self) -> list[float]:
        return [ms for kind, ms, _ in self.events if kind == WRITE]

    def tokens(self) -> list[int]:
        return [tok for kind, _, tok in self.events if kind == WRITE]


def identity_words(tokens: Sequence[int]) -> list[list[int]]:
    """Token-to-word grouping; every token is a word in the synthetic task."""
    return [[t] for t in tokens]


def word_delays(trace: StreamingTrace, group: Callable = identity_words) -> list[float]:
    """A word is emitted when its last token is."""
    d = trace.delays()
    out, k = [], 0
    for word in group(trace.tokens()):
        k += len(word)
        out.append(d[k - 1])
    return out


def _lagging(delays: Sequence[float], source_ms: float, divisor: int) -> float:
    if source_ms <= 0:
        raise ValueError("source duration must be positive")
    if not delays:
        return float(source_ms)
    tau = next((i + 1 for i, d in enumerate(delays) if d >= source_ms), len(delays))
    rate = source_ms / divisor
    return sum(delays[i] - i * rate for i in range(tau)) / tau


def _delays(trace) -> tuple[list[float], float]:
    if isinstance(trace, StreamingTrace):
        return word_delays(trace), trace.source_ms
    delays, source_ms = trace
    return list(delays), float(source_ms)


def average_lagging(trace, hyp_words: int, ref_words: int) -> float:
    """``trace`` is a StreamingTrace or a ``(delays, source_ms)`` pair."""
    if ref_words < 1:
        raise ValueError("reference must contain at least one word")
    delays, D = _delays(trace)
    return _lagging(delays[:hyp_words], D, ref_words)


def laal(trace, hyp_words: int, ref_words: int) -> float:
    if ref_words < 1:
        raise ValueError("reference must contain at least one word")
    delays, D = _delays(trace)
    return _lagging(delays[:hyp_words], D, max(hyp_words, ref_words))


def scripted_waitk_agent(k: int, pre_decision_ms: float, ref: Sequence[int],
                         source_ms: float | None = None) -> StreamingTrace:
    """Read ``k`` steps, then alternate write/read; flush once the source is exhausted.

    ``source_ms`` defaults to one step per reference word.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    D = float(len(ref) * pre_decision_ms if source_ms is None else source_ms)
    events: list[tuple[str, float, int | None]] = []
    consumed = 0.0

    def read():
        nonlocal consumed
        consumed = min(D, consumed + pre_decision_ms)
        events.append((READ, consumed, None))

    for _ in range(k):
        if consumed < D:
            read()
    for tok in ref:
        events.append((WRITE, consumed, int(tok)))
        if consumed < D:
            read()
    while consumed < D:
        read()
    return StreamingTrace(D, events)


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Percent BLEU with clipped counts; a zero precision is floored at 1e-9.

    An order with no n-grams in either hypotheses or references is left out.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not refs:
        raise ValueError("empty corpus")
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        match = total = ref_total = 0
        for h, x in zip(hyps, refs):
            hc, rc = _ngrams(h, n), _ngrams(x, n)
            match += sum(min(v, rc[g]) for g, v in hc.items())
            total += sum(hc.values())
            ref_total += sum(rc.values())
        if total == 0 and ref_total == 0:
            continue
        p = match / total if total else 0.0
        logs.append(math.log(max(p, 1e-9)))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


@dataclass(frozen=True)
class TradeoffPoint:
    epsilon: float
    bleu: float
    al_ms: float
    laal_ms: float
    mean_emit_ms: float

    def rounded(self) -> "TradeoffPoint":
        return TradeoffPoint(*(round(v, 3) for v in (self.epsilon, self.bleu, self.al_ms,
                                                      self.laal_ms, self.mean_emit_ms)))


def score_outputs(epsilon: float, outputs, refs: Sequence[Sequence[int]]) -> TradeoffPoint:
    """``outputs``: decode results with ``.tokens`` and ``.trace``."""
    hyps = [o.tokens for o in outputs]
    al, la, emit = [], [], []
    for o, ref in zip(outputs, refs):
        al.append(average_lagging(o.trace, len(o.tokens), len(ref)))
        la.append(laal(o.trace, len(o.tokens), len(ref)))
        d = o.trace.delays()
        emit.append(sum(d) / len(d) if d else o.trace.source_ms)
    n = len(outputs)
    return TradeoffPoint(float(epsilon), corpus_bleu(hyps, refs), sum(al) / n, sum(la) / n,
                         sum(emit) / n).rounded()


def sweep(model, records, grid: Sequence[float], cfg, lm=None) -> list[TradeoffPoint]:
    """Decode ``records`` once per epsilon with the same model; sorted by epsilon."""
    from dataclasses import replace
    from .decoding import decode_corpus

    refs = [r.tgt_tokens for r in records]
    points = []
    for eps in sorted(grid):
        outputs = decode_corpus(model, records, replace(cfg, epsilon=float(eps)), lm)
        points.append(score_outputs(eps, outputs, refs))
    return points


def write_tradeoff_csv(path, points: Sequence[TradeoffPoint]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_tradeoff_csv(points))


def format_tradeoff_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in sorted(points, key=lambda p: p.epsilon):
        w.writerow([f"{getattr(p, k):.3f}" for k in CSV_HEADER])
    return buf.getvalue()


def read_tradeoff_csv(path) -> list[TradeoffPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TradeoffPoint(*(float(row[k]) for k in CSV_HEADER)) for row in rows]


def format_trace(utt_id: str, trace: StreamingTrace) -> str:
    lines = []
    for kind, ms, tok in trace.events:
        lines.append(f"{utt_id},{kind},{ms:.3f},{'' if tok is None else tok}")
    return "\n".join(lines) + "\n"
