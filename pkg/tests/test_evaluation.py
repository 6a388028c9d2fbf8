import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lstransducer.evaluation import (READ, WRITE, StreamingTrace, TradeoffPoint, average_lagging,
                                     corpus_bleu, format_trace, format_tradeoff_csv, laal,
                                     read_tradeoff_csv, scripted_waitk_agent, word_delays,
                                     write_tradeoff_csv)

from oracles import waitk_al


def test_waitk_worked_example():
    trace = scripted_waitk_agent(1, 200, [10, 11, 12, 13, 14])
    assert trace.source_ms == 1000
    assert word_delays(trace) == [200, 400, 600, 800, 1000]
    assert average_lagging(trace, 5, 5) == 200.0
    assert laal(trace, 5, 5) == 200.0


def test_laal_with_longer_hypothesis():
    trace = scripted_waitk_agent(1, 200, list(range(7)), source_ms=1000)
    assert word_delays(trace) == [200, 400, 600, 800, 1000, 1000, 1000]
    assert laal(trace, 7, 5) == pytest.approx(2200 / 7, abs=1e-9)   # 314.286
    assert average_lagging(trace, 7, 5) == pytest.approx(200.0)


def test_oracle_simultaneity_gives_zero():
    D, n = 900.0, 6
    assert average_lagging(([i * D / n for i in range(n)], D), n, n) == 0.0


def test_fully_offline_gives_source_duration():
    assert average_lagging(([700.0] * 4, 700.0), 4, 5) == 700.0


def test_empty_hypothesis_gives_source_duration():
    assert average_lagging(([], 500.0), 0, 3) == 500.0
    assert laal(([], 500.0), 0, 3) == 500.0


def test_reference_must_be_nonempty():
    with pytest.raises(ValueError):
        average_lagging(([100.0], 500.0), 1, 0)
    with pytest.raises(ValueError):
        laal(([100.0], 500.0), 1, 0)


def test_waitk_agent_requires_positive_k():
    with pytest.raises(ValueError):
        scripted_waitk_agent(0, 100, [1])


def test_large_k_writes_after_full_read():
    trace = scripted_waitk_agent(9, 100, [1, 2, 3, 4])
    assert average_lagging(trace, 4, 4) == trace.source_ms


def test_waitk_closed_form_random_configurations():
    rnd = random.Random(0)
    for _ in range(50):
        k, p, n = rnd.randint(1, 6), rnd.choice([40, 100, 160, 200, 280]), rnd.randint(1, 12)
        D = rnd.choice([None, n * p, rnd.randint(1, 3 * n) * p // 2 + 1])
        trace = scripted_waitk_agent(k, p, list(range(n)), source_ms=D)
        D = trace.source_ms
        assert abs(average_lagging(trace, n, n) - waitk_al(k, p, D, n)) <= 1e-9
        r = rnd.randint(1, 12)
        assert abs(laal(trace, n, r) - waitk_al(k, p, D, n, divisor=max(n, r))) <= 1e-9


@given(st.integers(1, 8), st.integers(1, 10), st.integers(1, 300))
def test_al_non_decreasing_in_k(k, n, p):
    ref = list(range(n))
    assert average_lagging(scripted_waitk_agent(k, p, ref), n, n) <= \
        average_lagging(scripted_waitk_agent(k + 1, p, ref), n, n) + 1e-9


delay_lists = st.lists(st.floats(0, 1000), min_size=1, max_size=10).map(sorted)


@given(delay_lists, st.integers(1, 12))
def test_laal_is_al_with_hypothesis_divisor(delays, ref):
    D = 1000.0
    hyp = len(delays)
    if hyp >= ref:
        assert laal((delays, D), hyp, ref) == average_lagging((delays, D), hyp, hyp)
    else:
        assert laal((delays, D), hyp, ref) == average_lagging((delays, D), hyp, ref)
        assert laal((delays, D), hyp, ref) >= average_lagging((delays, D), hyp, ref) - 1e-9


@given(delay_lists, st.integers(1, 10))
def test_shorter_hypothesis_laal_at_least_al(delays, extra):
    hyp = len(delays)
    ref = hyp + extra
    # divisor max(hyp, ref) == ref, so the two agree; with a longer hypothesis LAAL's ramp shrinks
    assert laal((delays, 1000.0), hyp, ref) == average_lagging((delays, 1000.0), hyp, ref)


# ---------------------------------------------------------------- trace

def test_trace_rejects_decreasing_time():
    with pytest.raises(ValueError):
        StreamingTrace(100, [(READ, 50, None), (WRITE, 40, 3)])
    with pytest.raises(ValueError):
        StreamingTrace(100, [("peek", 50, None)])


def test_trace_from_frames():
    t = StreamingTrace.from_frames([8, 16, 20], 20, [4, 5, 6], [8, 8, 20], ms_per_frame=10)
    assert t.events == [(READ, 80, None), (WRITE, 80, 4), (WRITE, 80, 5), (READ, 160, None),
                        (READ, 200, None), (WRITE, 200, 6)]
    assert t.source_ms == 200 and t.tokens() == [4, 5, 6]
    assert [e for e in t.events if e[0] == READ][-1][1] == t.source_ms
    with pytest.raises(ValueError):
        StreamingTrace.from_frames([4], 4, [1, 2], [4])


def test_word_grouping_hook():
    t = StreamingTrace.from_frames([4, 8], 8, [4, 5, 6], [4, 8, 8])
    assert word_delays(t, lambda toks: [toks[:1], toks[1:]]) == [40, 80]


def test_trace_dump():
    t = StreamingTrace.from_frames([4], 4, [9], [4])
    assert format_trace("u1", t) == "u1,read,40.000,\nu1,write,40.000,9\n"


# ---------------------------------------------------------------- BLEU

def test_bleu_identity_and_empty():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
    assert corpus_bleu(refs, refs) == 100.0
    assert corpus_bleu([[], []], refs) == 0.0


def test_bleu_brevity_penalty_example():
    assert corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]]) == pytest.approx(100 * math.exp(-0.25))
    assert corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]]) == pytest.approx(77.88, abs=5e-3)


def test_bleu_zero_precision_is_floored():
    b = corpus_bleu([[1, 2, 3, 4]], [[4, 3, 2, 1]])
    assert 0.0 < b < 1e-3


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        corpus_bleu([], [])


corpora = st.lists(st.tuples(st.lists(st.integers(2, 6), max_size=8), st.lists(st.integers(2, 6), min_size=1,
                                                                                  max_size=8)),
                   min_size=1, max_size=6)


@given(corpora, st.randoms())
def test_bleu_permutation_invariant(pairs, rnd):
    hyps, refs = zip(*pairs)
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    assert 0.0 <= a <= 100.0 + 1e-9


@given(st.lists(st.lists(st.integers(0, 9), min_size=1, max_size=8), min_size=1, max_size=5))
def test_bleu_of_references_is_100(refs):
    assert corpus_bleu(refs, refs) == pytest.approx(100.0)


# ---------------------------------------------------------------- CSV

def test_tradeoff_csv_round_trip(tmp_path):
    pts = [TradeoffPoint(3.0, 80.1234, 410.5, 420.25, 300.0).rounded(), TradeoffPoint(0.0, 70.0, 200.0, 210.0, 150.0)]
    path = tmp_path / "t.csv"
    write_tradeoff_csv(path, pts)
    assert read_tradeoff_csv(path) == sorted(pts, key=lambda p: p.epsilon)
    text = path.read_text().splitlines()
    assert text[0] == "epsilon,bleu,al_ms,laal_ms,mean_emit_ms"
    assert text[1] == "0.000,70.000,200.000,210.000,150.000"


def test_one_epsilon_one_row():
    assert len(format_tradeoff_csv([TradeoffPoint(1.0, 1, 1, 1, 1)]).splitlines()) == 2


def test_sweep_on_tiny_model(small_synth, small_data):
    from lstransducer.decoding import DecodeConfig
    from lstransducer.evaluation import sweep
    from lstransducer.model import Transducer
    from conftest import tiny_config

    model = Transducer(tiny_config(small_synth), seed=0)
    pts = sweep(model, small_data["test"][:3], [3.0, 0.0], DecodeConfig(beam_in_chunk=2))
    assert [p.epsilon for p in pts] == [0.0, 3.0]
    for p in pts:
        assert p.al_ms <= p.laal_ms   # the ramp only shrinks when the divisor grows
