import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lstransducer import data as ds
from lstransducer.model import BOS, EOS


def pi(s, cfg):
    return ds.N_SPECIAL + int(ds.permutation(cfg)[s])


def test_swap_rule_instance():
    cfg = ds.SynthConfig(expand_below=0)
    assert ds.translate([3, 7], cfg) == [pi(7, cfg), pi(3, cfg)]


def test_expansion_rule_instance():
    cfg = ds.SynthConfig()
    assert 1 < cfg.expand_below
    assert ds.translate([1], cfg) == [pi(1, cfg), ds.N_SPECIAL + cfg.src_vocab + 1]


def test_odd_tail_is_not_swapped():
    cfg = ds.SynthConfig(expand_below=0)
    assert ds.translate([3, 7, 5], cfg) == [pi(7, cfg), pi(3, cfg), pi(5, cfg)]


def test_no_swap_keeps_order():
    cfg = ds.SynthConfig(expand_below=0, swap_pairs=False)
    assert ds.translate([3, 7], cfg) == [pi(3, cfg), pi(7, cfg)]


def test_vocabulary_layout():
    cfg = ds.SynthConfig()
    assert (BOS, EOS) == (0, 1)
    assert cfg.vocab_size == 2 + 40 + 10 == 52
    out = {t for s in range(cfg.src_vocab) for t in ds.translate_token(s, cfg)}
    assert out == set(range(2, cfg.vocab_size))


@pytest.mark.parametrize("bad", [dict(feat_dim=3), dict(min_len=0), dict(min_len=5, max_len=4), dict(domain="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ds.SynthConfig(**bad)


@given(st.lists(st.integers(0, 39), min_size=1, max_size=12))
def test_target_at_least_as_long_as_source(src):
    cfg = ds.SynthConfig()
    tgt = ds.translate(src, cfg)
    assert len(tgt) == len(src) + sum(s < cfg.expand_below for s in src)
    assert all(2 <= t < cfg.vocab_size for t in tgt)


@pytest.fixture(scope="module")
def splits():
    return ds.generate(ds.SynthConfig(dev_size=20, test_size=20, cross_size=30), 60)


def test_generated_records(splits):
    cfg = ds.SynthConfig()
    for split, recs in splits.items():
        for r in recs:
            assert r.tgt_tokens == ds.translate(r.src_tokens, cfg)
            assert len(r.tgt_tokens) >= len(r.src_tokens)
            assert r.frames.shape == (4 * len(r.src_tokens), cfg.feat_dim)
            assert cfg.min_len <= len(r.src_tokens) <= cfg.max_len
            assert np.array_equal(r.frames.reshape(len(r.src_tokens), 4, -1).mean(1).argmax(-1), r.src_tokens)


def test_split_disjointness(splits):
    ids = [r.utt_id for recs in splits.values() for r in recs]
    assert len(ids) == len(set(ids))
    assert [len(splits[s]) for s in ds.SPLITS] == [60, 20, 20, 30]


def test_cross_domain_has_no_repeated_tokens(splits):
    for r in splits["cross_test"]:
        assert all(a != b for a, b in zip(r.src_tokens, r.src_tokens[1:]))


def test_markov_rows_are_distributions():
    init, trans = ds._markov(ds.SynthConfig())
    assert init.sum() == pytest.approx(1.0)
    assert np.allclose(trans.sum(1), 1.0) and not np.diag(trans).any()


def test_domains_differ():
    cfg = ds.SynthConfig()
    u = np.bincount(np.concatenate(ds.generate_text(cfg, 400, "uniform", 0)), minlength=cfg.vocab_size)
    m = np.bincount(np.concatenate(ds.generate_text(cfg, 400, "skewed-markov", 0)), minlength=cfg.vocab_size)
    assert m.max() / m.sum() > 2 * u.max() / u.sum()


def test_generation_is_deterministic(tmp_path):
    cfg = ds.SynthConfig(seed=7, dev_size=3, test_size=3, cross_size=3)
    for d in ("a", "b"):
        ds.write_dataset(tmp_path / d, cfg, ds.generate(cfg, 5), {"lm_text": ds.generate_text(cfg, 5, "uniform", 1)})
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    other = ds.generate(ds.SynthConfig(seed=8, dev_size=3, test_size=3, cross_size=3), 5)
    assert other["train"] != ds.generate(cfg, 5)["train"]


def test_n_utts_must_be_positive():
    with pytest.raises(ValueError):
        ds.generate(ds.SynthConfig(), 0)


def test_round_trip(tmp_path, splits):
    path = tmp_path / "train.jsonl"
    ds.write_records(path, splits["train"])
    back = ds.read_records(path)
    assert back == splits["train"]
    ds.write_records(tmp_path / "again.jsonl", back)
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_meta_round_trip(tmp_path):
    cfg = ds.SynthConfig(src_vocab=8)
    ds.write_dataset(tmp_path, cfg, ds.generate(cfg, 2))
    meta = ds.read_meta(tmp_path)
    assert meta["synth"] == cfg and meta["vocab_size"] == cfg.vocab_size


def test_text_round_trip(tmp_path):
    corpus = [[2, 3, 4], [5], [9, 9]]
    ds.write_text(tmp_path / "t.txt", corpus)
    assert ds.read_text(tmp_path / "t.txt") == corpus


def test_empty_file_is_empty_dataset(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert ds.read_records(tmp_path / "e.jsonl") == []


def test_missing_field_is_named(tmp_path, splits):
    obj = json.loads(splits["dev"][0].to_json())
    del obj["tgt_tokens"]
    path = tmp_path / "bad.jsonl"
    path.write_text(splits["dev"][1].to_json() + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(ds.DatasetFormatError, match=r":2: missing field 'tgt_tokens'"):
        ds.read_records(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n{not json\n")
    with pytest.raises(ds.DatasetFormatError, match=r":2: malformed"):
        ds.read_records(path)
    path.write_text('{"utt_id": "x", "frames": [1, 2], "src_tokens": [], "tgt_tokens": [], "ms_per_frame": 10}\n')
    with pytest.raises(ds.DatasetFormatError, match=r":1: .*2-D"):
        ds.read_records(path)


def test_bad_text_line(tmp_path):
    (tmp_path / "t.txt").write_text("1 2\n3 x\n")
    with pytest.raises(ds.DatasetFormatError, match=":2:"):
        ds.read_text(tmp_path / "t.txt")
