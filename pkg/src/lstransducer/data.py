"""Synthetic re-ordering translation task and its line-delimited file format.

Each source token becomes ``frames_per_token`` noisy one-hot frames. The target
swaps every adjacent source pair, maps each token through a fixed permutation
and expands the low ids into two target tokens. Target ids 0 and 1 are BOS/EOS.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS

N_SPECIAL = 2
SPLITS = ("train", "dev", "test", "cross_test")
REQUIRED = ("utt_id", "frames", "src_tokens", "tgt_tokens", "ms_per_frame")


@dataclass
class SynthConfig:
    src_vocab: int = 40
    frames_per_token: int = 4
    feat_dim: int = 0               # 0 means src_vocab
    noise_sigma: float = 0.1
    swap_pairs: bool = True
    expand_below: int = -1          # ids below this expand to two tokens; -1 means src_vocab // 4
    min_len: int = 4
    max_len: int = 12
    domain: str = "uniform"
    seed: int = 0
    mapping_seed: int = 1234
    ms_per_frame: int = 10
    dev_size: int = 100
    test_size: int = 100
    cross_size: int = 100

    def __post_init__(self):
        if self.feat_dim == 0:
            self.feat_dim = self.src_vocab
        if self.expand_below < 0:
            self.expand_below = self.src_vocab // 4
        if self.feat_dim < self.src_vocab:
            raise ValueError("feat_dim must cover the one-hot source tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.domain not in ("uniform", "skewed-markov"):
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL + self.src_vocab + self.expand_below

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UtteranceRecord:
    utt_id: str
    frames: np.ndarray
    src_tokens: list[int]
    tgt_tokens: list[int]
    ms_per_frame: int = 10

    def to_json(self) -> str:
        return json.dumps({
            "utt_id": self.utt_id,
            "frames": np.asarray(self.frames).tolist(),
            "src_tokens": list(self.src_tokens),
            "tgt_tokens": list(self.tgt_tokens),
            "ms_per_frame": self.ms_per_frame,
        }, separators=(",", ":"))

    def __eq__(self, other) -> bool:
        return (isinstance(other, UtteranceRecord) and self.utt_id == other.utt_id
                and np.array_equal(self.frames, other.frames)
                and list(self.src_tokens) == list(other.src_tokens)
                and list(self.tgt_tokens) == list(other.tgt_tokens)
                and self.ms_per_frame == other.ms_per_frame)


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------- mapping

def permutation(cfg: SynthConfig) -> np.ndarray:
    return np.random.default_rng(cfg.mapping_seed).permutation(cfg.src_vocab)


def translate_token(s: int, cfg: SynthConfig, perm: np.ndarray | None = None) -> list[int]:
    perm = permutation(cfg) if perm is None else perm
    out = [N_SPECIAL + int(perm[s])]
    if s < cfg.expand_below:
        out.append(N_SPECIAL + cfg.src_vocab + s)
    return out


def translate(src: Sequence[int], cfg: SynthConfig) -> list[int]:
    perm = permutation(cfg)
    order = list(range(len(src)))
    if cfg.swap_pairs:
        for j in range(0, len(src) - 1, 2):
            order[j], order[j + 1] = j + 1, j
    out: list[int] = []
    for pos in order:
        out.extend(translate_token(int(src[pos]), cfg, perm))
    return out


# ---------------------------------------------------------------- sampling

def _markov(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Initial distribution and transition matrix of the skewed domain (fixed per mapping).

    Self-transitions are excluded: the shift from the uniform domain is in token
    statistics only, not in runs of identical frames.
    """
    V = cfg.src_vocab
    rng = np.random.default_rng(cfg.mapping_seed + 1)
    ranks = rng.permutation(V)
    init = 1.0 / (1.0 + ranks)
    init /= init.sum()
    trans = np.zeros((V, V))
    for s in range(V):
        others = np.array([t for t in range(V) if t != s])
        fav = rng.choice(others, size=3, replace=False)
        trans[s, others] = 0.15 / (V - 4)
        trans[s, fav] = [0.5, 0.25, 0.1]
    return init, trans


def sample_source(cfg: SynthConfig, rng: np.random.Generator, domain: str | None = None) -> list[int]:
    domain = domain or cfg.domain
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    if domain == "uniform":
        return [int(x) for x in rng.integers(0, cfg.src_vocab, size=n)]
    init, trans = _markov(cfg)
    seq = [int(rng.choice(cfg.src_vocab, p=init))]
    while len(seq) < n:
        seq.append(int(rng.choice(cfg.src_vocab, p=trans[seq[-1]])))
    return seq


def render_frames(src: Sequence[int], cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    r = cfg.frames_per_token
    frames = np.zeros((len(src) * r, cfg.feat_dim))
    for j, s in enumerate(src):
        frames[j * r : (j + 1) * r, s] = 1.0
    frames += rng.normal(0.0, cfg.noise_sigma, size=frames.shape)
    # stored at 9 significant digits so files round-trip exactly
    return np.vectorize(lambda x: float(f"{x:.9g}"))(frames) if frames.size else frames


def make_record(utt_id: str, src: Sequence[int], cfg: SynthConfig, rng: np.random.Generator) -> UtteranceRecord:
    return UtteranceRecord(utt_id, render_frames(src, cfg, rng), list(src), translate(src, cfg), cfg.ms_per_frame)


def generate(cfg: SynthConfig, n_utts: int) -> dict[str, list[UtteranceRecord]]:
    """train / dev / test from ``cfg.domain``; cross_test from the skewed Markov domain."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    sizes = {"train": n_utts, "dev": cfg.dev_size, "test": cfg.test_size, "cross_test": cfg.cross_size}
    out = {}
    for split in SPLITS:
        domain = "skewed-markov" if split == "cross_test" else cfg.domain
        out[split] = [make_record(f"{split}-{k:05d}", sample_source(cfg, rng, domain), cfg, rng)
                      for k in range(sizes[split])]
    return out


def generate_text(cfg: SynthConfig, n: int, domain: str, seed: int) -> list[list[int]]:
    """Target-side-only corpus: translations of freshly sampled source sequences."""
    rng = np.random.default_rng(seed)
    return [translate(sample_source(cfg, rng, domain), cfg) for _ in range(n)]


# ---------------------------------------------------------------- files

def write_records(path, records: Iterable[UtteranceRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _parse(line: str, lineno: int, path) -> UtteranceRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:{lineno}: malformed record ({e.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"{path}:{lineno}: record must be an object")
    for key in REQUIRED:
        if key not in obj:
            raise DatasetFormatError(f"{path}:{lineno}: missing field '{key}'")
    try:
        frames = np.array(obj["frames"], dtype=np.float64)
        if frames.size == 0:
            frames = frames.reshape(0, 0)
        if frames.ndim != 2:
            raise ValueError("frames must be a 2-D array")
        return UtteranceRecord(str(obj["utt_id"]), frames, [int(x) for x in obj["src_tokens"]],
                               [int(x) for x in obj["tgt_tokens"]], int(obj["ms_per_frame"]))
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(f"{path}:{lineno}: {e}") from None


def read_records(path) -> list[UtteranceRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(_parse(line, lineno, path))
    return out


def write_text(path, corpus: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for seq in corpus:
            fh.write(" ".join(str(t) for t in seq) + "\n")


def read_text(path) -> list[list[int]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                out.append([int(x) for x in line.split()])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: expected integer tokens") from None
    return [s for s in out if s]


def write_dataset(out_dir, cfg: SynthConfig, splits: dict[str, list[UtteranceRecord]],
                  text: dict[str, list[list[int]]] | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, recs in splits.items():
        write_records(out / f"{name}.jsonl", recs)
    for name, corpus in (text or {}).items():
        write_text(out / f"{name}.txt", corpus)
    meta = {"synth": cfg.to_dict(), "vocab_size": cfg.vocab_size, "feat_dim": cfg.feat_dim,
            "ms_per_frame": cfg.ms_per_frame, "bos": BOS, "eos": EOS}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_meta(data_dir) -> dict:
    meta = json.loads((Path(data_dir) / "meta.json").read_text())
    names = {f.name for f in fields(SynthConfig)}
    meta["synth"] = SynthConfig(**{k: v for k, v in meta["synth"].items() if k in names})
    return meta
