"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as ds
from . import training as tr
from .decoding import DecodeConfig, decode_corpus
from .evaluation import TradeoffPoint, corpus_bleu, sweep
from .model import ModelConfig, Transducer

log = logging.getLogger(__name__)

GRID = (0.0, 1.0, 3.0, 5.0, 7.0)


@dataclass
class Recipe:
    """Training recipe used by every experiment unless overridden."""

    synth: ds.SynthConfig = field(default_factory=ds.SynthConfig)
    model: dict = field(default_factory=dict)          # ModelConfig overrides
    train: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(epochs=30, epsilon_jitter=8.0))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    lm_train: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(epochs=8, batch_size=64))
    adapt: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(epochs=8, batch_size=64, warmup=100))
    n_lm_text: int = 5000
    small_data_epochs: int = 60      # epochs when training on a few hundred utterances

    def new_model(self, seed: int) -> Transducer:
        cfg = ModelConfig(vocab_size=self.synth.vocab_size, feat_dim=self.synth.feat_dim, **self.model)
        return Transducer(cfg, seed=seed)


def bleu(model: Transducer, records, cfg: DecodeConfig, lm: Transducer | None = None,
         offline: bool = False) -> float:
    out = decode_corpus(model, records, cfg, lm, offline=offline)
    return corpus_bleu([o.tokens for o in out], [r.tgt_tokens for r in records])


def _timed(label: str, fn, *a, **kw):
    t = time.time()
    out = fn(*a, **kw)
    log.info("%s: %.1fs", label, time.time() - t)
    return out


# ---------------------------------------------------------------- quality-latency trade-off

def tradeoff(recipe: Recipe, n_utts: int = 2000, seed: int = 0, n_test: int | None = None,
             grid=GRID) -> dict:
    """One model trained once, decoded at every epsilon of ``grid``."""
    synth = replace(recipe.synth, seed=seed)
    splits = ds.generate(synth, n_utts)
    test = splits["test"][:n_test] if n_test else splits["test"]
    model = recipe.new_model(seed)
    _timed("train", tr.train, model, splits["train"], replace(recipe.train, seed=seed))
    offline = bleu(model, test, recipe.decode, offline=True)
    points = _timed("sweep", sweep, model, test, grid, recipe.decode)
    return {"model": model, "offline_bleu": offline, "points": points, "test": test}


def tradeoff_checks(points: list[TradeoffPoint], tol: float = 1.0) -> dict[str, bool]:
    al = [p.al_ms for p in points]
    b = [p.bleu for p in points]
    by_eps = {p.epsilon: p.bleu for p in points}
    checks = {
        "al_strictly_increasing": all(x < y for x, y in zip(al, al[1:])),
        "bleu_non_decreasing_within_tol": all(y >= x - tol for x, y in zip(b, b[1:])),
    }
    if 0.0 in by_eps and 5.0 in by_eps:
        checks["bleu_eps5_ge_eps0"] = by_eps[5.0] >= by_eps[0.0]
    return checks


# ---------------------------------------------------------------- LM pretraining ablation

def pretrained_lm(recipe: Recipe, seed: int = 0, corpus=None) -> Transducer:
    if corpus is None:
        corpus = ds.generate_text(recipe.synth, recipe.n_lm_text, recipe.synth.domain, seed + 101)
    lm = recipe.new_model(seed)
    _timed("pretrain-lm", tr.pretrain_lm, lm, corpus, replace(recipe.lm_train, seed=seed))
    return lm


def pretraining_ablation(recipe: Recipe, n_utts: int = 300, seeds=(0, 1, 2), data_seed: int = 0) -> dict:
    """Test BLEU with and without an LM-initialised (frozen) prediction network."""
    splits = ds.generate(replace(recipe.synth, seed=data_seed), n_utts)
    lm = pretrained_lm(recipe, data_seed)
    rows = []
    models = {}
    for seed in seeds:
        cfg = replace(recipe.train, seed=seed, epochs=recipe.small_data_epochs)
        scratch = recipe.new_model(seed)
        _timed(f"train scratch seed={seed}", tr.train, scratch, splits["train"], cfg)
        init = recipe.new_model(seed)
        tr.init_from_lm(init, lm)
        _timed(f"train pretrained seed={seed}", tr.train, init, splits["train"], cfg)
        init.params.frozen = []
        rows.append({"seed": seed, "scratch": bleu(scratch, splits["test"], recipe.decode),
                     "pretrained": bleu(init, splits["test"], recipe.decode)})
        models[seed] = init
        log.info("seed %d: %s", seed, rows[-1])
    return {"rows": rows, "lm": lm, "models": models, "splits": splits,
            "scratch_mean": float(np.mean([r["scratch"] for r in rows])),
            "pretrained_mean": float(np.mean([r["pretrained"] for r in rows]))}


# ---------------------------------------------------------------- text-only adaptation

def adaptation(recipe: Recipe, models: dict[int, Transducer], lm: Transducer, cross_test,
               n_text: int = 5000, fusion_mu: float = 0.2, text_seed: int = 202) -> dict:
    """Cross-domain BLEU before/after adapting the prediction network, then with shallow fusion.

    The external LM for fusion is ``lm`` fine-tuned on the same cross-domain text.
    """
    corpus = ds.generate_text(recipe.synth, n_text, "skewed-markov", text_seed)
    adapt_cfg = recipe.adapt
    ext = Transducer(lm.cfg, lm.params.copy())
    # the external LM is a standalone LM, so all of it is fine-tuned
    _timed("adapt external LM", tr.adapt_prediction_network, ext, corpus, adapt_cfg, keep_query_path=False)
    fused = replace(recipe.decode, fusion_mu=fusion_mu)
    rows = []
    for seed, model in models.items():
        before = bleu(model, cross_test, recipe.decode)
        adapted = Transducer(model.cfg, model.params.copy())
        adapted.params.frozen = []
        _timed(f"adapt seed={seed}", tr.adapt_prediction_network, adapted, corpus, replace(adapt_cfg, seed=seed))
        rows.append({"seed": seed, "unadapted": before,
                     "adapted": bleu(adapted, cross_test, recipe.decode),
                     "adapted_fusion": bleu(adapted, cross_test, fused, lm=ext)})
        log.info("seed %d: %s", seed, rows[-1])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("unadapted", "adapted", "adapted_fusion")}
    return {"rows": rows, **{f"{k}_mean": v for k, v in mean.items()}}
