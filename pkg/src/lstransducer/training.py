"""Training objective, optimiser loop, LM pretraining and text-only adaptation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .aif import boundaries, extract_batch, frame_weights
from .ctc import ctc_loss_batch, to_ctc_labels
from .model import BOS, EOS, ModelParams, Transducer
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

PRED_NET = "pred_net"
LM_HEAD = "joint.fc_p"


@dataclass
class TrainConfig:
    beta: float = 0.6
    gamma: float = 0.05
    epsilon_train: float = 0.0
    epsilon_jitter: float = 0.0     # per-utterance training epsilon ~ U[epsilon_train, epsilon_train + jitter]
    lr: float = 2e-3
    warmup: int = 300
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    freeze: tuple[str, ...] = ()
    grad_clip: float = 5.0
    adam_b1: float = 0.9
    adam_b2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epsilon_jitter < 0:
            raise ValueError("epsilon_jitter must be >= 0")
        if isinstance(self.freeze, str):
            self.freeze = tuple(p for p in self.freeze.split(",") if p)
        else:
            self.freeze = tuple(self.freeze)


@dataclass
class LossBreakdown:
    total: float
    ce: float
    ctc: float
    qua: float
    L: int


@dataclass
class BatchLoss:
    total: Tensor
    items: list[LossBreakdown]

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(it, key) for it in self.items]))


class TrainingDiverged(RuntimeError):
    pass


def compose(ce: float, ctc: float, qua: float, L: int, beta: float, gamma: float) -> float:
    return beta * ctc + (1.0 - beta) * ce + gamma * qua * L


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    frames: np.ndarray          # [B, T, F] zero padded
    lengths: np.ndarray         # [B]
    targets: list[np.ndarray]   # gold tokens without BOS/EOS

    @property
    def size(self) -> int:
        return len(self.targets)


def collate(records: Sequence) -> Batch:
    lengths = np.array([len(r.frames) for r in records])
    F = np.asarray(records[0].frames).shape[1]
    frames = np.zeros((len(records), lengths.max(), F))
    for b, r in enumerate(records):
        frames[b, : lengths[b]] = r.frames
    return Batch(frames, lengths, [np.asarray(r.tgt_tokens, dtype=np.int64) for r in records])


def _decoder_io(targets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs BOS+y, outputs y+EOS, position weights 1/(L+1)) padded to the longest."""
    n = max(len(y) for y in targets) + 1
    inp = np.full((len(targets), n), EOS, dtype=np.int64)
    out = np.full((len(targets), n), EOS, dtype=np.int64)
    wts = np.zeros((len(targets), n))
    for b, y in enumerate(targets):
        L = len(y)
        inp[b, 0] = BOS
        inp[b, 1 : L + 1] = y
        out[b, :L] = y
        wts[b, : L + 1] = 1.0 / (L + 1)
    return inp, out, wts


def teacher_boundaries(cumsum: np.ndarray, lengths: np.ndarray, n_tokens: int, epsilon) -> np.ndarray:
    """T_i for i = 1..n_tokens per utterance, clipped to each utterance's frame count.

    ``epsilon`` is a scalar or one value per utterance.
    """
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (len(cumsum),))
    out = np.stack([boundaries(c, n_tokens, e) for c, e in zip(cumsum, eps)])
    return np.minimum(out, np.asarray(lengths)[:, None])


def forward_loss(model: Transducer, batch: Batch, cfg: TrainConfig,
                 fixed_bounds: np.ndarray | None = None, epsilon=None) -> BatchLoss:
    """Teacher-forced objective, batch-averaged over per-utterance totals.

    Boundary positions are discrete and carry no gradient; ``fixed_bounds``
    pins them (used by finite-difference checks). ``epsilon`` overrides
    ``cfg.epsilon_train`` (scalar or per utterance).
    """
    if any(len(y) < 1 for y in batch.targets):
        raise ValueError("every target needs at least one token")
    mc = model.cfg
    B = batch.size
    E = model.encode_batch(Tensor(batch.frames), batch.lengths)
    fw = frame_weights(E, mc.delta, mc.alpha_scale)
    valid = (np.arange(E.shape[1])[None, :] < batch.lengths[:, None]).astype(np.float64)

    inp, out, wts = _decoder_io(batch.targets)
    bounds = fixed_bounds
    if bounds is None:
        eps = cfg.epsilon_train if epsilon is None else epsilon
        bounds = teacher_boundaries(fw.cumsum, batch.lengths, inp.shape[1], eps)
    h_pred, query = model.predict_batch(inp)
    h_aif = extract_batch(model, query, E, bounds)
    logp = tn.log_softmax_lastdim(model.joint(h_aif, h_pred))
    nll = tn.scale(tn.pick_lastdim(logp, out), -1.0)
    ce = tn.sum_(tn.mul(nll, Tensor(wts)), axis=1)

    ctc = ctc_loss_batch(model.ctc_log_probs(E), batch.lengths,
                         [to_ctc_labels(y) for y in batch.targets])

    Ls = np.array([len(y) for y in batch.targets], dtype=np.float64)
    mass = tn.sum_(tn.mul(fw.alpha, Tensor(valid)), axis=1)
    qua = tn.abs_(tn.sub(mass, Tensor(Ls)))

    per_utt = tn.add(tn.add(tn.scale(ctc, cfg.beta), tn.scale(ce, 1.0 - cfg.beta)),
                     tn.mul(qua, Tensor(cfg.gamma * Ls)))
    total = tn.mean(per_utt)
    items = [LossBreakdown(float(per_utt.data[b]), float(ce.data[b]), float(ctc.data[b]),
                           float(qua.data[b]), int(Ls[b])) for b in range(B)]
    return BatchLoss(total, items)


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params: ModelParams, lr: float, warmup: int,
                 b1: float = 0.9, b2: float = 0.98, eps: float = 1e-9, grad_clip: float = 0.0):
        self.params = params
        self.peak = lr
        self.warmup = max(1, warmup)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def rate(self, step: int) -> float:
        return self.peak * min(step / self.warmup, math.sqrt(self.warmup / step))

    def step(self) -> float:
        """Apply one update to unfrozen parameters; returns the pre-clip gradient norm."""
        live = [(n, t) for n, t in self.params.trainable() if t.grad is not None]
        norm = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in live))
        if not math.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient norm at step {self.t + 1}")
        clip = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            clip = self.grad_clip / norm
        self.t += 1
        lr = self.rate(self.t)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, t in live:
            g = t.grad * clip
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------- loops

def _batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def evaluate_loss(model: Transducer, records: Sequence, cfg: TrainConfig) -> dict:
    items: list[LossBreakdown] = []
    for idx in _batches(len(records), cfg.batch_size, None):
        items.extend(forward_loss(model, collate([records[i] for i in idx]), cfg).items)
    return _summary(items)


def _summary(items: Sequence[LossBreakdown]) -> dict:
    ce = float(np.mean([it.ce for it in items]))
    return {
        "ce": ce,
        "ctc": float(np.mean([it.ctc for it in items])),
        "qua": float(np.mean([it.qua for it in items])),
        "total": float(np.mean([it.total for it in items])),
        "perplexity": math.exp(min(ce, 700.0)),
    }


def train(model: Transducer, dataset: Sequence, cfg: TrainConfig, dev: Sequence = (),
          on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Adam with inverse-sqrt warmup; parameters under ``cfg.freeze`` never move."""
    if not dataset:
        raise ValueError("training set is empty")
    params = model.params
    params.freeze(cfg.freeze)
    opt = Adam(params, cfg.lr, cfg.warmup, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        items: list[LossBreakdown] = []
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            batch = collate([dataset[i] for i in idx])
            eps = None
            if cfg.epsilon_jitter:
                eps = cfg.epsilon_train + cfg.epsilon_jitter * rng.random(len(idx))
            params.zero_grad()
            tape = Tape()
            with tape:
                loss = forward_loss(model, batch, cfg, epsilon=eps)
            if not math.isfinite(loss.total.item()):
                raise TrainingDiverged(
                    f"epoch {epoch}: loss {loss.total.item()} "
                    f"(ce={loss.mean('ce')}, ctc={loss.mean('ctc')}, qua={loss.mean('qua')})")
            tape.backward(loss.total)
            opt.step()
            items.extend(loss.items)
        rows = [{"epoch": epoch, "split": "train", **_summary(items)}]
        if dev:
            rows.append({"epoch": epoch, "split": "dev", **evaluate_loss(model, dev, cfg)})
        for row in rows:
            log.info("epoch %d %s total=%.4f ce=%.4f ctc=%.4f qua=%.4f", row["epoch"], row["split"],
                     row["total"], row["ce"], row["ctc"], row["qua"])
            if on_epoch:
                on_epoch(row)
        history.extend(rows)
    params.zero_grad()
    return history


# ---------------------------------------------------------------- language-model training

def lm_loss(model: Transducer, sequences: Sequence[np.ndarray]) -> tuple[Tensor, float, int]:
    """Summed next-token NLL through the prediction network and its LM head."""
    inp, out, wts = _decoder_io(sequences)
    h_pred, _ = model.predict_batch(inp)
    logp = tn.log_softmax_lastdim(model.lm_logits(h_pred))
    mask = (wts > 0).astype(np.float64)
    nll = tn.sum_(tn.mul(tn.scale(tn.pick_lastdim(logp, out), -1.0), Tensor(mask)))
    return nll, float(nll.item()), int(mask.sum())


def lm_perplexity(model: Transducer, corpus: Sequence, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    for i in range(0, len(seqs), batch_size):
        _, nll, n = lm_loss(model, seqs[i : i + batch_size])
        total += nll
        count += n
    return math.exp(total / count)


def query_path(model: Transducer) -> list[str]:
    """Prediction-network prefixes that feed the encoder query."""
    return [f"{PRED_NET}.embed"] + [f"{PRED_NET}.layers.{l}" for l in range(model.cfg.query_layer + 1)]


def _train_lm(model: Transducer, corpus: Sequence, cfg: TrainConfig, heldout: Sequence,
              on_epoch: Callable[[dict], None] | None, pinned: Sequence[str] = ()) -> list[dict]:
    if not corpus:
        raise ValueError("text corpus is empty")
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    params = model.params
    saved_frozen = list(params.frozen)
    # only the prediction network and its head move; everything else is pinned for this run
    params.frozen = [n for n in params.names() if not (n.startswith(PRED_NET + ".") or n.startswith(LM_HEAD + "."))]
    params.frozen += list(cfg.freeze) + list(pinned)
    try:
        opt = Adam(params, cfg.lr, cfg.warmup, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.grad_clip)
        rng = np.random.default_rng(cfg.seed)
        history = []
        for epoch in range(1, cfg.epochs + 1):
            total, count = 0.0, 0
            for idx in _batches(len(seqs), cfg.batch_size, rng):
                params.zero_grad()
                tape = Tape()
                with tape:
                    nll, value, n = lm_loss(model, [seqs[i] for i in idx])
                    loss = tn.scale(nll, 1.0 / n)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"LM epoch {epoch}: non-finite loss")
                tape.backward(loss)
                opt.step()
                total += value
                count += n
            rows = [{"epoch": epoch, "split": "train", "ce": total / count,
                     "perplexity": math.exp(total / count)}]
            if heldout:
                ppl = lm_perplexity(model, heldout)
                rows.append({"epoch": epoch, "split": "dev", "ce": math.log(ppl), "perplexity": ppl})
            for row in rows:
                if on_epoch:
                    on_epoch(row)
            history.extend(rows)
    finally:
        params.frozen = saved_frozen
        params.zero_grad()
    return history


def pretrain_lm(model: Transducer, text_corpus: Sequence, cfg: TrainConfig, heldout: Sequence = (),
                on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Next-token training of the prediction network with ``joint.fc_p`` as tied head."""
    return _train_lm(model, text_corpus, cfg, heldout, on_epoch)


def adapt_prediction_network(model: Transducer, text_corpus: Sequence, cfg: TrainConfig,
                             heldout: Sequence = (), on_epoch: Callable[[dict], None] | None = None,
                             keep_query_path: bool = True) -> list[dict]:
    """Fine-tune the prediction network (and LM head) of a trained model on new-domain text.

    With ``keep_query_path`` the embedding and the blocks up to the query layer stay
    fixed, so the encoder attention keeps seeing the queries it was trained with.
    """
    pinned = query_path(model) if keep_query_path else ()
    return _train_lm(model, text_corpus, cfg, heldout, on_epoch, pinned)


def init_from_lm(model: Transducer, lm: Transducer, freeze_pred_net: bool = True) -> None:
    """Copy prediction-network and LM-head weights; optionally freeze both, keeping the LM intact."""
    for name in lm.params.names(PRED_NET) + lm.params.names(LM_HEAD):
        model.params[name].data = lm.params[name].data.copy()
    if freeze_pred_net:
        model.params.freeze([PRED_NET, LM_HEAD])


# ---------------------------------------------------------------- gradient check

def gradcheck(model: Transducer, batch: Batch, cfg: TrainConfig, h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences of the
    full objective, over every parameter entry (or a random sample of ``max_entries``)."""
    base = forward_loss(model, batch, cfg)
    mc = model.cfg
    E = model.encode_batch(Tensor(batch.frames), batch.lengths)
    fw = frame_weights(E, mc.delta, mc.alpha_scale)
    n_tok = max(len(y) for y in batch.targets) + 1
    bounds = teacher_boundaries(fw.cumsum, batch.lengths, n_tok, cfg.epsilon_train)

    params = model.params
    params.zero_grad()
    tape = Tape()
    with tape:
        loss = forward_loss(model, batch, cfg, fixed_bounds=bounds)
    assert loss.total.item() == base.total.item()
    tape.backward(loss.total)

    def f() -> float:
        return forward_loss(model, batch, cfg, fixed_bounds=bounds).total.item()

    entries = [(n, idx) for n, t in params.items() for idx in np.ndindex(t.shape)]
    if max_entries is not None and len(entries) > max_entries:
        pick = np.random.default_rng(seed).choice(len(entries), max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]
    analytic, numeric = [], []
    for name, idx in entries:
        t = params[name]
        numeric.append(tn.numerical_grad(f, t, h, [idx])[idx])
        analytic.append(0.0 if t.grad is None else t.grad[idx])
    params.zero_grad()
    return tn.max_relative_error(np.array(analytic), np.array(numeric))


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = ",".join(v)
    return d
