"""Network pieces: chunk-masked encoder, causal prediction network, additive joint.

Two forward paths exist for the prediction network. The batched taped path in
:class:`Transducer` is used for training; :class:`PredictorState` and
:func:`predictor_step` / :func:`predictor_full` are a numpy-only inference path
built from row-stable kernels so incremental and full recomputation agree bit
for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator

import numpy as np

from . import tensor as tn
from .tensor import Tensor

NEG_INF = -1e30
BOS = 0
EOS = 1


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 2
    pred_layers: int = 2
    chunk_size: int = 8
    query_layer: int = 0            # 0-based block whose output queries the encoder
    aif_mode: str = "multihead"
    delta: float = 0.05
    alpha_scale: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0 <= self.query_layer < self.pred_layers:
            raise ValueError("query_layer must index a prediction-network layer")
        if self.aif_mode not in ("multihead", "dotproduct"):
            raise ValueError(f"unknown aif_mode {self.aif_mode!r}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams:
    """Ordered name -> Tensor map with prefix-based freezing.

    Names are dotted paths (``encoder.layers.0.attn.wq``); a freeze entry
    ``"pred_net"`` covers every name equal to it or starting with ``"pred_net."``.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = dict(tensors or {})
        self.frozen: list[str] = []

    def add(self, name: str, data: np.ndarray) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name}")
        self._t[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._t if _under(n, prefix)]

    def freeze(self, prefixes: Iterable[str]) -> None:
        for p in prefixes:
            if p and p not in self.frozen:
                self.frozen.append(p)

    def is_frozen(self, name: str) -> bool:
        return any(_under(name, p) for p in self.frozen)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._t.items() if not self.is_frozen(n)]

    def count(self) -> int:
        return sum(t.size for t in self._t.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._t.items()}

    def copy(self) -> "ModelParams":
        out = ModelParams({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self._t.items()})
        out.frozen = list(self.frozen)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, arr in arrays.items():
            if name not in self._t:
                if strict:
                    raise KeyError(f"unknown parameter {name}")
                continue
            if arr.shape != self._t[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self._t[name].shape}")
            self._t[name].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def save(self, path) -> None:
        tn.save_arrays(path, self.arrays())


def _under(name: str, prefix: str) -> bool:
    return not prefix or name == prefix or name.startswith(prefix + ".")


# ---------------------------------------------------------------- helpers

def chunk_mask(T: int, C: int) -> np.ndarray:
    """``mask[t, s]`` is True iff frame ``s`` lies in frame ``t``'s chunk or an earlier one."""
    idx = np.arange(T) // C
    return idx[None, :] <= idx[:, None]


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    ang = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_linear(p: ModelParams, rng, name: str, n_in: int, n_out: int) -> None:
    p.add(f"{name}.w", _uniform(rng, (n_in, n_out), n_in))
    p.add(f"{name}.b", _uniform(rng, (n_out,), n_in))


def _add_ln(p: ModelParams, name: str, d: int) -> None:
    p.add(f"{name}.g", np.ones(d))
    p.add(f"{name}.b", np.zeros(d))


def _add_attn(p: ModelParams, rng, name: str, d: int) -> None:
    for proj in ("q", "k", "v", "o"):
        _add_linear(p, rng, f"{name}.{proj}", d, d)


def _add_block(p: ModelParams, rng, name: str, d: int, ff: int) -> None:
    _add_ln(p, f"{name}.ln1", d)
    _add_attn(p, rng, f"{name}.attn", d)
    _add_ln(p, f"{name}.ln2", d)
    _add_linear(p, rng, f"{name}.ff1", d, ff)
    _add_linear(p, rng, f"{name}.ff2", ff, d)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, V = cfg.d_model, cfg.vocab_size
    p = ModelParams()
    _add_linear(p, rng, "encoder.inp", cfg.feat_dim, d)
    for l in range(cfg.enc_layers):
        _add_block(p, rng, f"encoder.layers.{l}", d, cfg.ff_dim)
    _add_ln(p, "encoder.ln_f", d)
    _add_linear(p, rng, "encoder.out", d, d)

    p.add("pred_net.embed", _uniform(rng, (V, d), d))
    for l in range(cfg.pred_layers):
        _add_block(p, rng, f"pred_net.layers.{l}", d, cfg.ff_dim)
    _add_ln(p, "pred_net.ln_f", d)

    _add_attn(p, rng, "aif.attn", d)
    _add_linear(p, rng, "joint.fc_a", d, V)
    _add_linear(p, rng, "joint.fc_p", d, V)
    _add_linear(p, rng, "ctc.proj", d, V + 1)
    return p


def _lin(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return tn.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _ln(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return tn.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _const(arr: np.ndarray, shape) -> Tensor:
    return Tensor(np.broadcast_to(arr, shape))


def attention(p: ModelParams, name: str, xq: Tensor, xkv: Tensor, keep: np.ndarray,
              n_heads: int) -> Tensor:
    """Batched multi-head attention. ``xq``: [B, Lq, d]; ``xkv``: [B, Lk, d];
    ``keep``: bool broadcastable to [B, Lq, Lk]."""
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads

    def heads(x: Tensor, L: int) -> Tensor:
        return tn.transpose(tn.reshape(x, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q = heads(_lin(p, f"{name}.q", xq), Lq)
    k = heads(_lin(p, f"{name}.k", xkv), Lk)
    v = heads(_lin(p, f"{name}.v", xkv), Lk)
    scores = tn.scale(tn.matmul(q, tn.swap_last(k)), 1.0 / np.sqrt(dh))
    keep4 = np.broadcast_to(np.asarray(keep, dtype=bool), (B, Lq, Lk))[:, None, :, :]
    att = tn.softmax_lastdim(tn.masked_fill(scores, keep4, NEG_INF))
    ctx = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, Lq, d))
    return _lin(p, f"{name}.o", ctx)


def _block(p: ModelParams, name: str, x: Tensor, keep: np.ndarray, n_heads: int) -> Tensor:
    h = _ln(p, f"{name}.ln1", x)
    x = tn.add(x, attention(p, f"{name}.attn", h, h, keep, n_heads))
    h = _ln(p, f"{name}.ln2", x)
    return tn.add(x, _lin(p, f"{name}.ff2", tn.gelu(_lin(p, f"{name}.ff1", h))))


@dataclass
class EncoderOutput:
    E: Tensor
    T: int


class Transducer:
    """Config + parameters with the taped forward pieces used in training."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    # -- encoder
    def encode_batch(self, frames: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        """``frames``: [B, T, feat]; returns E [B, T, d]. Padded frames never act as keys."""
        cfg, p = self.cfg, self.params
        if frames.ndim != 3 or frames.shape[-1] != cfg.feat_dim:
            raise ValueError(f"encoder expects [B, T, {cfg.feat_dim}] frames, got {frames.shape}")
        B, T, _ = frames.shape
        if lengths is None:
            lengths = np.full(B, T)
        keep = chunk_mask(T, cfg.chunk_size)[None] & (np.arange(T)[None, None, :] < np.asarray(lengths)[:, None, None])
        x = tn.add(_lin(p, "encoder.inp", frames), _const(sinusoidal(T, cfg.d_model), (B, T, cfg.d_model)))
        for l in range(cfg.enc_layers):
            x = _block(p, f"encoder.layers.{l}", x, keep, cfg.n_heads)
        # plain linear after the final norm keeps the last channel (the AIF scalar) unconstrained
        return _lin(p, "encoder.out", _ln(p, "encoder.ln_f", x))

    def encode(self, frames) -> EncoderOutput:
        f = frames if isinstance(frames, Tensor) else Tensor(frames)
        if f.ndim != 2:
            raise ValueError(f"encode expects [T, feat] frames, got {f.shape}")
        E = self.encode_batch(tn.reshape(f, (1,) + f.shape))
        return EncoderOutput(tn.reshape(E, E.shape[1:]), f.shape[0])

    # -- prediction network
    def predict_batch(self, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        """``tokens``: int [B, L] starting with BOS. Returns (h_pred, query), both [B, L, d]."""
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        B, L = tokens.shape
        d = cfg.d_model
        x = tn.scale(tn.embedding(p["pred_net.embed"], tokens), np.sqrt(d))
        x = tn.add(x, _const(sinusoidal(L, d), (B, L, d)))
        keep = causal_mask(L)[None]
        q = None
        for l in range(cfg.pred_layers):
            x = _block(p, f"pred_net.layers.{l}", x, keep, cfg.n_heads)
            if l == cfg.query_layer:
                q = x
        return _ln(p, "pred_net.ln_f", x), q

    # -- joint network and CTC branch
    def joint(self, h_aif: Tensor, h_pred: Tensor) -> Tensor:
        if h_aif.shape[-1] != self.cfg.d_model or h_pred.shape[-1] != self.cfg.d_model:
            raise ValueError("joint inputs must have d_model features")
        p = self.params
        return tn.add(_lin(p, "joint.fc_a", h_aif), _lin(p, "joint.fc_p", h_pred))

    def lm_logits(self, h_pred: Tensor) -> Tensor:
        """The joint network's prediction branch doubles as the LM head."""
        return _lin(self.params, "joint.fc_p", h_pred)

    def ctc_log_probs(self, E: Tensor) -> Tensor:
        return tn.log_softmax_lastdim(_lin(self.params, "ctc.proj", E))


def joint_logits(model: Transducer, h_aif, h_pred) -> Tensor:
    a = h_aif if isinstance(h_aif, Tensor) else Tensor(h_aif)
    b = h_pred if isinstance(h_pred, Tensor) else Tensor(h_pred)
    return model.joint(a, b)


# ---------------------------------------------------------------- inference-only prediction network

def _rlin(p: ModelParams, name: str, x: np.ndarray) -> np.ndarray:
    # sum-reduction instead of BLAS so every output row is independent of the batch shape
    return (x[..., :, None] * p[f"{name}.w"].data).sum(axis=-2) + p[f"{name}.b"].data


def _rln(p: ModelParams, name: str, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * p[f"{name}.g"].data + p[f"{name}.b"].data


def _rgelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * x * (1.0 + 0.044715 * (x * x))))


def _rattend(q: np.ndarray, k: np.ndarray, v: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """q: [nq, H, dh]; k, v: [nk, H, dh]; keep: [nq, nk] -> [nq, H, dh]."""
    dh = q.shape[-1]
    s = (q[:, None] * k[None]).sum(-1) / np.sqrt(dh)          # [nq, nk, H]
    s = np.where(keep[:, :, None], s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    denom = np.cumsum(e, axis=1)[:, -1:]                        # sequential; masked zeros add nothing
    w = e / denom
    return (w[..., None] * v[None]).sum(axis=1)


@dataclass(frozen=True)
class PredictorState:
    """Per-layer key/value caches for the tokens consumed so far."""

    keys: tuple
    values: tuple
    length: int


def predictor_start(model: Transducer) -> PredictorState:
    cfg = model.cfg
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    empty = tuple(np.zeros((0, H, dh)) for _ in range(cfg.pred_layers))
    return PredictorState(empty, empty, 0)


def _pred_rows(model: Transducer, tokens: np.ndarray, start: int, past: PredictorState | None):
    cfg, p = model.cfg, model.params
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    n = len(tokens)
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    x = p["pred_net.embed"].data[tokens] * np.sqrt(d) + sinusoidal(start + n, d)[start:]
    keys, values, q = [], [], None
    total = start + n
    keep = np.arange(total)[None, :] <= (start + np.arange(n))[:, None]
    for l in range(cfg.pred_layers):
        name = f"pred_net.layers.{l}"
        h = _rln(p, f"{name}.ln1", x)
        k_new = _rlin(p, f"{name}.attn.k", h).reshape(n, H, dh)
        v_new = _rlin(p, f"{name}.attn.v", h).reshape(n, H, dh)
        k_all = k_new if past is None else np.concatenate([past.keys[l], k_new])
        v_all = v_new if past is None else np.concatenate([past.values[l], v_new])
        qh = _rlin(p, f"{name}.attn.q", h).reshape(n, H, dh)
        ctx = _rattend(qh, k_all, v_all, keep).reshape(n, d)
        x = x + _rlin(p, f"{name}.attn.o", ctx)
        h = _rln(p, f"{name}.ln2", x)
        x = x + _rlin(p, f"{name}.ff2", _rgelu(_rlin(p, f"{name}.ff1", h)))
        keys.append(k_all)
        values.append(v_all)
        if l == cfg.query_layer:
            q = x
    return _rln(p, "pred_net.ln_f", x), q, PredictorState(tuple(keys), tuple(values), total)


def predictor_step(model: Transducer, state: PredictorState, token: int):
    """Consume one token; returns (h_pred [d], query [d], new_state)."""
    h, q, st = _pred_rows(model, np.array([token], dtype=np.int64), state.length, state)
    return h[0], q[0], st


def predictor_full(model: Transducer, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Recompute every position from scratch; rows match :func:`predictor_step` exactly."""
    tokens = np.asarray(tokens, dtype=np.int64)
    h, q, _ = _pred_rows(model, tokens, 0, None)
    return h, q


def predict(model: Transducer, tokens) -> tuple[np.ndarray, np.ndarray, PredictorState]:
    """Run a BOS-led prefix; returns the outputs at its last position and the cache."""
    tokens = np.asarray(tokens, dtype=np.int64)
    h, q, st = _pred_rows(model, tokens, 0, None)
    return h[-1], q[-1], st
