"""Dense float64 tensors with an explicit reverse-mode tape.

Operations are plain functions. When a :class:`Tape` is active (``with tape:``)
and at least one input is tracked, the op appends a node holding its inputs and a
closure mapping the output gradient to input gradients. ``tape.backward(loss)``
then walks the nodes in reverse and accumulates ``.grad`` on leaf tensors
(those created with ``requires_grad=True``).

Shapes must match exactly; the only broadcast is the trailing-dimension bias
add inside :func:`linear` / :func:`add_bias`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Convenience operators; each maps onto the module-level op of the same meaning.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


class Tape:
    """Append-only record of differentiable ops.

    Usable as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.tape is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append((out, inputs, backward))

    def reset(self) -> None:
        self.nodes = []
        self._used = False

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        if self._used:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        self._used = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None:
                    continue
                if t.requires_grad:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif t.tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Hook for ops defined outside this module (``backward(g) -> grads per input``)."""
    return _make(np.asarray(out_data, dtype=np.float64), tuple(inputs), backward)


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")
    n = b.shape[0]
    return _make(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(0)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation; smooth, so finite-difference checks never hit a kink."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), backward)


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Entries where ``keep`` is False are replaced by ``value`` (no gradient)."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    return _make(np.where(keep, a.data, value), (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])`` with ``w`` shared across leading dims."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {w.shape}")
    k, n = w.shape
    out = x.data @ w.data
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (n,):
            raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(0))

    return _make(out, inputs, backward)


# ---------------------------------------------------------------- normalisation

def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm: gain/bias must match the trailing dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(0), g2.sum(0)

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), (a,), backward)


def embedding(w: Tensor, ids) -> Tensor:
    """Row lookup ``w[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    return getitem(w, ids)


def pick_lastdim(a: Tensor, idx) -> Tensor:
    """``out[...] = a[..., idx[...]]`` (the gather used by cross-entropy)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ValueError(f"pick_lastdim: index shape {idx.shape} vs {a.shape[:-1]}")
    lead = np.indices(idx.shape)
    key = tuple(lead) + (idx,)
    return getitem(a, key)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(ts)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b))


# ---------------------------------------------------------------- gradient checking

def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5,
                   indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of ``f()`` w.r.t. ``t.data`` (perturbed in place)."""
    out = np.zeros_like(t.data)
    idxs = np.ndindex(t.shape) if indices is None else indices
    for idx in idxs:
        old = t.data[idx]
        t.data[idx] = old + h
        fp = f()
        t.data[idx] = old - h
        fm = f()
        t.data[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


# ---------------------------------------------------------------- checkpoints

_MAGIC = "lstransducer-params v1"


def save_arrays(path, arrays: "dict[str, np.ndarray]") -> None:
    """Plain-text header of ``name shape`` lines, then little-endian float64 payload."""
    lines = [_MAGIC, str(len(arrays))]
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"parameter name must be non-empty without whitespace: {name!r}")
        shape = ",".join(str(s) for s in np.shape(arr)) or "scalar"
        lines.append(f"{name} {shape}")
    header = ("\n".join(lines) + "\nend\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> "dict[str, np.ndarray]":
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii").rstrip("\n")
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter file (header {magic!r})")
        count = int(fh.readline())
        specs = []
        for _ in range(count):
            name, shape = fh.readline().decode("ascii").split()
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            specs.append((name, dims))
        if fh.readline() != b"end\n":
            raise ValueError(f"{path}: malformed header")
        out = {}
        for name, dims in specs:
            n = int(np.prod(dims, dtype=np.int64))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated payload at {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(dims)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return out
