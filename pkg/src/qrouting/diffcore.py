"""Small numpy tensor library with reverse-mode gradients.

Only what the Q-network needs: dense float64 arrays, limited broadcasting,
batched matmul, attention, batch norm and a handful of elementwise ops. The
tape is implicit: every op output keeps references to its parents and a
closure mapping the output gradient to parent gradients.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64
MASK_SENTINEL = -1e9

_grad_enabled = True
_relu_log: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, target computation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _relu_log is not None:
        _relu_log.append(np.packbits(pos).tobytes())
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    ax = np.abs(x.data)
    small = ax <= delta
    out = np.where(small, 0.5 * x.data**2, delta * (ax - 0.5 * delta))
    return _make(out, (x,), lambda g: (g * np.where(small, x.data, delta * np.sign(x.data)),))


def masked_fill(x: Tensor, fill: np.ndarray, value: float) -> Tensor:
    """Set entries where ``fill`` is True to ``value``; they get zero gradient."""
    fill = np.asarray(fill, dtype=bool)
    return _make(np.where(fill, value, x.data), (x,), lambda g: (np.where(fill, 0.0, g),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# --- shape ops ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def back(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def mean_over_nodes(x: Tensor) -> Tensor:
    """Mean over the node axis of ``(..., nodes, features)``."""
    return tmean(x, axis=-2)


# --- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


# --- softmax / attention -------------------------------------------------------


def _softmax_backward(s: np.ndarray, axis: int):
    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return back


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s /= s.sum(axis=axis, keepdims=True)
    return _make(s, (x,), _softmax_backward(s, axis))


def masked_softmax(logits: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is True; the rest are exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has no unmasked entry")
    z = np.where(mask, logits.data, MASK_SENTINEL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (logits,), _softmax_backward(s, axis))


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, n_heads: int,
                         params: Mapping[str, Tensor], attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q_in`` is ``(B, Nq, dq)``, ``k_in``/``v_in`` are ``(B, Nk, d)``; ``params``
    holds ``Wq (dq, h)``, ``Wk (d, h)``, ``Wv (d, h)`` and ``Wo (h, h)``.
    ``attn_mask`` (broadcastable to ``(B, Nq, Nk)``) marks keys a query may see.
    """
    Wq, Wk, Wv, Wo = params["Wq"], params["Wk"], params["Wv"], params["Wo"]
    h = Wq.shape[1]
    if h % n_heads:
        raise ShapeError(f"model dim {h} is not divisible by {n_heads} heads")
    dk = h // n_heads
    B, Nq, Nk = q_in.shape[0], q_in.shape[1], k_in.shape[1]

    def split(t, n):
        return transpose(reshape(t, (B, n, n_heads, dk)), (0, 2, 1, 3))

    q = split(linear(q_in, Wq), Nq)
    k = split(linear(k_in, Wk), Nk)
    v = split(linear(v_in, Wv), Nk)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if attn_mask is None:
        attn = softmax(scores, axis=-1)
    else:
        m = np.broadcast_to(np.asarray(attn_mask, dtype=bool)[:, None], scores.shape)
        attn = masked_softmax(scores, m, axis=-1)
    heads = matmul(attn, v)
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (B, Nq, h))
    return linear(merged, Wo)


# --- batch norm ----------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool, stats: RunningStats,
               eps: float = BN_EPS) -> Tensor:
    """Normalize each channel (last axis) over all leading axes (batch x nodes)."""
    C = x.shape[-1]
    flat_axes = tuple(range(x.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean) * inv
        out = gamma.data * xhat + beta.data

        def back_eval(g):
            gg = _unbroadcast(g * xhat, gamma.shape)
            gb = _unbroadcast(g, beta.shape)
            return (g * gamma.data * inv, gg, gb)

        return _make(out, (x, gamma, beta), back_eval)

    if x.shape[0] < 2:
        raise ValueError("batch_norm: training mode needs a batch of at least 2")
    count = x.data.size // C
    mu = x.data.mean(axis=flat_axes)
    var = x.data.var(axis=flat_axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    mom = stats.momentum
    stats.mean = (1 - mom) * stats.mean + mom * mu
    stats.var = (1 - mom) * stats.var + mom * var * count / max(count - 1, 1)

    def back(g):
        gxhat = g * gamma.data
        gx = inv / count * (
            count * gxhat
            - gxhat.sum(axis=flat_axes)
            - xhat * (gxhat * xhat).sum(axis=flat_axes)
        )
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _make(out, (x, gamma, beta), back)


# --- parameters, optimizer -------------------------------------------------------


class ParamStore(dict):
    """Ordered mapping ``path -> Tensor``; every entry is trainable."""

    def __setitem__(self, name: str, value):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        super().__setitem__(name, t)

    def zero_grads(self):
        for t in self.values():
            t.grad = None

    def sub(self, prefix: str) -> Dict[str, Tensor]:
        """Entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy_from(self, other: "ParamStore"):
        if list(self) != list(other) or any(self[k].shape != other[k].shape for k in self):
            raise ShapeError("parameter stores do not match")
        for k, t in other.items():
            self[k].data = t.data.copy()

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy())
        return out

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.values())


def zero_grads(store: ParamStore):
    store.zero_grads()


def grad_norm(store: ParamStore) -> float:
    return math.sqrt(sum(float((t.grad**2).sum()) for t in store.values() if t.grad is not None))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``."""
    norm = grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in store.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in store.items()},
                   {k: np.zeros_like(p.data) for k, p in store.items()})


def adam_step(store: ParamStore, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              grads: Optional[Mapping[str, np.ndarray]] = None):
    """One bias-corrected Adam update; gradients default to each tensor's ``.grad``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in store.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --- gradient check -----------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int

    def __float__(self):
        return self.max_rel_error


def _relu_pattern(f) -> Tuple[float, list]:
    global _relu_log
    _relu_log = []
    try:
        value = f().item()
        return value, _relu_log
    finally:
        _relu_log = None


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
               max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-7) -> GradCheckResult:
    """Compare backprop gradients with central differences ``(f(p+eps)-f(p-eps))/(2 eps)``.

    ``f`` rebuilds the scalar loss from the current parameter values. With
    ``max_entries`` only that many randomly chosen entries per tensor are probed.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. A probe whose
    perturbation flips any ReLU activation straddles a kink, where the
    difference quotient is not a derivative estimate; such probes are counted in
    ``skipped_kinks`` instead of being compared.
    """
    for p in params.values():
        p.grad = None
    f().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        _, base = _relu_pattern(f)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp, pat_p = _relu_pattern(f)
                flat[i] = orig - eps
                fm, pat_m = _relu_pattern(f)
                flat[i] = orig
                if pat_p != base or pat_m != base:
                    skipped += 1
                    continue
                num = (fp - fm) / (2 * eps)
                a = analytic[name].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
                checked += 1
    return GradCheckResult(worst, checked, skipped)


# --- checkpoint container -----------------------------------------------------------

CKPT_MAGIC = b"QRCKPT\x00\x01"
CKPT_VERSION = 1


def save_checkpoint(path, sections: Mapping[str, Mapping[str, np.ndarray]], meta: Optional[dict] = None):
    """Write ``{section: {name: array}}`` as float64 little-endian blobs.

    Layout: 8-byte magic, u32 version, u32 header length, UTF-8 JSON header,
    then the concatenated arrays. The header lists every entry's section,
    name, shape and byte offset into the data block.
    """
    entries, blobs, offset = [], [], 0
    for section, arrays in sections.items():
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")
            entries.append({"section": section, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Tuple[Dict[str, Dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    data = raw[16 + hlen:]
    sections: Dict[str, Dict[str, np.ndarray]] = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        sections.setdefault(e["section"], {})[e["name"]] = arr.astype(np.float64)
    return sections, header["meta"]
