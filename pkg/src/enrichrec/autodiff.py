"""Small reverse-mode autodiff over numpy arrays, plus the kernels the news
encoder is built from.

Graphs are recorded only while a :class:`Tape` is active in the current
thread; outside a tape every op is a plain forward computation, so frozen
models can be evaluated from several threads at once.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (w * w).sum()
    >>> tape.gradient(y, [w])[0]
    array([4.], dtype=float32)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tensor:
    """A numpy array that can take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=DEFAULT_DTYPE):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        # Boolean per-row mask for embedding tables; False rows never move.
        self.trainable_rows = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=None)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Records ops executed inside ``with Tape():`` for one backward pass."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _record(self, node):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)

    def gradient(self, target: Tensor, sources):
        """d(target)/d(source) for every source; zeros for unreached sources."""
        if target.data.size != 1:
            raise ConfigError(f"gradient target must be a scalar, got shape {target.shape}")
        grads = {id(target): np.ones_like(target.data)}
        # Creation order is a topological order, so one reverse sweep visits
        # every node exactly once.
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = np.zeros_like(s.data)
            out.append(np.asarray(g, dtype=s.dtype).reshape(s.shape))
        return out


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _node(data, parents, backward):
    out = Tensor(data, dtype=None)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape._record(out)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return t


# ---------------------------------------------------------------- elementary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands need at least two dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ConfigError("matmul expects operands with ndim >= 2")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, m = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _node(ad @ bd, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    # 64-bit accumulation, rounded back to the input precision.
    out = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=ax), tensors, backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """``table[indices]`` along axis 0; gradient scatters back into the rows."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _node(table.data[idx], (table,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


def masked_softmax(scores: Tensor, mask=None, axis=-1, allow_empty=False) -> Tensor:
    """Softmax over ``axis`` ignoring positions where ``mask`` is False.

    Masked positions get weight exactly 0. Slices with no unmasked position
    raise unless ``allow_empty``, in which case their weights are all zero.
    """
    s = scores.data.astype(np.float64)
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
    any_real = mask.any(axis=axis, keepdims=True)
    if not allow_empty and not any_real.all():
        raise InputError("softmax over a fully masked slice")
    shifted = np.where(mask, s, -np.inf)
    top = np.where(any_real, shifted.max(axis=axis, keepdims=True), 0.0)
    e = np.where(mask, np.exp(np.where(mask, s - top, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.where(any_real, e / np.where(denom > 0, denom, 1.0), 0.0).astype(scores.dtype)

    def backward(g):
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (g - inner),)

    return _node(y, (scores,), backward)


# ---------------------------------------------------------------- kernels


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Gather embedding rows. Row 0 is padding: always zero, never trained."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise InputError(f"embedding index out of range [0, {rows})")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        out[0] = 0
        return (out,)

    return _check_finite(_node(table.data[idx], (table,), backward), "embed_lookup")


def conv1d(seq: Tensor, filters: Tensor, bias: Tensor, window: int) -> Tensor:
    """Same-length 1-D convolution over the second-to-last axis, then ReLU.

    Args:
        seq: (..., T, d_in) inputs.
        filters: (window, d_in, d_out) filter bank.
        bias: (d_out,) bias.
        window: odd filter width; inputs are zero padded by (window-1)/2.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"conv1d window must be odd and positive, got {window}")
    if filters.shape[0] != window or filters.shape[1] != seq.shape[-1]:
        raise ConfigError(f"filter shape {filters.shape} does not fit window {window} / input dim {seq.shape[-1]}")
    x = seq.data
    t_len, d_in = x.shape[-2], x.shape[-1]
    d_out = filters.shape[2]
    pad = (window - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    cols = np.concatenate([xp[..., i : i + t_len, :] for i in range(window)], axis=-1)
    w2 = filters.data.reshape(window * d_in, d_out)
    out = cols @ w2 + bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gw = (cols.reshape(-1, window * d_in).T @ g2).reshape(filters.shape)
        gb = g2.sum(axis=0)
        gcols = g @ w2.T
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(window):
            gxp[..., i : i + t_len, :] += gcols[..., i * d_in : (i + 1) * d_in]
        return gxp[..., pad : pad + t_len, :], gw, gb

    linear = _node(out, (seq, filters, bias), backward)
    return _check_finite(relu(linear), "conv1d")


@dataclass
class AdditiveAttentionParams:
    """Projection (att_dim x in_dim), bias (att_dim) and query (att_dim)."""

    projection: Tensor
    bias: Tensor
    query: Tensor

    def __post_init__(self):
        att, _ = self.projection.shape
        if self.bias.shape != (att,) or self.query.shape != (att,):
            raise ConfigError(
                f"attention params disagree: projection {self.projection.shape}, "
                f"bias {self.bias.shape}, query {self.query.shape}"
            )

    @classmethod
    def create(cls, in_dim, att_dim, rng, dtype=DEFAULT_DTYPE):
        limit = np.sqrt(6.0 / (in_dim + att_dim))
        return cls(
            Tensor(rng.uniform(-limit, limit, (att_dim, in_dim)), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(att_dim), requires_grad=True, dtype=dtype),
            Tensor(rng.uniform(-0.1, 0.1, att_dim), requires_grad=True, dtype=dtype),
        )

    def tensors(self):
        return {"projection": self.projection, "bias": self.bias, "query": self.query}


def additive_attention(seq: Tensor, params: AdditiveAttentionParams, mask=None, allow_empty=False):
    """Query-vector attention pooling over the second-to-last axis.

    Returns ``(weights, pooled)`` with weights of shape (..., n) and pooled of
    shape (..., d). Scores are ``query . tanh(projection @ x_i + bias)``.
    """
    if seq.shape[-1] != params.projection.shape[1]:
        raise ConfigError(f"attention expects input dim {params.projection.shape[1]}, got {seq.shape[-1]}")
    hidden = tanh(matmul(seq, swap_last(params.projection)) + params.bias)
    att = params.query.shape[0]
    scores = reshape(matmul(hidden, reshape(params.query, (att, 1))), seq.shape[:-1])
    weights = masked_softmax(scores, mask, axis=-1, allow_empty=allow_empty)
    n = seq.shape[-2]
    pooled = matmul(reshape(weights, seq.shape[:-2] + (1, n)), seq)
    pooled = reshape(pooled, seq.shape[:-2] + (seq.shape[-1],))
    return _check_finite(weights, "additive_attention"), _check_finite(pooled, "additive_attention")


@dataclass
class SelfAttentionParams:
    query: Tensor
    key: Tensor
    value: Tensor

    @classmethod
    def create(cls, in_dim, out_dim, rng, dtype=DEFAULT_DTYPE):
        limit = np.sqrt(6.0 / (in_dim + out_dim))

        def mat():
            return Tensor(rng.uniform(-limit, limit, (in_dim, out_dim)), requires_grad=True, dtype=dtype)

        return cls(mat(), mat(), mat())

    def tensors(self):
        return {"query": self.query, "key": self.key, "value": self.value}


def self_attention(seq: Tensor, params: SelfAttentionParams, mask=None, heads=4, allow_empty=False) -> Tensor:
    """Multi-head scaled dot-product self-attention, masked keys excluded.

    Output row i is a convex combination of the value projections of the
    unmasked rows; no output projection.
    """
    dim = params.value.shape[1]
    if heads < 1 or dim % heads or params.query.shape[1] != dim or params.key.shape[1] != dim:
        raise ConfigError(f"projection dim {dim} is not divisible into {heads} heads")
    n = seq.shape[-2]
    lead = seq.shape[:-2]
    dh = dim // heads
    nd = len(lead)
    to_heads = tuple(range(nd)) + (nd + 1, nd, nd + 2)

    def split(w):
        return transpose(reshape(matmul(seq, w), lead + (n, heads, dh)), to_heads)

    q, k, v = split(params.query), split(params.key), split(params.value)
    scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(dh))
    key_mask = None
    if mask is not None:
        key_mask = np.asarray(mask, dtype=bool).reshape(lead + (1, 1, n))
    probs = masked_softmax(scores, key_mask, axis=-1, allow_empty=allow_empty)
    out = transpose(matmul(probs, v), to_heads)
    return _check_finite(reshape(out, lead + (n, dim)), "self_attention")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]`` along the last axis.

    A 1-D ``logits`` with an int target gives a scalar; a (B, C) batch with a
    length-B target gives per-example losses of shape (B,).
    """
    z = logits.data.astype(np.float64)
    tgt = np.asarray(target, dtype=np.int64)
    classes = z.shape[-1]
    if tgt.shape != z.shape[:-1]:
        raise InputError(f"target shape {tgt.shape} does not match logits {z.shape}")
    if np.any(tgt < 0) or np.any(tgt >= classes):
        raise InputError(f"target index out of range [0, {classes})")
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    loss = (lse - picked).astype(logits.dtype)
    probs = np.exp(z - lse[..., None])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
    delta = (probs - onehot).astype(logits.dtype)

    def backward(g):
        return (np.asarray(g)[..., None] * delta,)

    return _check_finite(_node(loss, (logits,), backward), "softmax_cross_entropy")


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params, **hyper):
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise InputError("adam_step: params, grads and state disagree in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise InputError(f"adam_step: shape mismatch for {p.name or 'parameter'}: {p.shape} vs {np.shape(g)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        if p.trainable_rows is not None:
            g = g * p.trainable_rows.reshape((-1,) + (1,) * (p.ndim - 1))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype)
    return params, state


def gradient_check(f, params, eps=1e-3, max_coords=None, rng=None) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` is a zero-argument callable that builds a scalar from ``params``.
    Parameters are promoted to float64 for the duration of the check. Rows
    marked non-trainable are skipped. ``max_coords`` samples that many
    coordinates per parameter instead of visiting all of them.
    """
    saved = [p.data for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        with Tape() as tape:
            out = f()
        if out.data.size != 1:
            raise ConfigError(f"gradient_check needs a scalar function, got shape {out.shape}")
        grads = tape.gradient(out, params)
        worst = 0.0
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if p.trainable_rows is not None:
                row_len = flat.size // p.shape[0]
                coords = coords[np.repeat(p.trainable_rows, row_len)]
            if max_coords is not None and coords.size > max_coords:
                coords = np.sort(rng.choice(coords, max_coords, replace=False))
            g_flat = g.reshape(-1)
            for i in coords:
                old = flat[i]
                flat[i] = old + eps
                up = float(f().data.reshape(-1)[0])
                flat[i] = old - eps
                down = float(f().data.reshape(-1)[0])
                flat[i] = old
                fd = (up - down) / (2 * eps)
                ad = float(g_flat[i])
                worst = max(worst, abs(ad - fd) / max(1.0, abs(ad) + abs(fd)))
        return worst
    finally:
        for p, data in zip(params, saved):
            p.data = data
