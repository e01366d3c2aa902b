"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records primitive applications while it is active (``with
Tape() as tape:``); ``backward(tape, loss)`` replays the records in
reverse and returns a gradient map keyed by node id. Tensors are
immutable once created; gradients accumulate additively at fan-out.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_node_ids = itertools.count()
_TAPE_STACK: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class TapeError(RuntimeError):
    """Raised on invalid tape use (double backward, off-tape loss)."""


class Tensor:
    """Immutable dense array of 64-bit floats, optionally grad-tracked."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._entries = []  # (output id, input ids, backward closure)
        self._tracked = set()
        self._leaves = {}  # node id -> Tensor, for requires_grad inputs
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watch(self, t: Tensor):
        """Register a tensor so it appears in the gradient map even if unused."""
        if t.requires_grad:
            self._leaves.setdefault(t.node_id, t)
            self._tracked.add(t.node_id)

    def records(self, t: Tensor) -> bool:
        return t.node_id in self._tracked


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return
    if not any(t.requires_grad or t.node_id in tape._tracked for t in inputs):
        return
    for t in inputs:
        if t.requires_grad:
            tape._leaves.setdefault(t.node_id, t)
    tape._tracked.add(out.node_id)
    tape._entries.append((out.node_id, tuple(t.node_id for t in inputs), backward_fn))


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of a scalar loss wrt every requires_grad node on the tape.

    Returns ``{node_id: Tensor}``; nodes registered via ``watch`` that did
    not influence the loss map to zero tensors. A tape can be consumed by
    backward exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.node_id not in tape._tracked:
        raise TapeError("loss was not recorded on this tape")
    tape._consumed = True

    grads = {loss.node_id: np.ones_like(loss.data)}
    for out_id, in_ids, backward_fn in reversed(tape._entries):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, gin in zip(in_ids, backward_fn(g)):
            if gin is None:
                continue
            acc = grads.get(nid)
            grads[nid] = gin if acc is None else acc + gin

    return {
        nid: Tensor(grads[nid]) if nid in grads else Tensor(np.zeros_like(t.data))
        for nid, t in tape._leaves.items()
    }


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    _record(out, (a, b), bw)
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy())
    _record(out, (x,), lambda g: (g.T,))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports matrix + row-vector broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)
        _record(out, (a, b), lambda g: (g, g))
        return out
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = Tensor(a.data + b.data)
        _record(out, (a, b), lambda g: (g, g.sum(axis=0)))
        return out
    raise ShapeError(f"add shapes do not conform: {a.data.shape} + {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes do not conform: {a.data.shape} - {b.data.shape}")
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes do not conform: {a.data.shape} * {b.data.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (not grad-tracked)."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply an array by a scalar tensor; differentiable in both."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.data.size != 1:
        raise ShapeError(f"scale_by needs a scalar multiplier, got shape {s.data.shape}")
    out = Tensor(x.data * s.data)
    xd, sd = x.data, s.data

    def bw(g):
        return g * sd, np.asarray((g * xd).sum())

    _record(out, (x, s), bw)
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_K * (xd + _GELU_C * (x2 * xd)))
    out = Tensor(0.5 * xd * (1.0 + t))

    def bw(g):
        d = 0.5 * (1.0 + t) + (0.5 * _GELU_K) * xd * (1.0 - t * t) * (1.0 + (3.0 * _GELU_C) * x2)
        return (g * d,)

    _record(out, (x,), bw)
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm needs a matrix, got shape {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def bw(g):
        ggain = (g * xhat).sum(axis=0)
        gbias = g.sum(axis=0)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, ggain, gbias

    _record(out, (x, gain, bias), bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ShapeError(f"softmax on empty axis {axis} of shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (x,), bw)
    return out


def logsumexp(x: Tensor, axis=None) -> Tensor:
    """Shift-stable log-sum-exp over one axis (or all elements)."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("logsumexp of an empty tensor")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = np.squeeze(m + np.log(s), axis=axis) if axis is not None else np.asarray((m + np.log(s)).reshape(()))
    out = Tensor(val)
    soft = e / s

    def bw(g):
        if axis is None:
            return (soft * g,)
        return (soft * np.expand_dims(g, axis),)

    _record(out, (x,), bw)
    return out


def mean_over_axis(x: Tensor, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.data.shape[axis] == 0:
        raise ShapeError(f"mean_over_axis on empty axis {axis} of shape {x.data.shape}")
    n = x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))
    shape = x.data.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    _record(out, (x,), bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()))
    shape = x.data.shape
    _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean()))
    shape = x.data.shape
    _record(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))
    return out


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {u.data.shape} and {v.data.shape}")
    nu = np.linalg.norm(u.data)
    nv = np.linalg.norm(v.data)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    c = float(u.data @ v.data / (nu * nv))
    out = Tensor(np.asarray(c))
    ud, vd = u.data, v.data

    def bw(g):
        gu = g * (vd / (nu * nv) - c * ud / (nu * nu))
        gv = g * (ud / (nu * nv) - c * vd / (nv * nv))
        return gu, gv

    _record(out, (u, v), bw)
    return out


def dropout(x: Tensor, keep_prob: float, rng=None, mask=None) -> Tensor:
    """Inverted dropout: zero with prob 1-keep, scale survivors by 1/keep.

    Train-time only; callers skip the op in eval mode. A fixed mask can be
    supplied instead of an RNG stream (used by the gradient-check oracle).
    """
    x = _as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    if mask is None:
        if rng is None:
            raise ValueError("dropout needs an RNG stream or an explicit mask")
        mask = rng.random(x.data.shape) < keep_prob
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match input {x.data.shape}")
    factor = mask / keep_prob
    out = Tensor(x.data * factor)
    _record(out, (x,), lambda g: (g * factor,))
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding_lookup needs a matrix table and id vector, got {table.data.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"id out of range for table with {table.data.shape[0]} rows")
    out = Tensor(table.data[ids])
    tshape = table.data.shape

    def bw(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), bw)
    return out


def substitute_rows(x: Tensor, row_mask, emb: Tensor) -> Tensor:
    """Replace masked rows of a matrix with a learned embedding vector."""
    x, emb = _as_tensor(x), _as_tensor(emb)
    row_mask = np.asarray(row_mask, dtype=bool)
    if x.data.ndim != 2 or row_mask.shape != (x.data.shape[0],) or emb.data.shape != (x.data.shape[1],):
        raise ShapeError(
            f"substitute_rows shapes do not conform: x {x.data.shape}, mask {row_mask.shape}, emb {emb.data.shape}"
        )
    out_data = x.data.copy()
    out_data[row_mask] = emb.data
    out = Tensor(out_data)
    keep = ~row_mask

    def bw(g):
        return g * keep[:, None], g[row_mask].sum(axis=0)

    _record(out, (x, emb), bw)
    return out


def take_rows(x: Tensor, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"take_rows needs a matrix and index vector, got {x.data.shape} and {idx.shape}")
    out = Tensor(x.data[idx])
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    _record(out, (x,), bw)
    return out


def take_scalar(x: Tensor, i: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"take_scalar needs a vector, got shape {x.data.shape}")
    i = int(i)
    out = Tensor(np.asarray(x.data[i]))
    n = x.data.shape[0]

    def bw(g):
        gx = np.zeros(n)
        gx[i] = g
        return (gx,)

    _record(out, (x,), bw)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.data.shape}")
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    _record(out, (x,), bw)
    return out


def concat_cols(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols needs a non-empty list of matrices")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols row counts differ: {[p.data.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.data.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

    _record(out, tuple(parts), bw)
    return out


def stack_scalars(parts) -> Tensor:
    """Pack scalar tensors into a 1-D vector."""
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.data.size != 1 for p in parts):
        raise ShapeError("stack_scalars needs a non-empty list of scalars")
    out = Tensor(np.array([float(p.data) for p in parts]))

    def bw(g):
        return tuple(np.asarray(g[i]) for i in range(len(parts)))

    _record(out, tuple(parts), bw)
    return out


def strided_conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """1-D convolution with kernel size == stride (non-overlapping windows).

    x is (L, C_in), w is (stride*C_in, C_out), b is (C_out,). Trailing
    samples that do not fill a window are dropped (floor arithmetic).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    stride = int(stride)
    if stride < 1 or x.data.ndim != 2:
        raise ShapeError(f"strided_conv1d needs (L, C_in) input and stride >= 1, got {x.data.shape}, stride {stride}")
    L, cin = x.data.shape
    n = L // stride
    if n < 1:
        raise ShapeError(f"input length {L} shorter than conv window {stride}")
    if w.data.shape != (stride * cin, w.data.shape[1]) or b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"strided_conv1d weight/bias shapes {w.data.shape}/{b.data.shape} invalid for stride {stride}, C_in {cin}")
    windows = x.data[: n * stride].reshape(n, stride * cin)
    out = Tensor(windows @ w.data + b.data)
    wd = w.data

    def bw(g):
        gw = windows.T @ g
        gb = g.sum(axis=0)
        gx = np.zeros((L, cin))
        gx[: n * stride] = (g @ wd.T).reshape(n * stride, cin)
        return gx, gw, gb

    _record(out, (x, w, b), bw)
    return out


def multi_head_attention(h: Tensor, wqkv: Tensor, bqkv: Tensor, n_heads: int,
                         keep_prob: float = 1.0, rng=None) -> Tensor:
    """Fused self-attention block: packed Q/K/V projection, per-head scaled
    dot-product softmax, optional dropout on the attention probabilities.

    h is (m, d); wqkv is (d, 3d) packing the query/key/value projections
    column-wise; bqkv is (3d,). Returns the concatenated head contexts
    (m, d); the output projection stays a separate matmul. Recorded as a
    single tape entry with a hand-derived adjoint.
    """
    h, wqkv, bqkv = _as_tensor(h), _as_tensor(wqkv), _as_tensor(bqkv)
    if h.data.ndim != 2:
        raise ShapeError(f"attention input must be (m, d), got {h.data.shape}")
    m, d = h.data.shape
    if wqkv.data.shape != (d, 3 * d) or bqkv.data.shape != (3 * d,):
        raise ShapeError(f"packed projection must be ({d}, {3 * d})/({3 * d},), got {wqkv.data.shape}/{bqkv.data.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)

    qkv = h.data @ wqkv.data
    qkv += bqkv.data

    def split(x):  # (m, d) -> (heads, m, dh)
        return np.ascontiguousarray(x.reshape(m, n_heads, dh).transpose(1, 0, 2))

    qh, kh, vh = split(qkv[:, :d]), split(qkv[:, d:2 * d]), split(qkv[:, 2 * d:])
    scores = qh @ kh.transpose(0, 2, 1)
    scores *= inv
    scores -= scores.max(axis=2, keepdims=True)
    probs = np.exp(scores, out=scores)
    probs /= probs.sum(axis=2, keepdims=True)
    if keep_prob < 1.0:
        if rng is None:
            raise ValueError("attention dropout needs an RNG stream")
        factor = (rng.random(probs.shape) < keep_prob) / keep_prob
        dropped = probs * factor
    else:
        factor = None
        dropped = probs
    ctx = dropped @ vh
    out = Tensor(ctx.transpose(1, 0, 2).reshape(m, d))
    hd, wd = h.data, wqkv.data

    def bw(g):
        gc = np.ascontiguousarray(g.reshape(m, n_heads, dh).transpose(1, 0, 2))
        gv = dropped.transpose(0, 2, 1) @ gc
        gp = gc @ vh.transpose(0, 2, 1)
        if factor is not None:
            gp *= factor
        gs = probs * (gp - (gp * probs).sum(axis=2, keepdims=True))
        gs *= inv
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        gqkv = np.empty((m, 3 * d))
        for block, grad in ((0, gq), (1, gk), (2, gv)):
            gqkv[:, block * d:(block + 1) * d] = grad.transpose(1, 0, 2).reshape(m, d)
        return gqkv @ wd.T, hd.T @ gqkv, gqkv.sum(axis=0)

    _record(out, (h, wqkv, bqkv), bw)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy needs (n, C) logits and (n,) targets, got {logits.data.shape} and {targets.shape}")
    n, ncls = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= ncls):
        raise IndexError(f"target class out of range for {ncls} classes")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s)).ravel()
    out = Tensor(np.asarray((lse - logits.data[np.arange(n), targets]).mean()))
    soft = e / s

    def bw(g):
        gl = soft.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    _record(out, (logits,), bw)
    return out


# ---------------------------------------------------------------------------
# gradient-check oracle


def finite_difference_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = _as_tensor(x)
    flat = x.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = _eval_scalar(f, bumped.reshape(x.data.shape))
        bumped[i] = flat[i] - h
        fm = _eval_scalar(f, bumped.reshape(x.data.shape))
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.data.shape))


def _eval_scalar(f, arr):
    val = f(Tensor(arr))
    val = val.item() if isinstance(val, Tensor) else float(val)
    if not math.isfinite(val):
        raise ValueError("function evaluated to a non-finite value during finite differencing")
    return val
