"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy buffers and remember the operation that produced them.
``backward`` walks the recorded graph exactly once, in reverse creation
order, accumulating gradients into every tensor that requires them. Only
the primitives the sequence model actually needs are provided; each one is
covered by a central finite-difference check (``finite_difference_check``).
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, ParameterError

_graph_ids = itertools.count()


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer.

    ``graph_id`` is a monotonically increasing creation index. Since every
    operation is recorded after its inputs, descending ``graph_id`` is a
    valid reverse-topological order for backpropagation.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph_id", "op",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.graph_id = next(_graph_ids)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Leaf tensor sharing this buffer; gradients do not flow through."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self, axes=None):
        return mean_over_axes(self, axes)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _node(data, parents, op, backward_fn):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    The graph may be traversed only once: calling backward again over nodes
    that already propagated raises instead of silently double-accumulating.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise ContractError(
                "graph already backpropagated; rebuild the forward pass before "
                "calling backward again")
        nodes.append(node)
        if node.requires_grad:
            stack.extend(node._parents)
    nodes.sort(key=lambda n: n.graph_id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is None:
            continue
        node._consumed = True
        if node.grad is None:  # no downstream contribution reached this node
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _node(data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(data, (a, b), "mul", bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bwd(g):
        _accumulate(a, g * factor)
    return _node(a.data * factor, (a,), "scale", bwd)


def shift(a: Tensor, offset: float) -> Tensor:
    offset = float(offset)

    def bwd(g):
        _accumulate(a, g)
    return _node(a.data + offset, (a,), "shift", bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0.0))
    return _node(data, (a,), "relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))
    return _node(out, (a,), "sigmoid", bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)
    return _node(data, (a,), "exp", bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, g * np.sign(a.data))
    return _node(np.abs(a.data), (a,), "abs", bwd)


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """min(a, cap); gradient flows only where a <= cap."""
    cap = float(cap)
    data = np.minimum(a.data, cap)

    def bwd(g):
        _accumulate(a, g * (a.data <= cap))
    return _node(data, (a,), "clamp_max", bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _node(data, (a, b), "matmul", bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")

    def bwd(g):
        _accumulate(a, g.T)
    return _node(a.data.T.copy(), (a,), "transpose", bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), "reshape", bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g)))
    return _node(a.data.sum(), (a,), "sum", bwd)


def mean_over_axes(a: Tensor, axes=None) -> Tensor:
    """Mean over ``axes`` (all axes when None), dividing by the element count."""
    if axes is None:
        axes = tuple(range(a.data.ndim))
    else:
        axes = tuple(int(ax) for ax in axes)
    if a.data.size == 0 or any(a.shape[ax] == 0 for ax in axes):
        raise ParameterError("mean over an empty axis")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.mean(axis=axes)

    def bwd(g):
        g_full = np.expand_dims(g, axes) if axes else g
        _accumulate(a, np.broadcast_to(g_full / count, a.shape).copy())
    return _node(data, (a,), "mean", bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a (rows x classes) tensor, max-stabilized."""
    if a.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a 2-D tensor, got {a.shape}")
    x = a.data
    m = x.max(axis=1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    out = s - lse

    def bwd(g):
        soft = np.exp(out)
        _accumulate(a, g - soft * g.sum(axis=1, keepdims=True))
    return _node(out, (a,), "log_softmax", bwd)


# ---------------------------------------------------------------------------
# indexing and assembly

def select_class_per_frame(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Pick logp[t, labels[t]] for every frame t. Labels must lie in [0, C)."""
    if logp.data.ndim != 2:
        raise DimensionError(f"expected (T, C) log-probs, got {logp.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logp.shape[0]:
        raise DataError(f"labels shape {labels.shape} does not match {logp.shape[0]} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= logp.shape[1]):
        raise DataError(f"label out of range [0, {logp.shape[1]})")
    idx = labels.astype(np.intp)
    rows = np.arange(logp.shape[0])
    data = logp.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(logp.data)
        full[rows, idx] = g
        _accumulate(logp, full)
    return _node(data, (logp,), "select_class", bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ParameterError("take_rows needs a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ParameterError(f"row index out of range [0, {a.shape[0]})")
    data = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)
    return _node(data, (a,), "take_rows", bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ParameterError(f"slice [{start}, {stop}) invalid for {a.shape[0]} rows")
    data = a.data[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)
    return _node(data, (a,), "slice_rows", bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other axes must agree."""
    if not parts:
        raise ParameterError("concat_last needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading dims differ ({p.shape} vs {parts[0].shape})")
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., off:off + w])
            off += w
    return _node(data, tuple(parts), "concat", bwd)


def temporal_window(v: Tensor, behind: int, ahead: int) -> Tensor:
    """Stack shifted copies of a (T, d) sequence into (T, d, behind+1+ahead).

    out[t, :, j] = v[t - behind + j], with frames outside [0, T) as zero
    columns.
    """
    if v.data.ndim != 2:
        raise DimensionError(f"temporal_window needs (T, d), got {v.shape}")
    if behind < 0 or ahead < 0:
        raise ParameterError("window offsets must be non-negative")
    t_len, dim = v.shape
    width = behind + 1 + ahead
    padded = np.zeros((t_len + width - 1, dim))
    padded[behind:behind + t_len] = v.data
    data = np.stack([padded[j:j + t_len] for j in range(width)], axis=2)

    def bwd(g):
        gp = np.zeros_like(padded)
        for j in range(width):
            gp[j:j + t_len] += g[:, :, j]
        _accumulate(v, gp[behind:behind + t_len])
    return _node(data, (v,), "temporal_window", bwd)


def select_frame_window(v: Tensor, t: int, behind: int, ahead: int) -> Tensor:
    """Columns v[t-behind] .. v[t+ahead] of a (T, d) sequence as (d, width).

    Frames outside [0, T) contribute zero columns, keeping the shape fixed
    at every t.
    """
    if v.data.ndim != 2:
        raise DimensionError(f"select_frame_window needs (T, d), got {v.shape}")
    t_len, dim = v.shape
    if not (0 <= t < t_len):
        raise ContractError(f"frame {t} out of range [0, {t_len})")
    width = behind + 1 + ahead
    data = np.zeros((dim, width))
    in_range = []
    for j in range(width):
        src = t - behind + j
        if 0 <= src < t_len:
            data[:, j] = v.data[src]
            in_range.append((j, src))

    def bwd(g):
        full = np.zeros_like(v.data)
        for j, src in in_range:
            full[src] += g[:, j]
        _accumulate(v, full)
    return _node(data, (v,), "frame_window", bwd)


# ---------------------------------------------------------------------------
# temporal convolution and normalization

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution over time with symmetric zero padding.

    x is (T, C_in), kernel is (C_out, C_in, K) with K odd; the output keeps
    temporal length T. Taps reach (K-1)/2 * dilation frames on each side.
    """
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise DimensionError(f"conv1d needs (T, C_in) x (C_out, C_in, K), "
                             f"got {x.shape} and {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if k % 2 == 0:
        raise ParameterError(f"kernel width must be odd, got {k}")
    if x.shape[1] != c_in:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")

    t_len = x.shape[0]
    pad = (k // 2) * dilation
    padded = np.zeros((t_len + 2 * pad, c_in))
    padded[pad:pad + t_len] = x.data
    out = np.zeros((t_len, c_out))
    for j in range(k):
        out += padded[j * dilation:j * dilation + t_len] @ kernel.data[:, :, j].T
    if bias is not None:
        out += bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[:, :, j] = g.T @ padded[j * dilation:j * dilation + t_len]
            _accumulate(kernel, gk)
        if x.requires_grad:
            gp = np.zeros_like(padded)
            for j in range(k):
                gp[j * dilation:j * dilation + t_len] += g @ kernel.data[:, :, j]
            _accumulate(x, gp[pad:pad + t_len])
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))
    return _node(out, parents, "conv1d", bwd)


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel of a (T, d) sequence to zero mean, unit variance
    over time, then apply per-channel gain and bias.

    Statistics come from the current sequence alone; T == 1 degenerates to
    the eps variance floor and stays finite.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"channel_norm needs (T, d), got {x.shape}")
    dim = x.shape[1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(f"gain/bias must be ({dim},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=0)
    var = ((x.data - mu) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gain.data * xhat + bias.data

    def bwd(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=0)
            m2 = (gx_hat * xhat).mean(axis=0)
            _accumulate(x, (gx_hat - m1 - xhat * m2) * inv_std)
    return _node(out, (x, gain, bias), "channel_norm", bwd)


# ---------------------------------------------------------------------------
# verification

def finite_difference_check(build_loss, params: Sequence[Tensor], h: float = 1e-5):
    """Worst relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the forward graph from the current contents
    of ``params`` on every call and return a scalar tensor. Relative error
    uses max(1, |analytic|, |numeric|) as the denominator. Gradients on
    ``params`` are cleared afterwards.
    """
    for p in params:
        if not p.requires_grad:
            raise ContractError("finite_difference_check needs requires-grad tensors")
        p.grad = None
    backward(build_loss())
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
