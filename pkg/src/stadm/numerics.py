"""Dense float64 arrays with reverse-mode gradients.

Every operation the model uses lives here: forward values are computed with
numpy and each op records a closure that maps the output gradient back to its
inputs. Broadcasting follows numpy rules; gradients are summed back to the
input shape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            node._backward(g)
            # interior nodes release their gradient once propagated
            node.grad = None
            node._backward = None
            node._parents = ()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), backward)


# ---------------------------------------------------------------- shapes

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accum(b, gb)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(tuple(shape)), (x,), backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _make(np.broadcast_to(x.data, tuple(shape)).copy(), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(data, tensors, backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accum(x, gx)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``."""
    return take(table, indices, axis=0)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), backward)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        _accum(a, d)
        _accum(b, -d)

    return _make(np.asarray(np.mean(diff * diff)), (a, b), backward)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = np.exp(shifted)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then gain*x + shift."""
    n = x.shape[-1]
    if n < 2:
        raise ConfigError("layer_norm needs at least 2 features per row")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if shift.requires_grad:
            _accum(shift, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + shift.data, (x, gain, shift), backward)


layer_norm_rows = layer_norm


class RunningStats:
    """Batch-norm running mean/variance, updated in place in train mode."""

    def __init__(self, n_features: int):
        self.mean = np.zeros(n_features)
        self.var = np.ones(n_features)


def batch_norm(x: Tensor, gain: Tensor, shift: Tensor, stats: RunningStats,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-feature normalisation of a ``B x F`` matrix.

    Train mode uses batch statistics and folds them into ``stats``; eval mode
    uses ``stats`` unchanged.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects B x F, got {x.shape}")
    b = x.shape[0]
    if training:
        if b < 2:
            raise ConfigError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        stats.mean[:] = (1 - momentum) * stats.mean + momentum * mu
        stats.var[:] = (1 - momentum) * stats.var + momentum * var * b / (b - 1)
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0))
        if shift.requires_grad:
            _accum(shift, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            if training:
                gx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv
            _accum(x, gx)

    return _make(xhat * gain.data + shift.data, (x, gain, shift), backward)


batch_norm_feature = batch_norm


# ---------------------------------------------------------------- convolution

def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with (k-1)/2 zeros on both ends.

    ``x`` is ``[..., C, N]``, ``kernel`` is ``F x C x k``, ``bias`` is ``F``;
    the result is ``[..., F, N]``.
    """
    f, c, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel size, got {k}")
    if x.shape[-2] != c:
        raise DimensionError(f"conv1d_same: input has {x.shape[-2]} channels, kernel expects {c}")
    n = x.shape[-1]
    pad = (k - 1) // 2
    lead = x.shape[:-2]
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [(0, 0), (pad, pad)])
    # cols[..., c, j, n] = xp[..., c, n + j]
    cols = np.lib.stride_tricks.sliding_window_view(xp, n, axis=-1).reshape(*lead, c * k, n)
    w2 = kernel.data.reshape(f, c * k)
    out = w2 @ cols + bias.data[:, None]

    def backward(g):
        if kernel.requires_grad:
            gw = (g.reshape(-1, f, n) @ np.swapaxes(cols.reshape(-1, c * k, n), -1, -2)).sum(axis=0)
            _accum(kernel, gw.reshape(f, c, k))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, f, n).sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = (w2.T @ g).reshape(*lead, c, k, n)
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[..., j:j + n] += gcols[..., j, :]
            _accum(x, gxp[..., pad:pad + n])

    return _make(out, (x, kernel, bias), backward)


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes, fused for memory."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s

    def backward(g):
        if v.requires_grad:
            _accum(v, _unbroadcast(np.swapaxes(p, -1, -2) @ g, v.shape))
        if q.requires_grad or k.requires_grad:
            gs = g @ np.swapaxes(v.data, -1, -2)
            gs -= (gs * p).sum(axis=-1, keepdims=True)
            gs *= p
            gs *= scale
            if q.requires_grad:
                _accum(q, _unbroadcast(gs @ k.data, q.shape))
            if k.requires_grad:
                _accum(k, _unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape))

    return _make(p @ v.data, (q, k, v), backward)


def attention_weights(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable arrays plus non-trainable state (batch-norm statistics)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, RunningStats] = {}

    def add(self, path: str, value) -> Tensor:
        if path in self._params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[path] = t
        return t

    def add_stats(self, path: str, n_features: int) -> RunningStats:
        if path in self.state:
            raise ConfigError(f"duplicate state path {path!r}")
        stats = self.state[path] = RunningStats(n_features)
        return stats

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data.copy() for k, t in self._params.items()}
        for k, s in self.state.items():
            out[f"state/{k}/mean"] = s.mean.copy()
            out[f"state/{k}/var"] = s.var.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite values in place; every registered entry must be present."""
        for k, t in self._params.items():
            a = arrays.get(f"param/{k}")
            if a is None or a.shape != t.shape:
                raise DimensionError(f"checkpoint lacks parameter {k!r} of shape {t.shape}")
            t.data = np.array(a, dtype=np.float64)
            t.grad = np.zeros_like(t.data)
        for k, s in self.state.items():
            s.mean[:] = arrays[f"state/{k}/mean"]
            s.var[:] = arrays[f"state/{k}/var"]


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, h: float = 1e-5,
               paths: Iterable[str] | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_entries`` only a random subset of each parameter's entries is
    probed.
    """
    paths = list(paths) if paths is not None else list(params)
    params.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    loss.backward()
    analytic = {p: params[p].grad.copy() for p in paths}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for path in paths:
        t = params[path]
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f(params).data)
                flat[i] = orig - h
                fm = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: objective not finite near {path}[{i}]")
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic[path].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def check_finite(x: Tensor | np.ndarray, what: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.isfinite(data).all():
        raise NumericError(f"{what} contains NaN or Inf")
