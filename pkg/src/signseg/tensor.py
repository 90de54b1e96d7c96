"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output adjoint to parent adjoints.  ``backward`` walks
the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

try:
    from numpy.lib.array_utils import normalize_axis_tuple
except ImportError:  # numpy < 2
    from numpy.core.numeric import normalize_axis_tuple

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    out = Tensor(data, op=op, parents=tuple(parents), backward=backward)
    out.requires_grad = True
    out.grad = None  # intermediate adjoints are filled in by backward()
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), "relu", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, "sigmoid", (a,), bw)


def absolute(a) -> Tensor:
    """|a|, with subgradient 0 at the kink."""
    a = as_tensor(a)
    s = np.sign(a.data)

    def bw(g):
        return (g * s,)

    return _result(np.abs(a.data), "abs", (a,), bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("relu", "sigmoid"):
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# matrix products

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (m,k) @ (..., k, n) and (..., m, k) @ (k, n) folded into one GEMM
    if a.ndim == 2 and b.ndim > 2:
        k, n = b.shape[-2:]
        lead = b.shape[:-2]
        b2 = np.moveaxis(b, -2, 0).reshape(k, -1)
        out = (a @ b2).reshape((a.shape[0],) + lead + (n,))
        return np.moveaxis(out, 0, -2)
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(lead + (b.shape[1],))
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = _mm(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                m = a.shape[0]
                g2 = np.moveaxis(g, -2, 0).reshape(m, -1)
                b2 = np.moveaxis(b.data, -2, 0).reshape(b.shape[-2], -1)
                ga = g2 @ b2.T
            elif b.ndim == 2 and a.ndim > 2:
                ga = _mm(g, b.data.T)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                gb = _mm(a.data.T, g)
            elif b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _result(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), "transpose", (a,), bw)


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def take(a, index) -> Tensor:
    """Basic or advanced indexing; adjoint scatters back with ``np.add.at``."""
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), "take", (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bw)


# ---------------------------------------------------------------------------
# reductions

def reduce(kind: str, x, axis: int | tuple | None = None) -> Tensor:
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(normalize_axis_tuple(axis, x.ndim))
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    out = x.data.sum(axis=axes)
    if kind == "mean":
        out = out / n
    scale = 1.0 / n if kind == "mean" else 1.0

    def bw(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _result(out, kind, (x,), bw)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", x, axis)


def mean(x, axis=None) -> Tensor:
    return reduce("mean", x, axis)


# ---------------------------------------------------------------------------
# softmax family

def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return np.where(mask, x, -np.inf)


def softmax_array(x: np.ndarray, axis: int = -1, mask=None) -> np.ndarray:
    z = _masked_logits(x, mask)
    zmax = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("softmax slice has no unmasked entries")
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get weight exactly 0."""
    x = as_tensor(x)
    y = softmax_array(x.data, axis, mask)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), bw)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    zmax = np.max(x, axis=axis, keepdims=True)
    z = x - zmax
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Class-weighted cross-entropy, reduced as a weighted mean.

    ``logits`` has classes on the last axis; ``targets`` holds integer class
    indices for every leading position.  The result is
    ``sum_t w[y_t] * nll_t / sum_t w[y_t]``.
    """
    logits = as_tensor(logits)
    c = logits.shape[-1]
    y = np.asarray(targets)
    if y.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {y.shape} does not match logits {logits.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"target outside [0, {c})")
    w = np.ones(c, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    if w.shape != (c,) or np.any(w < 0):
        raise ValueError("weights must be a nonnegative vector with one entry per class")
    wt = w[y]
    total = wt.sum()
    if total <= 0:
        raise ValueError("total target weight is zero")
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
    loss = -(wt * picked).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
        return (g * (wt / total)[..., None] * (p - onehot),)

    return _result(np.array(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# convolution over time

def conv_time(x, w) -> Tensor:
    """Same-padded 1-D cross-correlation along axis 1 of a channels-last array.

    ``x`` is ``(N, T, ..., C_in)`` and ``w`` is ``(C_out, C_in, K)`` with odd K.
    Returns ``(N, T, ..., C_out)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    c_out, c_in, k = w.shape
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {c_in}")
    pad = k // 2
    n, t = x.shape[0], x.shape[1]
    rest = x.shape[2:-1]
    r = int(np.prod(rest)) if rest else 1
    tp = t + 2 * pad
    # time-padded input flattened to rows; shifting by one frame is an offset of r rows,
    # so every tap is a contiguous slice.  Rows past the last valid output are junk.
    xp = np.zeros((n, tp, r, c_in), dtype=DTYPE)
    xp[:, pad:pad + t] = x.data.reshape(n, t, r, c_in)
    flat = xp.reshape(-1, c_in)
    m = flat.shape[0] - 2 * pad * r
    taps = [np.ascontiguousarray(w.data[:, :, i].T) for i in range(k)]
    full = np.zeros((n * tp * r, c_out), dtype=DTYPE)
    acc = full[:m]
    for i in range(k):
        acc += flat[i * r:i * r + m] @ taps[i]
    out = full.reshape(n, tp, r, c_out)[:, :t].reshape(x.shape[:-1] + (c_out,))

    def bw(g):
        gfull = np.zeros((n, tp, r, c_out), dtype=DTYPE)
        gfull[:, :t] = g.reshape(n, t, r, c_out)
        g2 = gfull.reshape(-1, c_out)[:m]
        gx = gw = None
        if w.requires_grad:
            gw = np.stack([(flat[i * r:i * r + m].T @ g2).T for i in range(k)], axis=-1)
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            for i in range(k):
                gflat[i * r:i * r + m] += g2 @ taps[i].T
            gx = gflat.reshape(n, tp, r, c_in)[:, pad:pad + t].reshape(x.shape)
        return gx, gw

    return _result(out, "temporal_conv", (x, w), bw)


def temporal_conv(x, w) -> Tensor:
    """1-D same-padded cross-correlation of ``x`` (``C_in x T``) with ``w``.

    A leading batch axis ``(N, C_in, T)`` is also accepted.
    """
    x = as_tensor(x)
    if x.ndim == 2:
        y = conv_time(reshape(transpose(x), (1, x.shape[1], x.shape[0])), w)
        return transpose(reshape(y, y.shape[1:]))
    if x.ndim == 3:
        return swapaxes(conv_time(swapaxes(x, 1, 2), w), 1, 2)
    raise ShapeError("temporal_conv expects C_in x T or N x C_in x T input")


def graph_conv(h, a_hat, w) -> Tensor:
    """Single-partition graph convolution ``a_hat @ h @ w``.

    ``h`` is ``(..., J, C_in)``; leading axes are broadcast.
    """
    h, a_hat, w = as_tensor(h), as_tensor(a_hat), as_tensor(w)
    j = a_hat.shape[0]
    if a_hat.shape != (j, j) or h.shape[-2] != j:
        raise ShapeError(f"adjacency {a_hat.shape} does not fit features {h.shape}")
    return matmul(matmul(a_hat, h), w)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm(x, state: BatchNormState, train: bool, gamma=None, beta=None,
               channel_axis: int = -1, mask=None) -> Tensor:
    """Per-channel normalization.

    In train mode the statistics are taken over every axis except
    ``channel_axis`` and the running statistics are updated in place.
    ``mask`` (broadcastable to ``x`` with a size-1 channel axis) restricts
    the statistics to real positions.
    """
    x = as_tensor(x)
    ax = channel_axis % x.ndim
    c = x.shape[ax]
    if c != state.channels:
        raise ShapeError(f"batch norm configured for {state.channels} channels, got {c}")
    red = tuple(i for i in range(x.ndim) if i != ax)
    bshape = [1] * x.ndim
    bshape[ax] = c
    eps = state.eps

    if train:
        if mask is None:
            m = None
            n = x.size // c
            mu = x.data.mean(axis=red, keepdims=True)
            var = ((x.data - mu) ** 2).mean(axis=red, keepdims=True)
        else:
            m = np.broadcast_to(np.asarray(mask, dtype=DTYPE), x.shape)
            n = m.sum() / c
            mu = (x.data * m).sum(axis=red, keepdims=True) / n
            var = (((x.data - mu) ** 2) * m).sum(axis=red, keepdims=True) / n
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1 - mom) * mu.reshape(c)
        state.running_var = mom * state.running_var + (1 - mom) * var.reshape(c)
    else:
        m = None
        mu = state.running_mean.reshape(bshape)
        var = state.running_var.reshape(bshape)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data.reshape(bshape)

    def bw(g):
        grads = []
        gh = g * gamma.data.reshape(bshape) if gamma is not None else g
        if train:
            if m is None:
                s1 = gh.sum(axis=red, keepdims=True)
                s2 = (gh * xhat).sum(axis=red, keepdims=True)
                gx = inv * (gh - s1 / n - xhat * s2 / n)
            else:
                s1 = gh.sum(axis=red, keepdims=True)
                s2 = (gh * xhat).sum(axis=red, keepdims=True)
                gx = inv * (gh - m * (s1 / n) - m * xhat * (s2 / n))
        else:
            gx = gh * inv
        grads.append(gx)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _result(out, "batch_norm", parents, bw)


def batch_norm_1d(x, state: BatchNormState, mode: str = "train") -> Tensor:
    """Pre-affine batch norm of a ``C x T`` tensor."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return batch_norm(x, state, mode == "train", channel_axis=0)


# ---------------------------------------------------------------------------
# backward pass

class ComputationRecord:
    """Operations reachable from ``root`` in topological (forward) order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    def __len__(self) -> int:
        return len(self.operations)


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = record or ComputationRecord(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(record.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                _check_finite(node.grad, "backward")
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != p.shape:
                raise ShapeError(f"{node.op} adjoint shape {pg.shape} != {p.shape}")
            prev = adj.get(id(p))
            adj[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``coords`` restricts the check to selected flat indices.
    """
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = parameter(base.copy())
    out = f(xt)
    again = f(Tensor(base.copy()))
    if out.data.shape != () or again.data.shape != ():
        raise ShapeError("grad_check needs a scalar-valued function")
    if out.data != again.data:
        raise RuntimeError("function is not deterministic")
    backward(out)
    g_ad = xt.grad.reshape(-1)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        with no_grad():
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
        g_fd = (fp - fm) / (2 * eps)
        err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
        worst = max(worst, err)
    return worst


def directional_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                           direction: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Relative error of the directional derivative along ``direction``.

    ``loss_fn`` must rebuild the loss from the current values of ``params``.
    Cheaper than per-coordinate checks on networks with many parameters.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    g_ad = float(np.sum([np.sum(p.grad * d) for p, d in zip(params, direction)]))
    saved = [p.data.copy() for p in params]
    try:
        vals = []
        for sign in (1.0, -1.0):
            for p, s, d in zip(params, saved, direction):
                p.data = s + sign * eps * d
            with no_grad():
                vals.append(loss_fn().item())
    finally:
        for p, s in zip(params, saved):
            p.data = s
    g_fd = (vals[0] - vals[1]) / (2 * eps)
    return abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
