"""Minimal dense-tensor reverse-mode autodiff engine.

Tensors wrap a numpy array and record the operation that produced them.
``backward`` replays the tape in reverse creation order (creation order is
a topological order, since an op can only consume already-built tensors)
and accumulates gradients into leaves.

Layout conventions, fixed across the whole package:
  activations  (N, C, H, W)
  conv weights (K_h, K_w, C_in, C_out)
  dense weights (D_in, D_out)

No layer carries a bias term.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes (or dtypes) are inconsistent."""


class AutodiffError(RuntimeError):
    """Raised on invalid use of the tape, e.g. backward on a non-scalar."""


_grad_enabled = True
_node_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _next_node_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {d}; only f32/f64 tensors are supported")
    return d


class Tensor:
    """A dense n-dimensional array plus its position in the autodiff graph.

    Leaf tensors have no parents. Non-leaf tensors hold a backward closure
    that maps the output gradient to per-parent gradients. Data arrays are
    treated as immutable once the tensor participates in a graph.
    """

    __slots__ = ("data", "node_id", "op", "parents", "requires_grad",
                 "retains_grad", "grad", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.node_id = _next_node_id()
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.requires_grad = bool(requires_grad) and _grad_enabled
        # leaves keep their grad by default; interior nodes opt in via retain_grad
        self.retains_grad = True
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the underlying buffer."""
        return self.data.reshape(-1)

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's data, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.op = op
        out.parents = parents
        out.requires_grad = True
        out.retains_grad = False
        out._backward = backward
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(d.name for d in dts)}")


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients are accumulated (+=) into ``grad`` of every reachable leaf
    and of interior nodes that called ``retain_grad``. Contributions from
    multiple paths are summed.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Collect the reachable subgraph; reverse creation order is a valid
    # reverse topological order because parents predate their children.
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        for p in t.parents:
            if p.requires_grad:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.retains_grad:
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
        if t._backward is None:
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg


class Parameter:
    """A named trainable tensor with an accumulated gradient buffer."""

    def __init__(self, name: str, value, dtype=None, trainable: bool = True,
                 decay_exempt: bool = False):
        self.name = name
        self.value = Tensor(value, dtype=dtype, requires_grad=trainable)
        self.trainable = trainable
        self.decay_exempt = decay_exempt

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    def zero_grad(self) -> None:
        self.value.grad = None

    def assign(self, new_values: np.ndarray) -> None:
        """Replace the stored values ahead of the next forward pass."""
        if new_values.shape != self.value.data.shape:
            raise ShapeError(f"assign to {self.name}: shape {new_values.shape} "
                             f"!= {self.value.data.shape}")
        fresh = Tensor(new_values.astype(self.value.data.dtype, copy=False))
        fresh.requires_grad = self.trainable  # independent of any no_grad scope
        self.value = fresh

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class BatchNormState:
    """Per-channel batch-norm state: learnable scale/offset + running stats."""

    def __init__(self, name: str, channels: int, dtype="f32"):
        dt = _as_dtype(dtype)
        self.channels = channels
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dt),
                               decay_exempt=True)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dt),
                              decay_exempt=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if k > h or k > w:
            raise ShapeError(f"{k}x{k} window does not fit {h}x{w} input in valid mode")
        return (0, 0, 0, 0), (h - k) // stride + 1, (w - k) // stride + 1
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - w, 0)
        # odd padding puts the extra pixel on the bottom/right
        return (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2), ho, wo
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1,
               padding: str = "same") -> np.ndarray:
    """Plain-array cross-correlation; the single kernel behind every conv path.

    Both the graph op and the surrogate score gradient call this function,
    so their values agree bitwise on identical inputs.
    """
    n, c, h, wd = x.shape
    kh, kw, cin, cout = w.shape
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    if cin != c:
        raise ShapeError(f"conv input has {c} channels but kernel expects {cin}")
    (pt, pb, pl, pr), ho, wo = _conv_geometry(h, wd, kh, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kh), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(win, w, axes=([1, 4, 5], [2, 0, 1]))  # (N, Ho, Wo, Cout)
    return np.ascontiguousarray(np.moveaxis(y, 3, 1))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, no bias. x: (N,C,H,W), w: (K,K,C_in,C_out)."""
    _check_same_dtype(x, w)
    n, c, h, wd = x.shape
    kh, kw_, cin, cout = w.shape
    y = conv2d_raw(x.data, w.data, stride, padding)
    (pt, pb, pl, pr), ho, wo = _conv_geometry(h, wd, kh, stride, padding)

    def bwd(g: np.ndarray):
        gx = gw = None
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(xp, (kh, kh), axis=(2, 3))[:, :, ::stride, ::stride]
        if w.requires_grad:
            gw = np.tensordot(win, g, axes=([0, 2, 3], [0, 2, 3]))  # (C,K,K,Cout)
            gw = np.ascontiguousarray(np.transpose(gw, (1, 2, 0, 3)))
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [3]))  # (N,Ho,Wo,K,K,C)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kh):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        np.moveaxis(gcols[:, :, :, i, j, :], 3, 1)
            gx = gxp[:, :, pt:pt + h, pl:pl + wd]
        return gx, gw

    return _make(y, "conv2d", (x, w), bwd)


def depthwise_conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1,
                         padding: str = "same") -> np.ndarray:
    """Per-channel cross-correlation. x (N,C,H,W), w (K,K,C); channel c of
    the output only sees channel c of the input."""
    n, c, h, wd = x.shape
    kh, kw, cw = w.shape
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    if cw != c:
        raise ShapeError(f"input has {c} channels but kernel expects {cw}")
    (pt, pb, pl, pr), ho, wo = _conv_geometry(h, wd, kh, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kh), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(np.einsum("nchwuv,uvc->nchw", win, w))


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1,
                     padding: str = "same") -> Tensor:
    """Depthwise conv, no bias. x: (N,C,H,W), w: (K,K,C)."""
    _check_same_dtype(x, w)
    n, c, h, wd = x.shape
    kh = w.shape[0]
    y = depthwise_conv2d_raw(x.data, w.data, stride, padding)
    (pt, pb, pl, pr), ho, wo = _conv_geometry(h, wd, kh, stride, padding)

    def bwd(g: np.ndarray):
        gx = gw = None
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(xp, (kh, kh), axis=(2, 3))[:, :, ::stride, ::stride]
        if w.requires_grad:
            gw = np.einsum("nchwuv,nchw->uvc", win, g)
        if x.requires_grad:
            gcols = np.einsum("nchw,uvc->nchwuv", g, w.data)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kh):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j]
            gx = gxp[:, :, pt:pt + h, pl:pl + wd]
        return gx, gw

    return _make(y, "depthwise_conv2d", (x, w), bwd)


def channel_scale(x: Tensor, scale: np.ndarray) -> Tensor:
    """Multiply each output channel by a constant factor (mask application)."""
    scale = np.asarray(scale, dtype=x.dtype)
    if scale.ndim != 1 or scale.shape[0] != x.shape[1]:
        raise ShapeError(f"scale length {scale.shape} does not match {x.shape[1]} channels")
    s = scale.reshape(1, -1, 1, 1)
    y = x.data * s

    def bwd(g: np.ndarray):
        return (g * s,)

    return _make(y, "channel_scale", (x,), bwd)


# ---------------------------------------------------------------------------
# dense / normalization / activations / pooling
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor) -> Tensor:
    """Matrix product (N,D) @ (D,M), no bias."""
    _check_same_dtype(x, w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shapes do not chain: {x.shape} @ {w.shape}")
    y = x.data @ w.data

    def bwd(g: np.ndarray):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return gx, gw

    return _make(y, "dense", (x, w), bwd)


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train",
               momentum: float = 0.9, epsilon: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics and moves the running stats
    by an exponential average (running = momentum*running + (1-m)*batch);
    eval mode normalizes by the running stats. Affine transform applied in
    both modes.
    """
    if x.data.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects (N,{state.channels},H,W), got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    gamma, beta = state.gamma.value, state.beta.value
    _check_same_dtype(x, gamma, beta)
    gsh = (1, state.channels, 1, 1)

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mu.reshape(gsh)) * inv_std.reshape(gsh)
        state.running_mean = (momentum * state.running_mean
                              + (1.0 - momentum) * mu).astype(x.dtype)
        state.running_var = (momentum * state.running_var
                             + (1.0 - momentum) * var).astype(x.dtype)
        m = x.shape[0] * x.shape[2] * x.shape[3]

        def bwd_train(g: np.ndarray):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(gsh)
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(gsh)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(gsh)
                gx = (inv_std.reshape(gsh) / m) * (m * gxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta

        y = gamma.data.reshape(gsh) * xhat + beta.data.reshape(gsh)
        return _make(y, "batch_norm", (x, gamma, beta), bwd_train)

    inv_std = 1.0 / np.sqrt(state.running_var + epsilon)
    xhat = (x.data - state.running_mean.reshape(gsh)) * inv_std.reshape(gsh)

    def bwd_eval(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = g * (gamma.data * inv_std).reshape(gsh) if x.requires_grad else None
        return gx, ggamma, gbeta

    y = gamma.data.reshape(gsh) * xhat + beta.data.reshape(gsh)
    return _make(y, "batch_norm", (x, gamma, beta), bwd_eval)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))

    def bwd(g: np.ndarray):
        return (g * mask,)

    return _make(y, "relu", (x,), bwd)


def max_pool(x: Tensor, k: int, stride: int, padding: str = "valid") -> Tensor:
    """Max pooling; gradient goes to the first argmax in scan order.

    'valid' drops ragged edges; 'same' pads with -inf so padded cells can
    never win a window.
    """
    n, c, h, w = x.shape
    if padding == "valid" and (k > h or k > w):
        raise ShapeError(f"{k}x{k} pooling window does not fit {h}x{w} input")
    (pt, pb, pl, pr), ho, wo = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=4)  # first occurrence on ties
    y = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def bwd(g: np.ndarray):
        gxp = np.zeros_like(xp)
        ni, ci, hi, wi = np.indices((n, c, ho, wo))
        rows = hi * stride + idx // k
        cols = wi * stride + idx % k
        np.add.at(gxp, (ni, ci, rows, cols), g)
        return (gxp[:, :, pt:pt + h, pl:pl + w],)

    return _make(np.ascontiguousarray(y), "max_pool", (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def bwd(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(y, "global_avg_pool", (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(shape)

    def bwd(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _make(y, "reshape", (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# arithmetic used by loss composition
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def bwd(g: np.ndarray):
        return g, g

    return _make(y, "add", (a, b), bwd)


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    y = x.data + c
    if y.shape != x.shape:
        raise ShapeError(f"constant of shape {c.shape} broadcasts {x.shape} upward")

    def bwd(g: np.ndarray):
        return (g,)

    return _make(y, "add_const", (x,), bwd)


def mul_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.dtype)
    y = x.data * c
    if y.shape != x.shape:
        raise ShapeError(f"constant of shape {c.shape} broadcasts {x.shape} upward")

    def bwd(g: np.ndarray):
        return (g * c,)

    return _make(y, "mul_const", (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    return mul_const(x, x.data.dtype.type(s))


def square(x: Tensor) -> Tensor:
    y = x.data * x.data

    def bwd(g: np.ndarray):
        return (2.0 * x.data * g,)

    return _make(y, "square", (x,), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    y = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _make(y, "sum", (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a (N,K) tensor, max-shifted for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax expects (N,K), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse

    def bwd(g: np.ndarray):
        p = np.exp(y)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(y, "log_softmax", (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot label rows.

    Labels are constants; each row must sum to 1.
    """
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if lab.shape != logits.shape:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    row_sums = lab.sum(axis=1)
    bad = np.nonzero(np.abs(row_sums - 1.0) > 1e-5)[0]
    if bad.size:
        raise ValueError(f"label row {bad[0]} sums to {row_sums[bad[0]]!r}, expected 1")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = np.asarray(-(lab * logp).sum() / n, dtype=logits.dtype)

    def bwd(g: np.ndarray):
        p = np.exp(logp)
        return ((p - lab) * (g / n),)

    return _make(y, "softmax_cross_entropy", (logits,), bwd)
