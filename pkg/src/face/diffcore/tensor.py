"""Dense tensors with reverse-mode differentiation.

Every backward rule is written in terms of the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself part of the graph and
can be differentiated again (needed for second-order MAML).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_ids = itertools.count()


def _recording() -> bool:
    return getattr(_state, "record", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def no_grad():
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


@contextmanager
def enable_grad(flag: bool = True):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


@contextmanager
def precision(dtype):
    """Run ops in ``dtype`` (float64 is used by finite-difference oracles)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def trace_branches():
    """Collect the branch pattern (ReLU/clamp masks, max-pool winners) of every op run inside.

    Finite-difference oracles use it to tell when a perturbation crossed a
    point where the function is not differentiable.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = trace = []
    try:
        yield trace
    finally:
        _state.branches = prev


def _note_branch(mask: np.ndarray) -> None:
    trace = getattr(_state, "branches", None)
    if trace is not None:
        trace.append(np.packbits(mask.astype(bool)).tobytes())


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""

    def __init__(self, op: str, node: str, detail: str):
        self.op = op
        self.node = node
        super().__init__(f"{op} at node {node}: {detail}")


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def label(self) -> str:
        return self.name or f"#{self.id}({self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor({self.label()}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return pow_scalar(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self, tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])

    def backward(g):
        return (broadcast_to(g, x.shape),)

    return _node(data.reshape(shape), (x,), backward, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.broadcast_to(x.data, shape)

    def backward(g):
        return (sum_to(g, x.shape),)

    return _node(data, (x,), backward, "broadcast_to")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", x.label(), str(e)) from None

    def backward(g):
        return (reshape(g, x.shape),)

    return _node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inv),)

    return _node(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def backward(g):
        return (index_put(g, x.shape, key),)

    return _node(np.ascontiguousarray(data), (x,), backward, "getitem")


def index_put(g: Tensor, shape: tuple[int, ...], key) -> Tensor:
    """Scatter-add ``g`` into zeros of ``shape`` at ``key`` (adjoint of getitem)."""
    out = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(out, key, g.data)

    def backward(h):
        return (getitem(h, key),)

    return _node(out, (g,), backward, "index_put")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError("concat", x.label(), f"shape {x.shape} incompatible with {xs[0].shape}")
    data = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            out.append(getitem(g, key))
        return tuple(out)

    return _node(data, xs, backward, "concat")


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, b.label(), f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(mul(g, -1.0), b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = None

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(mul(g, -1.0), div(out, b)), b.shape) if b.requires_grad else None
        return ga, gb

    out = _node(a.data / b.data, (a, b), backward, "div")
    return out


def pow_scalar(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return (mul(g, mul(pow_scalar(x, p - 1.0), p)),)

    return _node(np.power(x.data, p), (x,), backward, f"pow{p:g}")


def exp(x: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _node(np.exp(x.data), (x,), backward, "exp")
    return out


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (div(g, x),)

    return _node(np.log(x.data), (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = Tensor((x.data > 0).astype(x.data.dtype))
    _note_branch(mask.data)

    def backward(g):
        return (mul(g, mask),)

    return _node(x.data * mask.data, (x,), backward, "relu")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient is zero where the floor is active."""
    mask = Tensor((x.data > lo).astype(x.data.dtype))
    _note_branch(mask.data)

    def backward(g):
        return (mul(g, mask),)

    return _node(np.maximum(x.data, lo).astype(x.data.dtype), (x,), backward, "clamp_min")


def sigmoid(x: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-x.data))
    out = _node(data.astype(x.data.dtype), (x,), backward, "sigmoid")
    return out


def tanh(x: Tensor) -> Tensor:
    out = None

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _node(np.tanh(x.data), (x,), backward, "tanh")
    return out


# ---------------------------------------------------------------------------
# reductions and products


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), x.shape),)

    data = x.data.sum(axis=axes, keepdims=keepdims)
    return _node(np.asarray(data, dtype=x.data.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", b.label(), "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", b.label(), f"inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # fold batch axes so the weight gradient is one 2-D product
        flat = matmul(reshape(a, (-1, a.shape[-1])), b)
        return reshape(flat, a.shape[:-1] + (b.shape[-1],))

    def backward(g):
        ga = sum_to(matmul(g, b.T), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(a.T, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# sliding windows (convolution support)


def im2col(x: Tensor, kh: int, kw: int, ph: int, pw: int) -> Tensor:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patches, stride 1, zero padding."""
    n, c, h, w = x.shape
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("im2col", x.label(), f"kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    data = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    def backward(g):
        return (col2im(g, x.shape, kh, kw, ph, pw),)

    return _node(np.ascontiguousarray(data), (x,), backward, "im2col")


def col2im(cols: Tensor, shape, kh: int, kw: int, ph: int, pw: int) -> Tensor:
    """Adjoint of im2col: overlap-add patches back onto the (N, C, H, W) grid."""
    n, c, h, w = shape
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    c6 = cols.data.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += c6[:, :, i, j]
    out = out[:, :, ph : ph + h, pw : pw + w]

    def backward(g):
        return (im2col(g, kh, kw, ph, pw),)

    return _node(np.ascontiguousarray(out), (cols,), backward, "col2im")


# ---------------------------------------------------------------------------
# composites


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, sum_(e, axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    return sub(shifted, log(sum_(exp(shifted), axis, keepdims=True)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding=(0, 0)) -> Tensor:
    """Stride-1 cross-correlation. x: (N, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.label(), f"expected 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.label(), f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    ph, pw = padding
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    cols = im2col(x, kh, kw, ph, pw)
    y = matmul(cols, transpose(reshape(w, (cout, cin * kh * kw)), (1, 0)))
    if b is not None:
        y = add(y, b)
    return transpose(reshape(y, (n, ho, wo, cout)), (0, 3, 1, 2))


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; the argmax selection is a forward-pass constant."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2d", x.label(), f"spatial extents {h}x{w} not even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, win.argmax(axis=-1)[..., None], 1.0, axis=-1)
    _note_branch(onehot)
    mask = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, 2, w // 2, 2)
    xr = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return sum_(mul(xr, Tensor(mask)), axis=(3, 5))


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize over the last two axes."""
    rh = Tensor(bilinear_matrix(x.shape[-2], out_h))
    rw = Tensor(bilinear_matrix(x.shape[-1], out_w).T)
    return matmul(matmul(rh, x), rw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    axes: tuple[int, ...],
    stats=None,
    training: bool = True,
    update_stats: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over ``axes``.

    In training mode the batch mean/variance are used and differentiated
    through. ``stats`` is a ``RunningStats`` updated in place when
    ``update_stats`` is set; in inference mode its values are constants.
    """
    axes = _normalize_axes(axes, x.ndim)
    if training:
        mu = mean(x, axes, keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axes, keepdims=True)
        xhat = mul(xc, pow_scalar(add(var, eps), -0.5))
        if update_stats and stats is not None:
            n = int(np.prod([x.shape[a] for a in axes]))
            unbiased = var.data * (n / max(n - 1, 1))
            stats.update(mu.data, unbiased, momentum)
    else:
        if stats is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        xhat = mul(sub(x, Tensor(stats.mean)), Tensor((stats.var + eps) ** -0.5))
    return add(mul(xhat, gamma), beta)


class RunningStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, shape):
        self.mean = np.zeros(shape, dtype=np.float64)
        self.var = np.ones(shape, dtype=np.float64)

    def update(self, mu, var, momentum):
        self.mean = (1 - momentum) * self.mean + momentum * np.asarray(mu, np.float64).reshape(self.mean.shape)
        self.var = (1 - momentum) * self.var + momentum * np.asarray(var, np.float64).reshape(self.var.shape)

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


# ---------------------------------------------------------------------------
# backward pass


def _topo(output: Tensor, stop: set | None = None) -> list[Tensor]:
    order, seen, stack = [], set(), [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        if stop and node.id in stop:
            continue
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward_grads(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
    independent: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``wrt``.

    Unused inputs get zero gradients. With ``create_graph`` the returned
    tensors stay on the graph and can be differentiated again. Set
    ``independent`` when no ``wrt`` tensor is an ancestor of another; the
    traversal then stops at the ``wrt`` tensors instead of walking the
    whole history behind them.
    """
    wrt = list(wrt)
    if seed is None:
        if output.size != 1:
            raise ShapeError("grad", output.label(), f"output must be scalar, got shape {output.shape}")
        seed = Tensor(np.ones_like(output.data))
    targets = {t.id for t in wrt}
    order = _topo(output, targets if independent else None) if output.requires_grad else []
    live = set()
    for node in order:
        if node.id in targets or any(p.id in live for p in node.parents):
            live.add(node.id)

    grads: dict[int, Tensor] = {}
    if output.id in live:
        grads[output.id] = seed
    with enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or p.id not in live:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    out = []
    for t in wrt:
        g = grads.get(t.id)
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out
